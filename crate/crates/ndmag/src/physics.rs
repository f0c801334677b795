//! Orientation-averaged ODMR spectrum model for nanodiamond ensembles.
//!
//! A nanodiamond film contains NV centers with uniformly random symmetry
//! axes. For an axial magnetic field (along the optical z-axis), each
//! orientation at polar angle θ contributes a pair of Lorentzian dips at the
//! resonance frequencies f± = D ± sqrt(E_s² + (γ B cosθ)²), weighted by how
//! efficiently that orientation is excited (κ) and how much of its
//! fluorescence the objective collects (P). The ensemble spectrum is
//!
//! ```text
//! S(f) = 1 - ∫ κ(θ) P(θ) [L(f, f₋(θ)) + L(f, f₊(θ))] sinθ dθ
//!            / ∫ κ(θ) P(θ) sinθ dθ
//! ```
//!
//! with the azimuthal integral already carried out (the integrand is
//! azimuth-independent for an axial field, so it reduces to a factor 2π that
//! cancels). The θ integral is evaluated by fixed-order Gauss–Legendre
//! quadrature; the weight is normalized to integrate to one, so the
//! proportionality constants of κ and P drop out.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::f64::consts::PI;
use thiserror::Error;

use crate::quad;

/// Zero-field splitting of the NV ground state, MHz.
pub const DEFAULT_ZERO_FIELD_SPLITTING_MHZ: f64 = 2870.0;
/// Electron-spin gyromagnetic ratio, kHz/µT.
pub const DEFAULT_GYROMAGNETIC_KHZ_PER_UT: f64 = 28.024;
/// Default number of Gauss–Legendre nodes for the orientation integral.
pub const DEFAULT_QUAD_NODES: usize = 64;
/// Default microwave sweep: 141 points equally spaced in [2720, 2990] MHz.
pub const DEFAULT_FREQ_MIN_MHZ: f64 = 2720.0;
pub const DEFAULT_FREQ_MAX_MHZ: f64 = 2990.0;
pub const DEFAULT_FREQ_POINTS: usize = 141;

/// Errors from the physical model.
#[derive(Debug, Error)]
pub enum PhysicsError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("unsupported geometry: {0}")]
    UnsupportedGeometry(String),
    #[error("quadrature resolution too low: {nodes} nodes, need at least {min}")]
    QuadratureResolution { nodes: usize, min: usize },
}

/// Physical parameters of the ensemble spectrum model.
///
/// Linewidths and contrasts are kept separately for the two resonance
/// branches; the defaults set them equal.
#[derive(Debug, Clone, PartialEq)]
pub struct NdeModelParams {
    /// Zero-field splitting D, MHz.
    pub d_mhz: f64,
    /// Lattice strain splitting E_s, MHz.
    pub e_s_mhz: f64,
    /// Gyromagnetic ratio γ, kHz/µT.
    pub gamma_khz_per_ut: f64,
    /// Linewidth δν₋ of the lower branch, MHz.
    pub delta_nu_minus_mhz: f64,
    /// Linewidth δν₊ of the upper branch, MHz.
    pub delta_nu_plus_mhz: f64,
    /// Contrast amplitude C₋ of the lower branch, dimensionless, in [0, 1).
    pub c_minus: f64,
    /// Contrast amplitude C₊ of the upper branch, dimensionless, in [0, 1).
    pub c_plus: f64,
    /// Objective half-angle θ_max = arcsin(NA), rad.
    pub theta_max_rad: f64,
    /// Excitation-field linear-polarization amplitude along x, arbitrary units.
    pub e_x: f64,
    /// Excitation-field linear-polarization amplitude along y, arbitrary units.
    pub e_y: f64,
}

impl Default for NdeModelParams {
    fn default() -> Self {
        NdeModelParams {
            d_mhz: DEFAULT_ZERO_FIELD_SPLITTING_MHZ,
            e_s_mhz: 5.0,
            gamma_khz_per_ut: DEFAULT_GYROMAGNETIC_KHZ_PER_UT,
            delta_nu_minus_mhz: 5.0,
            delta_nu_plus_mhz: 5.0,
            c_minus: 0.6,
            c_plus: 0.6,
            theta_max_rad: 0.7f64.asin(), // NA = 0.7 objective
            e_x: 1.0,
            e_y: 1.0,
        }
    }
}

impl NdeModelParams {
    /// Validated constructor; see [`NdeModelParams::validate`].
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        d_mhz: f64,
        e_s_mhz: f64,
        gamma_khz_per_ut: f64,
        delta_nu_minus_mhz: f64,
        delta_nu_plus_mhz: f64,
        c_minus: f64,
        c_plus: f64,
        theta_max_rad: f64,
        e_x: f64,
        e_y: f64,
    ) -> Result<Self, PhysicsError> {
        let p = NdeModelParams {
            d_mhz,
            e_s_mhz,
            gamma_khz_per_ut,
            delta_nu_minus_mhz,
            delta_nu_plus_mhz,
            c_minus,
            c_plus,
            theta_max_rad,
            e_x,
            e_y,
        };
        p.validate()?;
        Ok(p)
    }

    /// Default parameters with the objective numerical aperture replaced.
    pub fn with_na(na: f64) -> Result<Self, PhysicsError> {
        if !(0.0..=1.0).contains(&na) {
            return Err(PhysicsError::InvalidParameter(format!(
                "numerical aperture must be in [0, 1], got {na}"
            )));
        }
        Ok(NdeModelParams {
            theta_max_rad: na.asin(),
            ..NdeModelParams::default()
        })
    }

    /// Check every model invariant.
    ///
    /// Besides the individual parameter ranges, this enforces
    /// C₋/δν₋² + C₊/δν₊² < 1, the Lorentzian peak bound that keeps the
    /// synthesized contrast strictly positive.
    pub fn validate(&self) -> Result<(), PhysicsError> {
        let err = |msg: String| Err(PhysicsError::InvalidParameter(msg));
        if !(self.d_mhz > 0.0) {
            return err(format!("zero-field splitting must be > 0, got {}", self.d_mhz));
        }
        if !(self.e_s_mhz >= 0.0) {
            return err(format!("lattice strain must be >= 0, got {}", self.e_s_mhz));
        }
        if !(self.gamma_khz_per_ut > 0.0) {
            return err(format!(
                "gyromagnetic ratio must be > 0, got {}",
                self.gamma_khz_per_ut
            ));
        }
        if !(self.delta_nu_minus_mhz > 0.0) || !(self.delta_nu_plus_mhz > 0.0) {
            return err(format!(
                "linewidths must be > 0, got ({}, {})",
                self.delta_nu_minus_mhz, self.delta_nu_plus_mhz
            ));
        }
        if !(0.0..1.0).contains(&self.c_minus) || !(0.0..1.0).contains(&self.c_plus) {
            return err(format!(
                "contrasts must be in [0, 1), got ({}, {})",
                self.c_minus, self.c_plus
            ));
        }
        if !(0.0..=PI / 2.0).contains(&self.theta_max_rad) {
            return err(format!(
                "objective half-angle must be in [0, pi/2], got {}",
                self.theta_max_rad
            ));
        }
        if !(self.e_x * self.e_x + self.e_y * self.e_y > 0.0) {
            return err("excitation polarization must be nonzero".to_string());
        }
        let peak = self.c_minus / (self.delta_nu_minus_mhz * self.delta_nu_minus_mhz)
            + self.c_plus / (self.delta_nu_plus_mhz * self.delta_nu_plus_mhz);
        if !(peak < 1.0) {
            return err(format!(
                "Lorentzian peak bound violated: C-/dv-^2 + C+/dv+^2 = {peak} >= 1"
            ));
        }
        Ok(())
    }
}

/// A magnetic field in spherical coordinates relative to the optical z-axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldVector {
    /// Field magnitude, µT.
    pub magnitude_ut: f64,
    /// Tilt from the optical axis, rad, in [0, π].
    pub polar_angle_rad: f64,
    /// Azimuth in the sample plane, rad.
    pub azimuth_rad: f64,
}

impl FieldVector {
    /// A field of the given magnitude along the optical axis.
    pub fn axial(magnitude_ut: f64) -> Self {
        FieldVector {
            magnitude_ut,
            polar_angle_rad: 0.0,
            azimuth_rad: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), PhysicsError> {
        if !(self.magnitude_ut >= 0.0) {
            return Err(PhysicsError::InvalidParameter(format!(
                "field magnitude must be >= 0, got {}",
                self.magnitude_ut
            )));
        }
        if !(0.0..=PI).contains(&self.polar_angle_rad) {
            return Err(PhysicsError::InvalidParameter(format!(
                "polar angle must be in [0, pi], got {}",
                self.polar_angle_rad
            )));
        }
        Ok(())
    }
}

/// An ODMR sweep: contrast versus microwave frequency plus acquisition
/// metadata. `photons_per_point = 0` denotes a noiseless spectrum.
#[derive(Debug, Clone, PartialEq)]
pub struct OdmrSpectrum {
    /// Strictly increasing frequency grid, MHz.
    pub frequencies_mhz: Vec<f64>,
    /// Contrast value per frequency, dimensionless.
    pub contrast: Vec<f64>,
    /// Integration time, s.
    pub integration_time_s: f64,
    /// Expected photon count per frequency point (noise scale); 0 = noiseless.
    pub photons_per_point: f64,
}

impl OdmrSpectrum {
    pub fn new(
        frequencies_mhz: Vec<f64>,
        contrast: Vec<f64>,
        integration_time_s: f64,
        photons_per_point: f64,
    ) -> Result<Self, PhysicsError> {
        if frequencies_mhz.len() < 2 {
            return Err(PhysicsError::InvalidParameter(format!(
                "frequency grid needs at least 2 points, got {}",
                frequencies_mhz.len()
            )));
        }
        if frequencies_mhz.len() != contrast.len() {
            return Err(PhysicsError::InvalidParameter(format!(
                "grid/contrast length mismatch: {} vs {}",
                frequencies_mhz.len(),
                contrast.len()
            )));
        }
        if !frequencies_mhz.windows(2).all(|w| w[0] < w[1]) {
            return Err(PhysicsError::InvalidParameter(
                "frequency grid must be strictly increasing".to_string(),
            ));
        }
        if !frequencies_mhz.iter().all(|f| f.is_finite()) || !contrast.iter().all(|c| c.is_finite())
        {
            return Err(PhysicsError::InvalidParameter(
                "frequencies and contrast must be finite".to_string(),
            ));
        }
        if !(integration_time_s > 0.0) {
            return Err(PhysicsError::InvalidParameter(format!(
                "integration time must be > 0, got {integration_time_s}"
            )));
        }
        if !(photons_per_point >= 0.0) {
            return Err(PhysicsError::InvalidParameter(format!(
                "photons per point must be >= 0, got {photons_per_point}"
            )));
        }
        Ok(OdmrSpectrum {
            frequencies_mhz,
            contrast,
            integration_time_s,
            photons_per_point,
        })
    }

    pub fn len(&self) -> usize {
        self.frequencies_mhz.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frequencies_mhz.is_empty()
    }
}

/// `n` equally spaced frequencies covering `[min, max]`, MHz.
pub fn uniform_frequency_grid(min_mhz: f64, max_mhz: f64, n: usize) -> Vec<f64> {
    assert!(n >= 2 && max_mhz > min_mhz, "degenerate frequency grid");
    let step = (max_mhz - min_mhz) / (n - 1) as f64;
    (0..n).map(|i| min_mhz + i as f64 * step).collect()
}

/// Resonance frequencies f± = D ± sqrt(E_s² + (γB)²) of an NV center whose
/// axis is parallel to the field, MHz.
///
/// For a tilted orientation, pass the axial projection `B·|cosθ|` instead of
/// the full magnitude.
pub fn resonance_frequencies(b_ut: f64, params: &NdeModelParams) -> (f64, f64) {
    let zeeman_mhz = params.gamma_khz_per_ut * b_ut * 1e-3;
    let split = (params.e_s_mhz * params.e_s_mhz + zeeman_mhz * zeeman_mhz).sqrt();
    (params.d_mhz - split, params.d_mhz + split)
}

/// Lorentzian resonance profile C / [(f₀ − f)² + δν²].
///
/// Peak value C/δν² at f = f₀; not area-normalized.
pub fn lorentzian(f_mw_mhz: f64, f0_mhz: f64, delta_nu_mhz: f64, c: f64) -> Result<f64, PhysicsError> {
    if !(delta_nu_mhz > 0.0) {
        return Err(PhysicsError::InvalidParameter(format!(
            "linewidth must be > 0, got {delta_nu_mhz}"
        )));
    }
    let df = f0_mhz - f_mw_mhz;
    Ok(c / (df * df + delta_nu_mhz * delta_nu_mhz))
}

/// Light absorption efficiency κ(θ) ∝ (E_x² + E_y²)·π·(1 + cos²θ) of an NV
/// center at polar angle θ under in-plane illumination.
pub fn absorption_efficiency(theta_nv_rad: f64, params: &NdeModelParams) -> f64 {
    let c = theta_nv_rad.cos();
    (params.e_x * params.e_x + params.e_y * params.e_y) * PI * (1.0 + c * c)
}

/// Photon collection efficiency P(θ) of an objective with half-angle θ_max
/// for an NV center at polar angle θ_NV.
///
/// The NV emission pattern is that of two incoherent dipoles perpendicular
/// to the symmetry axis, |e_r × p₁|² + |e_r × p₂|² = 1 + (e_r · e_NV)²;
/// integrating it over the collection cone gives, with c = cos θ_max,
///
/// ```text
/// P = (π/12) [32 − 30c − 2c³ + 6 cos(2θ_NV) · c · sin²θ_max]
/// ```
///
/// Collection is maximal for axes along the optical axis (the pattern peaks
/// along e_NV) and becomes orientation-independent at full hemispherical
/// collection (θ_max = π/2), where P = 8π/3 for every θ_NV.
/// [`collection_efficiency_numeric`] is the quadrature oracle for this
/// expression.
pub fn collection_efficiency(theta_nv_rad: f64, theta_max_rad: f64) -> f64 {
    let c = theta_max_rad.cos();
    let sin2_max = theta_max_rad.sin().powi(2);
    let cos_2nv = (2.0 * theta_nv_rad).cos();
    PI / 12.0 * (32.0 - 30.0 * c - 2.0 * c * c * c + 6.0 * cos_2nv * c * sin2_max)
}

/// Collection efficiency by direct 2-D quadrature of the dipole radiation
/// pattern over the collection cone.
///
/// The two emission dipoles are built from the cross-product definitions
/// p₁ = (e_NV × e_z)/|e_NV × e_z| and p₂ = e_NV × p₁, and
/// Σᵢ |e_r × pᵢ|² is integrated over polar angle (Gauss–Legendre) and
/// azimuth (uniform rule, spectrally exact for this trigonometric
/// integrand). Serves as the independent oracle for
/// [`collection_efficiency`].
pub fn collection_efficiency_numeric(
    theta_nv_rad: f64,
    theta_max_rad: f64,
    nodes: usize,
) -> Result<f64, PhysicsError> {
    const MIN_NODES: usize = 8;
    if nodes < MIN_NODES {
        return Err(PhysicsError::QuadratureResolution {
            nodes,
            min: MIN_NODES,
        });
    }
    let e_nv = [theta_nv_rad.sin(), 0.0, theta_nv_rad.cos()];
    let e_z = [0.0, 0.0, 1.0];
    let mut p1 = cross(e_nv, e_z);
    let n1 = norm(p1);
    if n1 < 1e-12 {
        // Axis along z: any in-plane unit vector works.
        p1 = [0.0, -1.0, 0.0];
    } else {
        p1 = scale(p1, 1.0 / n1);
    }
    let p2 = cross(e_nv, p1);
    let p2 = scale(p2, 1.0 / norm(p2));

    let (thetas, w_theta) = quad::gauss_legendre_ab(nodes, 0.0, theta_max_rad);
    let dphi = 2.0 * PI / nodes as f64;
    let mut total = 0.0;
    for (&t, &wt) in thetas.iter().zip(&w_theta) {
        let (st, ct) = t.sin_cos();
        let mut ring = 0.0;
        for k in 0..nodes {
            let phi = dphi * (k as f64 + 0.5);
            let e_r = [phi.cos() * st, phi.sin() * st, ct];
            ring += norm_sq(cross(e_r, p1)) + norm_sq(cross(e_r, p2));
        }
        total += wt * st * ring * dphi;
    }
    Ok(total)
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn norm_sq(a: [f64; 3]) -> f64 {
    a[0] * a[0] + a[1] * a[1] + a[2] * a[2]
}

fn norm(a: [f64; 3]) -> f64 {
    norm_sq(a).sqrt()
}

fn scale(a: [f64; 3], s: f64) -> [f64; 3] {
    [a[0] * s, a[1] * s, a[2] * s]
}

/// Quadrature grid for the orientation average: per-node |cosθ| and the
/// normalized weights w_i ∝ κ(θ_i) P(θ_i) sinθ_i with Σ w_i = 1.
pub(crate) fn orientation_grid(params: &NdeModelParams, nodes: usize) -> (Vec<f64>, Vec<f64>) {
    let (thetas, w) = quad::gauss_legendre_ab(nodes, 0.0, PI);
    let cos_abs: Vec<f64> = thetas.iter().map(|t| t.cos().abs()).collect();
    let mut weights: Vec<f64> = thetas
        .iter()
        .zip(&w)
        .map(|(&t, &wi)| {
            wi * absorption_efficiency(t, params)
                * collection_efficiency(t, params.theta_max_rad)
                * t.sin()
        })
        .collect();
    let total: f64 = weights.iter().sum();
    for wi in &mut weights {
        *wi /= total;
    }
    (cos_abs, weights)
}

/// Ensemble contrast on `frequencies` for an axial field of magnitude `b_ut`,
/// with no parameter validation. The optimizer in `modelfit` calls this with
/// transient parameter values that may sit outside the validated region.
#[allow(clippy::too_many_arguments)]
pub(crate) fn contrast_model(
    frequencies_mhz: &[f64],
    b_ut: f64,
    d_mhz: f64,
    e_s_mhz: f64,
    gamma_khz_per_ut: f64,
    delta_nu_minus_mhz: f64,
    delta_nu_plus_mhz: f64,
    c_minus: f64,
    c_plus: f64,
    cos_abs: &[f64],
    weights: &[f64],
) -> Vec<f64> {
    let dnm2 = delta_nu_minus_mhz * delta_nu_minus_mhz;
    let dnp2 = delta_nu_plus_mhz * delta_nu_plus_mhz;
    let e2 = e_s_mhz * e_s_mhz;
    let mut out = vec![1.0; frequencies_mhz.len()];
    for (&ct, &w) in cos_abs.iter().zip(weights) {
        let zeeman = gamma_khz_per_ut * b_ut * ct * 1e-3;
        let split = (e2 + zeeman * zeeman).sqrt();
        let f_minus = d_mhz - split;
        let f_plus = d_mhz + split;
        for (s, &f) in out.iter_mut().zip(frequencies_mhz) {
            let dm = f_minus - f;
            let dp = f_plus - f;
            *s -= w * (c_minus / (dm * dm + dnm2) + c_plus / (dp * dp + dnp2));
        }
    }
    out
}

/// Synthesize the noiseless ensemble ODMR spectrum for an axial field with
/// the default orientation quadrature ([`DEFAULT_QUAD_NODES`] nodes).
///
/// Only axial geometry is modeled; a tilted field couples the azimuthal and
/// polar integrals and is rejected with an unsupported-geometry error.
pub fn synthesize_spectrum(
    field: &FieldVector,
    params: &NdeModelParams,
    frequencies_mhz: &[f64],
) -> Result<OdmrSpectrum, PhysicsError> {
    synthesize_spectrum_with_nodes(field, params, frequencies_mhz, DEFAULT_QUAD_NODES)
}

/// [`synthesize_spectrum`] with an explicit orientation quadrature order.
pub fn synthesize_spectrum_with_nodes(
    field: &FieldVector,
    params: &NdeModelParams,
    frequencies_mhz: &[f64],
    nodes: usize,
) -> Result<OdmrSpectrum, PhysicsError> {
    field.validate()?;
    params.validate()?;
    if field.polar_angle_rad != 0.0 {
        return Err(PhysicsError::UnsupportedGeometry(format!(
            "only axial fields are modeled; got polar angle {} rad",
            field.polar_angle_rad
        )));
    }
    const MIN_NODES: usize = 8;
    if nodes < MIN_NODES {
        return Err(PhysicsError::QuadratureResolution {
            nodes,
            min: MIN_NODES,
        });
    }
    let (cos_abs, weights) = orientation_grid(params, nodes);
    let contrast = contrast_model(
        frequencies_mhz,
        field.magnitude_ut,
        params.d_mhz,
        params.e_s_mhz,
        params.gamma_khz_per_ut,
        params.delta_nu_minus_mhz,
        params.delta_nu_plus_mhz,
        params.c_minus,
        params.c_plus,
        &cos_abs,
        &weights,
    );
    OdmrSpectrum::new(frequencies_mhz.to_vec(), contrast, 1.0, 0.0)
}

/// Perturb each contrast value with Gaussian shot noise of standard
/// deviation `contrast / sqrt(photons_per_point)`; deterministic per seed.
///
/// The Gaussian is the large-count approximation of Poisson photon counting
/// and is accurate above ~10³ photons per point.
pub fn add_shot_noise(
    spectrum: &OdmrSpectrum,
    photons_per_point: f64,
    seed: u64,
) -> Result<OdmrSpectrum, PhysicsError> {
    if !(photons_per_point > 0.0) {
        return Err(PhysicsError::InvalidParameter(format!(
            "photons per point must be > 0, got {photons_per_point}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let scale = photons_per_point.sqrt().recip();
    let contrast = spectrum
        .contrast
        .iter()
        .map(|&c| c + c * scale * normal.sample(&mut rng))
        .collect();
    Ok(OdmrSpectrum {
        frequencies_mhz: spectrum.frequencies_mhz.clone(),
        contrast,
        integration_time_s: spectrum.integration_time_s,
        photons_per_point,
    })
}

/// Translate the frequency grid by `shift_mhz`, leaving contrast unchanged.
///
/// Models a substrate- or antenna-induced spectral shift.
pub fn apply_frequency_shift(spectrum: &OdmrSpectrum, shift_mhz: f64) -> OdmrSpectrum {
    OdmrSpectrum {
        frequencies_mhz: spectrum.frequencies_mhz.iter().map(|f| f + shift_mhz).collect(),
        contrast: spectrum.contrast.clone(),
        integration_time_s: spectrum.integration_time_s,
        photons_per_point: spectrum.photons_per_point,
    }
}
