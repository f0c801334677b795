//! Downstream analyses: field maps, wire-current fitting, accuracy and
//! sensitivity extraction, error histograms, and frequency-shift scans.

use thiserror::Error;

use crate::gpr::{preprocess, GprError, GprModel};
use crate::optim::{least_squares, GnOptions};
use crate::physics::OdmrSpectrum;

/// μ0/(2π) in µT·µm/A: the field of an infinite straight wire is
/// `MU0_OVER_2PI * I / r` µT for I in A and r in µm.
pub const MU0_OVER_2PI_UT_UM_PER_A: f64 = 2.0e5;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error(transparent)]
    Gpr(#[from] GprError),
    #[error("unidentifiable parameters: {0}")]
    Unidentifiable(String),
    #[error("wire fit did not converge from any initialization")]
    WireFitFailed,
}

/// A 2-D grid of predicted field magnitudes with per-pixel uncertainty,
/// row-major with index `iy * nx + ix`.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldMap {
    pub nx: usize,
    pub ny: usize,
    /// Area of one pixel, µm².
    pub pixel_area_um2: f64,
    /// Predicted |B| per pixel, µT.
    pub mean_ut: Vec<f64>,
    /// Predictive standard deviation per pixel, µT.
    pub stddev_ut: Vec<f64>,
}

impl FieldMap {
    /// Lateral x coordinate of a pixel column, µm, centered on the grid.
    pub fn x_um(&self, ix: usize) -> f64 {
        let pitch = self.pixel_area_um2.sqrt();
        (ix as f64 - (self.nx as f64 - 1.0) / 2.0) * pitch
    }
}

/// Predict a [`FieldMap`] from one spectrum per pixel (row-major,
/// `nx * ny` spectra sharing the model's frequency grid).
pub fn predict_map(
    model: &GprModel,
    spectra: &[OdmrSpectrum],
    nx: usize,
    ny: usize,
    pixel_area_um2: f64,
) -> Result<FieldMap, PipelineError> {
    if nx == 0 || ny == 0 {
        return Err(PipelineError::InvalidInput("map dimensions must be >= 1".to_string()));
    }
    if spectra.len() != nx * ny {
        return Err(PipelineError::DimensionMismatch(format!(
            "{} spectra for a {nx}x{ny} map",
            spectra.len()
        )));
    }
    if !(pixel_area_um2 > 0.0) {
        return Err(PipelineError::InvalidInput(format!(
            "pixel area must be > 0, got {pixel_area_um2}"
        )));
    }
    let mut mean = Vec::with_capacity(spectra.len());
    let mut stddev = Vec::with_capacity(spectra.len());
    for s in spectra {
        let p = model.predict(&preprocess(s)?)?;
        mean.push(p.mean_ut);
        stddev.push(p.stddev_ut);
    }
    Ok(FieldMap {
        nx,
        ny,
        pixel_area_um2,
        mean_ut: mean,
        stddev_ut: stddev,
    })
}

/// An infinite straight wire along y at lateral position `x0_um`, a depth
/// `z0_um` below the sensing plane, carrying `current_a`, plus a uniform
/// bias field along z.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WireModel {
    pub current_a: f64,
    pub x0_um: f64,
    pub z0_um: f64,
    pub bias_bz_ut: f64,
}

impl WireModel {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if !(self.z0_um > 0.0) {
            return Err(PipelineError::InvalidInput(format!(
                "wire depth must be > 0, got {}",
                self.z0_um
            )));
        }
        Ok(())
    }
}

/// |B| at lateral position `x` on the sensing plane, µT.
///
/// The wire field has magnitude μ0I/(2πr) at distance r = sqrt(Δx² + z0²),
/// with z component −μ0IΔx/(2πr²) and in-plane component μ0Iz0/(2πr²);
/// positive current therefore opposes the bias on the +x side of the wire.
pub fn wire_field_magnitude(x_um: f64, wire: &WireModel) -> f64 {
    let dx = x_um - wire.x0_um;
    let r2 = dx * dx + wire.z0_um * wire.z0_um;
    let k = MU0_OVER_2PI_UT_UM_PER_A * wire.current_a;
    let bz = wire.bias_bz_ut - k * dx / r2;
    let bx = k * wire.z0_um / r2;
    (bz * bz + bx * bx).sqrt()
}

/// A fitted wire geometry with parameter standard errors.
#[derive(Debug, Clone)]
pub struct WireFit {
    pub model: WireModel,
    pub x0_stderr_um: f64,
    pub z0_stderr_um: f64,
    /// Euclidean norm of the weighted residual vector.
    pub residual_norm: f64,
    pub iterations: usize,
}

/// Weighted least-squares fit of the wire position (x0, z0) to a lateral
/// field profile of `(x, |B|, σ)` points, with the current and bias known.
///
/// Only the geometry is free; depth positivity is enforced by fitting
/// ln z0. Zero current makes the geometry unidentifiable and is rejected,
/// as is a profile without lateral extent.
pub fn fit_wire(
    profile: &[(f64, f64, f64)],
    current_a: f64,
    bias_bz_ut: f64,
) -> Result<WireFit, PipelineError> {
    if profile.len() < 3 {
        return Err(PipelineError::InvalidInput(format!(
            "need at least 3 profile points, got {}",
            profile.len()
        )));
    }
    if current_a == 0.0 {
        return Err(PipelineError::Unidentifiable(
            "zero current: any wire position fits the profile".to_string(),
        ));
    }
    let x_min = profile.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let x_max = profile.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    let span = x_max - x_min;
    if !(span > 0.0) {
        return Err(PipelineError::InvalidInput(
            "profile has no lateral extent (all x equal)".to_string(),
        ));
    }
    if profile.iter().any(|p| !(p.2 > 0.0) || !p.1.is_finite()) {
        return Err(PipelineError::InvalidInput(
            "profile uncertainties must be positive and fields finite".to_string(),
        ));
    }

    // Initial lateral guess: where the profile deviates most from the bias.
    let x0_init = profile
        .iter()
        .max_by(|a, b| (a.1 - bias_bz_ut).abs().total_cmp(&(b.1 - bias_bz_ut).abs()))
        .map(|p| p.0)
        .unwrap();

    let data = profile.to_vec();
    let mut best: Option<WireFit> = None;
    for z0_init in [span / 16.0, span / 8.0, span / 4.0, span / 2.0, span] {
        let residuals = |z: &[f64]| -> Vec<f64> {
            let wire = WireModel {
                current_a,
                x0_um: z[0],
                z0_um: z[1].exp(),
                bias_bz_ut,
            };
            data.iter()
                .map(|&(x, b, sigma)| (wire_field_magnitude(x, &wire) - b) / sigma)
                .collect()
        };
        let gn = least_squares(residuals, &[x0_init, z0_init.ln()], &GnOptions::default());
        if !gn.converged {
            continue;
        }
        let Some(cov) = gn.covariance else { continue };
        let z0 = gn.x[1].exp();
        let fit = WireFit {
            model: WireModel {
                current_a,
                x0_um: gn.x[0],
                z0_um: z0,
                bias_bz_ut,
            },
            x0_stderr_um: cov[(0, 0)].max(0.0).sqrt(),
            z0_stderr_um: cov[(1, 1)].max(0.0).sqrt() * z0,
            residual_norm: gn.ssr.sqrt(),
            iterations: gn.iterations,
        };
        let better = match &best {
            None => true,
            Some(b) => fit.residual_norm < b.residual_norm,
        };
        if better {
            best = Some(fit);
        }
    }
    best.ok_or(PipelineError::WireFitFailed)
}

/// Column-wise profile of a map: per x position, the mean over rows and the
/// standard error of that mean (Bessel-corrected std / sqrt(ny); zero for a
/// single row).
pub fn average_along_y(map: &FieldMap) -> Vec<(f64, f64, f64)> {
    let mut out = Vec::with_capacity(map.nx);
    for ix in 0..map.nx {
        let column: Vec<f64> = (0..map.ny).map(|iy| map.mean_ut[iy * map.nx + ix]).collect();
        let n = column.len() as f64;
        let mean = column.iter().sum::<f64>() / n;
        let stderr = if column.len() > 1 {
            let var = column.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
            (var / n).sqrt()
        } else {
            0.0
        };
        out.push((map.x_um(ix), mean, stderr));
    }
    out
}

/// Fit σ(t) = η t^(−1/2) + ζ by linear least squares in (η, ζ), clamping
/// negative coefficients to zero and refitting the other.
///
/// Returns (η, ζ): η is the shot-noise sensitivity coefficient
/// (µT·s^0.5, i.e. µT/√Hz) and ζ the asymptotic accuracy (µT).
pub fn fit_accuracy_sensitivity(samples: &[(f64, f64)]) -> Result<(f64, f64), PipelineError> {
    if samples.len() < 3 {
        return Err(PipelineError::InvalidInput(format!(
            "need at least 3 samples, got {}",
            samples.len()
        )));
    }
    if samples.iter().any(|&(t, s)| !(t > 0.0) || !s.is_finite()) {
        return Err(PipelineError::InvalidInput(
            "integration times must be > 0 and sigmas finite".to_string(),
        ));
    }
    let mut times: Vec<f64> = samples.iter().map(|s| s.0).collect();
    times.sort_by(f64::total_cmp);
    times.dedup();
    if times.len() < 2 {
        return Err(PipelineError::InvalidInput(
            "need at least 2 distinct integration times".to_string(),
        ));
    }

    let n = samples.len() as f64;
    let (mut saa, mut sa, mut say, mut sy) = (0.0, 0.0, 0.0, 0.0);
    for &(t, sigma) in samples {
        let a = t.powf(-0.5);
        saa += a * a;
        sa += a;
        say += a * sigma;
        sy += sigma;
    }
    let det = saa * n - sa * sa;
    let eta = (say * n - sa * sy) / det;
    let zeta = (saa * sy - sa * say) / det;
    if eta >= 0.0 && zeta >= 0.0 {
        return Ok((eta, zeta));
    }

    // Clamp the negative coefficient and refit the other; pick the feasible
    // candidate with lower squared error.
    let sse = |eta: f64, zeta: f64| -> f64 {
        samples
            .iter()
            .map(|&(t, s)| {
                let r = eta * t.powf(-0.5) + zeta - s;
                r * r
            })
            .sum()
    };
    let zeta_only = (sy / n).max(0.0);
    let eta_only = (say / saa).max(0.0);
    let candidates = [(0.0, zeta_only), (eta_only, 0.0)];
    let best = candidates
        .iter()
        .min_by(|a, b| sse(a.0, a.1).total_cmp(&sse(b.0, b.1)))
        .unwrap();
    Ok(*best)
}

/// Per-field-bin σ(t) samples with the fitted sensitivity η and accuracy ζ.
#[derive(Debug, Clone)]
pub struct AccuracyReport {
    /// Field bin (low, high), µT.
    pub field_bin_ut: (f64, f64),
    /// (integration time s, σ µT) samples.
    pub sigma_samples: Vec<(f64, f64)>,
    /// Sensitivity, µT·s^0.5 (µT/√Hz).
    pub eta: f64,
    /// Accuracy (asymptotic σ), µT.
    pub zeta: f64,
}

impl AccuracyReport {
    pub fn from_samples(
        field_bin_ut: (f64, f64),
        sigma_samples: Vec<(f64, f64)>,
    ) -> Result<Self, PipelineError> {
        let (eta, zeta) = fit_accuracy_sensitivity(&sigma_samples)?;
        Ok(AccuracyReport {
            field_bin_ut,
            sigma_samples,
            eta,
            zeta,
        })
    }
}

/// Histogram of error magnitudes for the pixels falling in one field bin.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorHistogram {
    /// Field bin (low, high), µT.
    pub field_bin_ut: (f64, f64),
    /// Error bin edges (len = counts.len() + 1), µT.
    pub edges_ut: Vec<f64>,
    pub counts: Vec<usize>,
    pub n: usize,
    pub mean_error_ut: f64,
    pub std_error_ut: f64,
}

/// Group `(true field, |error|)` samples into field bins of `field_bin_width`
/// starting at 0 and histogram the error magnitudes within each bin with
/// `error_bin_width` spacing. Empty field bins are omitted.
pub fn error_histograms(
    samples: &[(f64, f64)],
    field_bin_width_ut: f64,
    error_bin_width_ut: f64,
) -> Result<Vec<ErrorHistogram>, PipelineError> {
    if samples.is_empty() {
        return Err(PipelineError::InvalidInput("no error samples".to_string()));
    }
    if !(field_bin_width_ut > 0.0) || !(error_bin_width_ut > 0.0) {
        return Err(PipelineError::InvalidInput("bin widths must be > 0".to_string()));
    }
    if samples.iter().any(|&(b, e)| !(b >= 0.0) || !(e >= 0.0)) {
        return Err(PipelineError::InvalidInput(
            "fields and error magnitudes must be >= 0".to_string(),
        ));
    }
    let max_field = samples.iter().map(|s| s.0).fold(0.0, f64::max);
    let n_bins = (max_field / field_bin_width_ut).floor() as usize + 1;
    let mut out = Vec::new();
    for bin in 0..n_bins {
        let lo = bin as f64 * field_bin_width_ut;
        let hi = lo + field_bin_width_ut;
        let errs: Vec<f64> = samples
            .iter()
            .filter(|&&(b, _)| b >= lo && b < hi)
            .map(|&(_, e)| e)
            .collect();
        if errs.is_empty() {
            continue;
        }
        let max_err = errs.iter().cloned().fold(0.0, f64::max);
        let n_err_bins = ((max_err / error_bin_width_ut).floor() as usize + 1).max(1);
        let mut counts = vec![0usize; n_err_bins];
        for &e in &errs {
            let idx = ((e / error_bin_width_ut).floor() as usize).min(n_err_bins - 1);
            counts[idx] += 1;
        }
        let edges = (0..=n_err_bins).map(|i| i as f64 * error_bin_width_ut).collect();
        let n = errs.len();
        let mean = errs.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (errs.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / (n as f64 - 1.0)).sqrt()
        } else {
            0.0
        };
        out.push(ErrorHistogram {
            field_bin_ut: (lo, hi),
            edges_ut: edges,
            counts,
            n,
            mean_error_ut: mean,
            std_error_ut: std,
        });
    }
    Ok(out)
}

/// Prediction-error curve over candidate frequency corrections.
#[derive(Debug, Clone)]
pub struct ShiftScan {
    /// (shift MHz, mean |prediction − truth| µT) per candidate shift.
    pub curve: Vec<(f64, f64)>,
    /// Shift minimizing the mean error (ties break toward the smaller shift).
    pub best_shift_mhz: f64,
}

/// Contrast of `spectrum` resampled at `f + shift` by linear interpolation,
/// clamped at the grid ends.
fn resample_shifted(spectrum: &OdmrSpectrum, shift_mhz: f64) -> Vec<f64> {
    let f = &spectrum.frequencies_mhz;
    let c = &spectrum.contrast;
    let n = f.len();
    f.iter()
        .map(|&fi| {
            let target = fi + shift_mhz;
            if target <= f[0] {
                return c[0];
            }
            if target >= f[n - 1] {
                return c[n - 1];
            }
            let j = f.partition_point(|&x| x <= target).min(n - 1);
            let (f0, f1) = (f[j - 1], f[j]);
            let w = (target - f0) / (f1 - f0);
            c[j - 1] * (1.0 - w) + c[j] * w
        })
        .collect()
}

/// Scan candidate frequency corrections for a test set measured under a
/// different spectral shift than the training data.
///
/// For each shift s, every test spectrum's contrast is resampled at f + s,
/// preprocessed, and predicted; the curve records the mean absolute
/// prediction error. A test set whose spectra are displaced by +Δ MHz
/// relative to the training substrate is corrected at s = +Δ.
pub fn shift_scan(
    model: &GprModel,
    test: &[(OdmrSpectrum, f64)],
    shifts_mhz: &[f64],
) -> Result<ShiftScan, PipelineError> {
    if test.is_empty() || shifts_mhz.is_empty() {
        return Err(PipelineError::InvalidInput(
            "need a non-empty test set and shift list".to_string(),
        ));
    }
    let mut curve = Vec::with_capacity(shifts_mhz.len());
    for &s in shifts_mhz {
        let mut total = 0.0;
        for (spectrum, truth) in test {
            let resampled = OdmrSpectrum {
                frequencies_mhz: spectrum.frequencies_mhz.clone(),
                contrast: resample_shifted(spectrum, s),
                integration_time_s: spectrum.integration_time_s,
                photons_per_point: spectrum.photons_per_point,
            };
            let pred = model.predict(&preprocess(&resampled)?)?;
            total += (pred.mean_ut - truth).abs();
        }
        curve.push((s, total / test.len() as f64));
    }
    let best = curve
        .iter()
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.total_cmp(&b.0)))
        .unwrap()
        .0;
    Ok(ShiftScan {
        curve,
        best_shift_mhz: best,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gpr::{train, FeatureVector, KernelHyperparams};
    use crate::physics::{synthesize_spectrum, uniform_frequency_grid, FieldVector, NdeModelParams};
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    fn grid() -> Vec<f64> {
        uniform_frequency_grid(2720.0, 2990.0, 141)
    }

    fn synth(b: f64) -> OdmrSpectrum {
        synthesize_spectrum(&FieldVector::axial(b), &NdeModelParams::default(), &grid()).unwrap()
    }

    fn toy_model(fields: &[f64]) -> GprModel {
        let features: Vec<FeatureVector> =
            fields.iter().map(|&b| preprocess(&synth(b)).unwrap()).collect();
        train(features, fields.to_vec(), KernelHyperparams::new(50.0, 0.0).unwrap()).unwrap()
    }

    #[test]
    fn single_pixel_map_equals_direct_prediction() {
        let fields: Vec<f64> = (0..10).map(|i| 200.0 + 200.0 * i as f64).collect();
        let model = toy_model(&fields);
        let s = synth(1100.0);
        let map = predict_map(&model, std::slice::from_ref(&s), 1, 1, 18.0).unwrap();
        let direct = model.predict(&preprocess(&s).unwrap()).unwrap();
        assert_eq!(map.mean_ut[0], direct.mean_ut);
        assert_eq!(map.stddev_ut[0], direct.stddev_ut);
    }

    #[test]
    fn map_dimensions_are_validated() {
        let fields: Vec<f64> = (0..6).map(|i| 300.0 + 300.0 * i as f64).collect();
        let model = toy_model(&fields);
        let spectra = vec![synth(500.0); 5];
        assert!(matches!(
            predict_map(&model, &spectra, 2, 3, 18.0),
            Err(PipelineError::DimensionMismatch(_))
        ));
    }

    #[test]
    fn wire_field_with_zero_current_is_the_bias() {
        let wire = WireModel {
            current_a: 0.0,
            x0_um: 3.0,
            z0_um: 130.0,
            bias_bz_ut: 912.8,
        };
        for x in [-50.0, 0.0, 80.0] {
            assert_eq!(wire_field_magnitude(x, &wire), 912.8);
        }
    }

    #[test]
    fn wire_field_at_apex_matches_hand_calculation() {
        // μ0 I / (2π z0) = 2e-7 × 0.8 / 1.3e-4 T = 1230.77 µT at the apex;
        // combined with the bias in quadrature.
        let wire = WireModel {
            current_a: 0.8,
            x0_um: 0.0,
            z0_um: 130.0,
            bias_bz_ut: 912.8,
        };
        let apex = MU0_OVER_2PI_UT_UM_PER_A * 0.8 / 130.0;
        assert_relative_eq!(apex, 1230.769230769, max_relative = 1e-9);
        let expected = (912.8f64 * 912.8 + apex * apex).sqrt();
        assert_relative_eq!(wire_field_magnitude(0.0, &wire), expected, max_relative = 1e-12);
        assert!((wire_field_magnitude(0.0, &wire) - 1532.4).abs() < 0.1);
    }

    #[test]
    fn wire_field_cancels_bias_on_positive_side() {
        let wire = WireModel {
            current_a: 0.8,
            x0_um: 0.0,
            z0_um: 130.0,
            bias_bz_ut: 912.8,
        };
        let plus = wire_field_magnitude(130.0, &wire);
        let minus = wire_field_magnitude(-130.0, &wire);
        assert!(plus < minus, "positive current must oppose the bias for x > x0");
    }

    #[test]
    fn wire_field_decays_to_bias() {
        let wire = WireModel {
            current_a: 0.4,
            x0_um: 10.0,
            z0_um: 130.0,
            bias_bz_ut: 2000.0,
        };
        let far = wire_field_magnitude(10.0 + 100.0 * 130.0, &wire);
        assert!((far - 2000.0).abs() / 2000.0 < 0.01);
    }

    fn wire_profile(wire: &WireModel, n: usize, span: f64) -> Vec<(f64, f64, f64)> {
        (0..n)
            .map(|i| {
                let x = -span / 2.0 + span * i as f64 / (n - 1) as f64;
                (x, wire_field_magnitude(x, wire), 1.0)
            })
            .collect()
    }

    #[test]
    fn wire_fit_recovers_geometry() {
        let truth = WireModel {
            current_a: 0.8,
            x0_um: 0.0,
            z0_um: 130.0,
            bias_bz_ut: 912.8,
        };
        let profile = wire_profile(&truth, 22, 90.0);
        let fit = fit_wire(&profile, truth.current_a, truth.bias_bz_ut).unwrap();
        assert!((fit.model.x0_um - truth.x0_um).abs() < 1.0, "x0 = {}", fit.model.x0_um);
        assert!((fit.model.z0_um - truth.z0_um).abs() < 1.0, "z0 = {}", fit.model.z0_um);
    }

    #[test]
    fn wire_fit_is_translation_invariant() {
        let truth = WireModel {
            current_a: 0.4,
            x0_um: 5.0,
            z0_um: 80.0,
            bias_bz_ut: 900.0,
        };
        let profile = wire_profile(&truth, 20, 120.0);
        let shifted: Vec<(f64, f64, f64)> =
            profile.iter().map(|&(x, b, s)| (x + 40.0, b, s)).collect();
        let a = fit_wire(&profile, truth.current_a, truth.bias_bz_ut).unwrap();
        let b = fit_wire(&shifted, truth.current_a, truth.bias_bz_ut).unwrap();
        assert_abs_diff_eq!(a.model.x0_um + 40.0, b.model.x0_um, epsilon = 1e-4);
        assert_abs_diff_eq!(a.model.z0_um, b.model.z0_um, epsilon = 1e-4);
        assert_abs_diff_eq!(a.residual_norm, b.residual_norm, epsilon = 1e-6);
    }

    #[test]
    fn wire_fit_rejects_degenerate_inputs() {
        let wire = WireModel {
            current_a: 0.2,
            x0_um: 0.0,
            z0_um: 50.0,
            bias_bz_ut: 500.0,
        };
        let profile = wire_profile(&wire, 10, 80.0);
        assert!(matches!(
            fit_wire(&profile, 0.0, 500.0),
            Err(PipelineError::Unidentifiable(_))
        ));
        let collapsed: Vec<(f64, f64, f64)> =
            profile.iter().map(|&(_, b, s)| (1.0, b, s)).collect();
        assert!(fit_wire(&collapsed, 0.2, 500.0).is_err());
        assert!(fit_wire(&profile[..2], 0.2, 500.0).is_err());
    }

    #[test]
    fn average_along_y_basics() {
        // Single row: identity with zero stderr.
        let map = FieldMap {
            nx: 3,
            ny: 1,
            pixel_area_um2: 4.0,
            mean_ut: vec![10.0, 20.0, 30.0],
            stddev_ut: vec![0.0; 3],
        };
        let prof = average_along_y(&map);
        assert_eq!(prof.len(), 3);
        assert_eq!(prof[0], (-2.0, 10.0, 0.0));
        assert_eq!(prof[2], (2.0, 30.0, 0.0));

        // Constant map: constant means, zero stderr.
        let map = FieldMap {
            nx: 2,
            ny: 4,
            pixel_area_um2: 1.0,
            mean_ut: vec![7.0; 8],
            stddev_ut: vec![0.0; 8],
        };
        for (_, mean, se) in average_along_y(&map) {
            assert_eq!(mean, 7.0);
            assert_eq!(se, 0.0);
        }
    }

    #[test]
    fn average_along_y_checkerboard_matches_hand_statistics() {
        // ±1 around 1000 over ny rows: mean 1000, SEM = 1/sqrt(ny − 1).
        let (nx, ny) = (4, 6);
        let mut mean = vec![0.0; nx * ny];
        for iy in 0..ny {
            for ix in 0..nx {
                mean[iy * nx + ix] = 1000.0 + if (ix + iy) % 2 == 0 { 1.0 } else { -1.0 };
            }
        }
        let map = FieldMap {
            nx,
            ny,
            pixel_area_um2: 1.0,
            mean_ut: mean,
            stddev_ut: vec![0.0; nx * ny],
        };
        for (_, m, se) in average_along_y(&map) {
            assert_relative_eq!(m, 1000.0, max_relative = 1e-12);
            assert_relative_eq!(se, 1.0 / ((ny as f64) - 1.0).sqrt(), max_relative = 1e-12);
        }
    }

    #[test]
    fn average_along_y_commutes_with_constant_offset() {
        let map = FieldMap {
            nx: 3,
            ny: 3,
            pixel_area_um2: 2.0,
            mean_ut: (0..9).map(|i| 100.0 + i as f64 * 3.0).collect(),
            stddev_ut: vec![0.0; 9],
        };
        let shifted = FieldMap {
            mean_ut: map.mean_ut.iter().map(|v| v + 50.0).collect(),
            ..map.clone()
        };
        for ((x1, m1, s1), (x2, m2, s2)) in
            average_along_y(&map).into_iter().zip(average_along_y(&shifted))
        {
            assert_eq!(x1, x2);
            assert_relative_eq!(m1 + 50.0, m2, max_relative = 1e-12);
            assert_abs_diff_eq!(s1, s2, epsilon = 1e-12);
        }
    }

    #[test]
    fn accuracy_fit_is_exact_on_its_own_model() {
        let samples: Vec<(f64, f64)> = [0.1f64, 0.2, 0.5, 1.0, 2.0, 5.0, 10.0]
            .iter()
            .map(|&t| (t, 70.0 * t.powf(-0.5) + 1.8))
            .collect();
        let (eta, zeta) = fit_accuracy_sensitivity(&samples).unwrap();
        assert_relative_eq!(eta, 70.0, max_relative = 1e-8);
        assert_relative_eq!(zeta, 1.8, max_relative = 1e-8);
    }

    #[test]
    fn accuracy_fit_constant_sigma_gives_zero_eta() {
        let samples = vec![(1.0, 4.2), (2.0, 4.2), (4.0, 4.2)];
        let (eta, zeta) = fit_accuracy_sensitivity(&samples).unwrap();
        assert_abs_diff_eq!(eta, 0.0, epsilon = 1e-10);
        assert_relative_eq!(zeta, 4.2, max_relative = 1e-10);
    }

    #[test]
    fn accuracy_fit_clamps_negative_coefficients() {
        // σ increasing with t drives the unconstrained η negative.
        let samples = vec![(1.0, 1.0), (4.0, 2.0), (9.0, 3.0), (16.0, 4.0)];
        let (eta, zeta) = fit_accuracy_sensitivity(&samples).unwrap();
        assert!(eta >= 0.0 && zeta >= 0.0);
    }

    #[test]
    fn accuracy_fit_rejects_degenerate_input() {
        assert!(fit_accuracy_sensitivity(&[(1.0, 2.0), (2.0, 1.0)]).is_err());
        assert!(fit_accuracy_sensitivity(&[(1.0, 2.0), (1.0, 2.1), (1.0, 1.9)]).is_err());
        assert!(fit_accuracy_sensitivity(&[(0.0, 2.0), (1.0, 2.0), (2.0, 2.0)]).is_err());
    }

    #[test]
    fn histograms_bin_by_field_and_error() {
        let samples = vec![
            (100.0, 3.0),
            (450.0, 9.0),
            (700.0, 1.0),
            (1200.0, 2.0),
            (1300.0, 2.5),
            (2200.0, 15.0),
        ];
        let hists = error_histograms(&samples, 500.0, 1.0).unwrap();
        let bins: Vec<(f64, f64)> = hists.iter().map(|h| h.field_bin_ut).collect();
        assert_eq!(
            bins,
            vec![(0.0, 500.0), (500.0, 1000.0), (1000.0, 1500.0), (2000.0, 2500.0)]
        );
        assert_eq!(hists[0].n, 2);
        assert_eq!(hists[2].n, 2);
        // Single value in the last bin: one occupied bar.
        assert_eq!(hists[3].counts.iter().sum::<usize>(), 1);
        assert_relative_eq!(hists[2].mean_error_ut, 2.25, max_relative = 1e-12);
    }

    #[test]
    fn histogram_ordering_reflects_estimator_quality() {
        // Construct one estimator better everywhere except the lowest bin.
        let fields = [250.0, 750.0, 1250.0, 1750.0, 2250.0];
        let mut gpr = Vec::new();
        let mut model = Vec::new();
        for (i, &b) in fields.iter().enumerate() {
            for k in 0..10 {
                let jitter = 0.1 * k as f64;
                if i == 0 {
                    gpr.push((b, 20.0 + jitter));
                    model.push((b, 5.0 + jitter));
                } else {
                    gpr.push((b, 2.0 + jitter));
                    model.push((b, 8.0 + jitter));
                }
            }
        }
        let hg = error_histograms(&gpr, 500.0, 1.0).unwrap();
        let hm = error_histograms(&model, 500.0, 1.0).unwrap();
        assert!(hg[0].mean_error_ut > hm[0].mean_error_ut);
        for i in 1..5 {
            assert!(hg[i].mean_error_ut < hm[i].mean_error_ut);
        }
    }

    #[test]
    fn shift_scan_identifies_zero_shift_for_matched_data() {
        let fields: Vec<f64> = (0..20).map(|i| 200.0 + 100.0 * i as f64).collect();
        let model = toy_model(&fields);
        let test: Vec<(OdmrSpectrum, f64)> =
            [450.0, 950.0, 1450.0].iter().map(|&b| (synth(b), b)).collect();
        let shifts: Vec<f64> = (-5..=5).map(|s| s as f64).collect();
        let scan = shift_scan(&model, &test, &shifts).unwrap();
        assert_eq!(scan.best_shift_mhz, 0.0);
    }
}
