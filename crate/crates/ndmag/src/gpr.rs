//! Model-free field estimation by Gaussian-process regression.
//!
//! Spectra are reduced to feature vectors (min–max normalized contrast,
//! then a central-difference first derivative with respect to frequency) and
//! regressed against the true field magnitude with the squared exponential
//! kernel k(x, x′) = exp(−θ‖x − x′‖²). Training solves
//! (K + β⁻¹I) w = y through a jittered Cholesky factorization; prediction
//! returns the posterior mean k(x′)ᵀw and the standard deviation of
//! k(x′,x′) + β⁻¹ − k(x′)ᵀ(K + β⁻¹I)⁻¹k(x′). Hyperparameters are picked by
//! minimizing five-fold cross-validation loss over a grid.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::physics::OdmrSpectrum;

/// Relative tolerance on the training-system residual
/// ‖(K + β⁻¹I)w − y‖∞ / ‖y‖∞.
pub const RESIDUAL_TOLERANCE: f64 = 1e-8;

/// Base diagonal jitter, as a fraction of trace(K)/n.
const JITTER_BASE: f64 = 1e-10;
/// Largest jitter tried before giving up, as a fraction of trace(K)/n.
const JITTER_MAX: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum GprError {
    #[error("empty training set")]
    EmptyTrainingSet,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("kernel system is ill-conditioned (residual {residual:.3e} after jitter {jitter:.3e})")]
    IllConditionedKernel { residual: f64, jitter: f64 },
    #[error("insufficient data: {n} points for {folds} folds")]
    InsufficientData { n: usize, folds: usize },
    #[error("preprocessing requires a uniform grid with at least 3 points")]
    BadGrid,
}

/// A preprocessed spectrum: first derivative of the unit-range-normalized
/// contrast, 1/MHz. Length is the grid length minus two (central stencil).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub values: Vec<f64>,
}

impl FeatureVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Squared-distance between two feature vectors; panics on length mismatch
/// (callers validate at API boundaries).
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Map a spectrum to its feature vector.
///
/// The contrast is normalized affinely so min → 0 and max → 1 (a constant
/// spectrum maps to all zeros), then differentiated with the central stencil
/// (c[i+1] − c[i−1]) / (2Δf), dropping both endpoints. Affine changes of the
/// raw contrast (gain and offset) therefore leave the features unchanged.
pub fn preprocess(spectrum: &OdmrSpectrum) -> Result<FeatureVector, GprError> {
    let f = &spectrum.frequencies_mhz;
    let n = f.len();
    if n < 3 {
        return Err(GprError::BadGrid);
    }
    let step = f[1] - f[0];
    for w in f.windows(2) {
        if ((w[1] - w[0]) - step).abs() > 1e-9 * step.abs() {
            return Err(GprError::BadGrid);
        }
    }
    let lo = spectrum.contrast.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = spectrum.contrast.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let normalized: Vec<f64> = if span > 0.0 {
        spectrum.contrast.iter().map(|c| (c - lo) / span).collect()
    } else {
        vec![0.0; n]
    };
    let values = (1..n - 1)
        .map(|i| (normalized[i + 1] - normalized[i - 1]) / (2.0 * step))
        .collect();
    Ok(FeatureVector { values })
}

/// Squared exponential kernel k(x, x′) = exp(−θ‖x − x′‖²).
///
/// Always in (0, 1]; the exponential may underflow to +0 for very distant
/// inputs.
pub fn kernel(a: &FeatureVector, b: &FeatureVector, theta: f64) -> Result<f64, GprError> {
    if a.len() != b.len() {
        return Err(GprError::DimensionMismatch(format!(
            "feature lengths {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if !(theta > 0.0) {
        return Err(GprError::InvalidParameter(format!(
            "kernel scale theta must be > 0, got {theta}"
        )));
    }
    Ok((-theta * sq_dist(&a.values, &b.values)).exp())
}

/// Kernel hyperparameters: inverse-squared-length-scale θ and output noise
/// variance β⁻¹ (µT²).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelHyperparams {
    pub theta: f64,
    pub beta_inv: f64,
}

impl KernelHyperparams {
    pub fn new(theta: f64, beta_inv: f64) -> Result<Self, GprError> {
        if !(theta > 0.0) {
            return Err(GprError::InvalidParameter(format!(
                "theta must be > 0, got {theta}"
            )));
        }
        if !(beta_inv >= 0.0) {
            return Err(GprError::InvalidParameter(format!(
                "beta_inv must be >= 0, got {beta_inv}"
            )));
        }
        Ok(KernelHyperparams { theta, beta_inv })
    }
}

/// Predicted field with its posterior standard deviation, µT.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub mean_ut: f64,
    pub stddev_ut: f64,
}

/// A trained regressor: training data, hyperparameters, the solution weights
/// w = (K + β⁻¹I)⁻¹y, and the Cholesky factor used for variances.
///
/// Immutable after training; predictions are pure reads and the model can be
/// shared freely across threads.
#[derive(Debug, Clone)]
pub struct GprModel {
    features: Vec<FeatureVector>,
    targets: Vec<f64>,
    hyperparams: KernelHyperparams,
    weights: Vec<f64>,
    chol_l: DMatrix<f64>,
    jitter: f64,
}

fn kernel_matrix(features: &[FeatureVector], theta: f64) -> DMatrix<f64> {
    let n = features.len();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        k[(i, i)] = 1.0;
        for j in 0..i {
            let v = (-theta * sq_dist(&features[i].values, &features[j].values)).exp();
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

/// Factor K + (β⁻¹ + jitter)I, escalating the jitter from `JITTER_BASE` by
/// doubling until the factorization succeeds or `JITTER_MAX` is exceeded.
fn factor_with_jitter(
    k: &DMatrix<f64>,
    beta_inv: f64,
) -> Result<(Cholesky<f64, Dyn>, f64), GprError> {
    let n = k.nrows();
    let unit = k.trace() / n as f64;
    let mut jitter = JITTER_BASE * unit;
    let max_jitter = JITTER_MAX * unit;
    loop {
        let mut m = k.clone();
        for i in 0..n {
            m[(i, i)] += beta_inv + jitter;
        }
        if let Some(chol) = Cholesky::new(m) {
            return Ok((chol, jitter));
        }
        jitter *= 2.0;
        if jitter > max_jitter {
            return Err(GprError::IllConditionedKernel {
                residual: f64::INFINITY,
                jitter,
            });
        }
    }
}

/// Train a model on `features`/`targets`.
///
/// The weights are solved through the jittered factorization and then
/// polished by iterative refinement against the exact K + β⁻¹I until
/// ‖(K + β⁻¹I)w − y‖∞ < [`RESIDUAL_TOLERANCE`]·‖y‖∞; failure to reach that
/// residual reports an ill-conditioned kernel.
pub fn train(
    features: Vec<FeatureVector>,
    targets: Vec<f64>,
    hyperparams: KernelHyperparams,
) -> Result<GprModel, GprError> {
    let n = features.len();
    if n == 0 {
        return Err(GprError::EmptyTrainingSet);
    }
    if targets.len() != n {
        return Err(GprError::DimensionMismatch(format!(
            "{n} features vs {} targets",
            targets.len()
        )));
    }
    let d = features[0].len();
    if features.iter().any(|f| f.len() != d) {
        return Err(GprError::DimensionMismatch(
            "feature vectors have differing lengths".to_string(),
        ));
    }
    if targets.iter().any(|t| !t.is_finite()) {
        return Err(GprError::InvalidParameter("targets must be finite".to_string()));
    }

    let k = kernel_matrix(&features, hyperparams.theta);
    let (chol, jitter) = factor_with_jitter(&k, hyperparams.beta_inv)?;

    // Exact system matrix (no jitter) for the residual check.
    let mut m_exact = k;
    for i in 0..n {
        m_exact[(i, i)] += hyperparams.beta_inv;
    }
    let y = DVector::from_column_slice(&targets);
    let y_scale = y.amax().max(f64::MIN_POSITIVE);
    let mut w = chol.solve(&y);
    let mut residual = f64::INFINITY;
    for _ in 0..4 {
        let r = &y - &m_exact * &w;
        residual = r.amax();
        if residual < RESIDUAL_TOLERANCE * y_scale {
            break;
        }
        w += chol.solve(&r);
    }
    if residual >= RESIDUAL_TOLERANCE * y_scale {
        return Err(GprError::IllConditionedKernel { residual, jitter });
    }

    Ok(GprModel {
        features,
        targets,
        hyperparams,
        weights: w.iter().cloned().collect(),
        chol_l: chol.l(),
        jitter,
    })
}

impl GprModel {
    /// Posterior mean and standard deviation at a query feature vector.
    pub fn predict(&self, x: &FeatureVector) -> Result<Prediction, GprError> {
        let d = self.features[0].len();
        if x.len() != d {
            return Err(GprError::DimensionMismatch(format!(
                "query length {} vs training length {d}",
                x.len()
            )));
        }
        let theta = self.hyperparams.theta;
        let k = DVector::from_iterator(
            self.features.len(),
            self.features
                .iter()
                .map(|f| (-theta * sq_dist(&f.values, &x.values)).exp()),
        );
        let mean = k.iter().zip(&self.weights).map(|(ki, wi)| ki * wi).sum();
        // k(x, x) = 1 for the squared exponential kernel.
        let v = self
            .chol_l
            .solve_lower_triangular(&k)
            .expect("factor is nonsingular");
        let variance = (1.0 + self.hyperparams.beta_inv - v.norm_squared()).max(0.0);
        Ok(Prediction {
            mean_ut: mean,
            stddev_ut: variance.sqrt(),
        })
    }

    pub fn n_train(&self) -> usize {
        self.features.len()
    }

    pub fn feature_len(&self) -> usize {
        self.features[0].len()
    }

    pub fn hyperparams(&self) -> KernelHyperparams {
        self.hyperparams
    }

    pub fn features(&self) -> &[FeatureVector] {
        &self.features
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// Rebuild a model from persisted parts, re-verifying the linear-system
    /// residual. The stored weights are kept verbatim so reloaded models
    /// reproduce predictions bit-for-bit.
    pub fn from_parts(
        features: Vec<FeatureVector>,
        targets: Vec<f64>,
        hyperparams: KernelHyperparams,
        weights: Vec<f64>,
    ) -> Result<Self, GprError> {
        let n = features.len();
        if n == 0 {
            return Err(GprError::EmptyTrainingSet);
        }
        if targets.len() != n || weights.len() != n {
            return Err(GprError::DimensionMismatch(format!(
                "{n} features vs {} targets, {} weights",
                targets.len(),
                weights.len()
            )));
        }
        let d = features[0].len();
        if features.iter().any(|f| f.len() != d) {
            return Err(GprError::DimensionMismatch(
                "feature vectors have differing lengths".to_string(),
            ));
        }
        let k = kernel_matrix(&features, hyperparams.theta);
        let (chol, jitter) = factor_with_jitter(&k, hyperparams.beta_inv)?;
        let mut m_exact = k;
        for i in 0..n {
            m_exact[(i, i)] += hyperparams.beta_inv;
        }
        let y = DVector::from_column_slice(&targets);
        let w = DVector::from_column_slice(&weights);
        let residual = (&y - &m_exact * &w).amax();
        let y_scale = y.amax().max(f64::MIN_POSITIVE);
        if residual >= RESIDUAL_TOLERANCE * y_scale {
            return Err(GprError::IllConditionedKernel { residual, jitter });
        }
        Ok(GprModel {
            features,
            targets,
            hyperparams,
            weights,
            chol_l: chol.l(),
            jitter,
        })
    }
}

/// Deterministic fold assignment: a seeded shuffle of the indices split into
/// contiguous blocks.
fn fold_indices(n: usize, folds: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    (0..folds)
        .map(|f| idx[f * n / folds..(f + 1) * n / folds].to_vec())
        .collect()
}

/// Mean squared prediction error averaged over `folds` cross-validation
/// folds, for one hyperparameter point. Folds whose kernel system cannot be
/// factorized contribute an infinite loss.
pub fn cv_loss(
    features: &[FeatureVector],
    targets: &[f64],
    hyperparams: KernelHyperparams,
    folds: usize,
    seed: u64,
) -> Result<f64, GprError> {
    let n = features.len();
    if folds < 2 {
        return Err(GprError::InvalidParameter(format!(
            "need at least 2 folds, got {folds}"
        )));
    }
    if n < folds {
        return Err(GprError::InsufficientData { n, folds });
    }
    let d2 = sq_dist_matrix(features);
    Ok(cv_loss_precomputed(&d2, targets, hyperparams, folds, seed))
}

fn sq_dist_matrix(features: &[FeatureVector]) -> DMatrix<f64> {
    let n = features.len();
    let mut d2 = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..i {
            let v = sq_dist(&features[i].values, &features[j].values);
            d2[(i, j)] = v;
            d2[(j, i)] = v;
        }
    }
    d2
}

fn cv_loss_precomputed(
    d2: &DMatrix<f64>,
    targets: &[f64],
    hp: KernelHyperparams,
    folds: usize,
    seed: u64,
) -> f64 {
    let n = targets.len();
    let assignments = fold_indices(n, folds, seed);
    let mut fold_mse = Vec::with_capacity(folds);
    for held_out in &assignments {
        let train_idx: Vec<usize> = {
            let mut mask = vec![true; n];
            for &i in held_out {
                mask[i] = false;
            }
            (0..n).filter(|&i| mask[i]).collect()
        };
        let m = train_idx.len();
        let mut k = DMatrix::zeros(m, m);
        for a in 0..m {
            for b in 0..=a {
                let v = (-hp.theta * d2[(train_idx[a], train_idx[b])]).exp();
                k[(a, b)] = v;
                k[(b, a)] = v;
            }
        }
        let chol = match factor_with_jitter(&k, hp.beta_inv) {
            Ok((c, _)) => c,
            Err(_) => return f64::INFINITY,
        };
        let y = DVector::from_iterator(m, train_idx.iter().map(|&i| targets[i]));
        // Mirror train(): solve with refinement against the exact fold
        // system and treat an unmeetable residual as an untrainable point.
        let mut m_exact = k;
        for i in 0..m_exact.nrows() {
            m_exact[(i, i)] += hp.beta_inv;
        }
        let y_scale = y.amax().max(f64::MIN_POSITIVE);
        let mut w = chol.solve(&y);
        let mut residual = f64::INFINITY;
        for _ in 0..4 {
            let r = &y - &m_exact * &w;
            residual = r.amax();
            if residual < RESIDUAL_TOLERANCE * y_scale {
                break;
            }
            w += chol.solve(&r);
        }
        if residual >= RESIDUAL_TOLERANCE * y_scale {
            return f64::INFINITY;
        }
        let mut se = 0.0;
        for &q in held_out {
            let mut mean = 0.0;
            for (a, &i) in train_idx.iter().enumerate() {
                mean += (-hp.theta * d2[(q, i)]).exp() * w[a];
            }
            let err = mean - targets[q];
            se += err * err;
        }
        fold_mse.push(se / held_out.len().max(1) as f64);
    }
    fold_mse.iter().sum::<f64>() / folds as f64
}

/// Grid-search hyperparameter optimization by `folds`-fold cross-validation.
///
/// Returns the minimizing point and its CV loss. Ties break toward smaller
/// θ, then smaller β⁻¹. Fold assignment is deterministic for a given seed.
pub fn optimize_hyperparams(
    features: &[FeatureVector],
    targets: &[f64],
    theta_grid: &[f64],
    beta_inv_grid: &[f64],
    folds: usize,
    seed: u64,
) -> Result<(KernelHyperparams, f64), GprError> {
    let n = features.len();
    if n < folds {
        return Err(GprError::InsufficientData { n, folds });
    }
    if theta_grid.is_empty() || beta_inv_grid.is_empty() {
        return Err(GprError::InvalidParameter("empty hyperparameter grid".to_string()));
    }
    for &t in theta_grid {
        if !(t > 0.0) {
            return Err(GprError::InvalidParameter(format!("theta grid value {t} <= 0")));
        }
    }
    for &b in beta_inv_grid {
        if !(b >= 0.0) {
            return Err(GprError::InvalidParameter(format!("beta_inv grid value {b} < 0")));
        }
    }
    let d2 = sq_dist_matrix(features);
    let mut best: Option<(f64, KernelHyperparams)> = None;
    for &theta in theta_grid {
        for &beta_inv in beta_inv_grid {
            let hp = KernelHyperparams { theta, beta_inv };
            let loss = cv_loss_precomputed(&d2, targets, hp, folds, seed);
            let better = match &best {
                None => true,
                Some((bl, bhp)) => {
                    loss < *bl
                        || (loss == *bl
                            && (theta < bhp.theta
                                || (theta == bhp.theta && beta_inv < bhp.beta_inv)))
                }
            };
            if better {
                best = Some((loss, hp));
            }
        }
    }
    let (loss, hp) = best.expect("non-empty grid");
    Ok((hp, loss))
}

/// Default hyperparameter search grid: 13 log-spaced θ values in
/// [1e-4, 1e2] and 13 log-spaced β⁻¹ values in [1e-2, 1e4] µT².
pub fn default_grids() -> (Vec<f64>, Vec<f64>) {
    let logspace = |lo: f64, hi: f64, n: usize| -> Vec<f64> {
        let (llo, lhi) = (lo.log10(), hi.log10());
        (0..n)
            .map(|i| 10f64.powf(llo + (lhi - llo) * i as f64 / (n - 1) as f64))
            .collect()
    };
    (logspace(1e-4, 1e2, 13), logspace(1e-2, 1e4, 13))
}
