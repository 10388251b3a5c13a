//! Online denoiser-covariance tracking: initialize an estimate, transport it
//! across noise levels in closed form, and refine it with BFGS-style rank-two
//! updates from consecutive denoiser evaluations.
//!
//! The covariance transport works on the inverse covariance,
//! `S' = (S^{-1} + (1/s'^2 - 1/s^2) I)^{-1}`, and the mean transfer is
//! `mu' = x + s'^2 (s'^2 I - (ds^2/s^2) S)^{-1} (mu - x)` with `S` taken at
//! the old noise level. Space updates enforce the secant relation
//! `S' dx = de` with `de = s^2 (mu_new - mu_transferred)`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::dct::{DctPlan, SignalShape};
use crate::error::{FhError, Result};
use crate::linalg;
use crate::matrix::{
    CovarianceBackend, DenseSymMatrix, LowRankDiagMatrix, DENSE_BACKEND_LIMIT,
};

/// Denoiser moment estimate at one (location, noise level).
///
/// `mean` and `location` always live in signal coordinates. When `basis` is
/// set the covariance is resident in that orthonormal basis and
/// [`DenoiserMoments::cov_apply_signal`] conjugates matvecs transparently.
#[derive(Debug, Clone)]
pub struct DenoiserMoments {
    pub mean: DVector<f64>,
    pub covariance: CovarianceBackend,
    pub sigma: f64,
    pub location: DVector<f64>,
    pub basis: Option<Arc<DctPlan>>,
}

impl DenoiserMoments {
    pub fn new(
        mean: DVector<f64>,
        covariance: CovarianceBackend,
        sigma: f64,
        location: DVector<f64>,
    ) -> Result<Self> {
        if !(sigma > 0.0) {
            return Err(FhError::contract("moments require sigma > 0"));
        }
        if mean.len() != covariance.dim() || location.len() != covariance.dim() {
            return Err(FhError::contract("moment dimensions do not match"));
        }
        Ok(Self { mean, covariance, sigma, location, basis: None })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Covariance matvec in signal coordinates.
    pub fn cov_apply_signal(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        match &self.basis {
            None => self.covariance.apply(v),
            Some(plan) => plan.inverse(&self.covariance.apply(&plan.forward(v)?)?),
        }
    }

    /// Diagonal of the covariance in signal coordinates.
    pub fn cov_diag_signal(&self) -> Result<DVector<f64>> {
        match &self.basis {
            None => Ok(self.covariance.represented_diag()),
            Some(_) => {
                let n = self.dim();
                let mut diag = DVector::zeros(n);
                for i in 0..n {
                    let mut e = DVector::zeros(n);
                    e[i] = 1.0;
                    diag[i] = self.cov_apply_signal(&e)?[i];
                }
                Ok(diag)
            }
        }
    }

    /// Dense covariance in signal coordinates (diagnostics / metrics).
    pub fn cov_dense_signal(&self) -> Result<DenseSymMatrix> {
        let dense = self.covariance.to_dense()?;
        match &self.basis {
            None => Ok(dense),
            Some(plan) => {
                let n = self.dim();
                let mut cols = DMatrix::zeros(n, n);
                for j in 0..n {
                    let col = plan.inverse(&dense.as_matrix().column(j).clone_owned())?;
                    cols.set_column(j, &col);
                }
                // rows of the result transform the same way
                let mut full = DMatrix::zeros(n, n);
                for i in 0..n {
                    let row = plan.inverse(&cols.row(i).transpose())?;
                    full.set_row(i, &row.transpose());
                }
                DenseSymMatrix::new(linalg::symmetrize(&full))
            }
        }
    }
}

/// How the initial covariance estimate is formed.
#[derive(Debug, Clone)]
pub enum InitStrategy {
    Identity { scale: f64 },
    DataCovariance { samples: Vec<DVector<f64>> },
    DctDiagonal { samples: Vec<DVector<f64>>, shape: SignalShape },
}

/// Storage format selection for the tracked covariance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackendChoice {
    /// Dense at and below [`DENSE_BACKEND_LIMIT`] dimensions, low-rank above.
    Auto,
    Dense,
    LowRank,
}

/// Source of the transferred mean used to form the BFGS residual.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeanTransferMode {
    /// Closed-form transfer of the previous denoiser mean.
    TimeUpdate,
    /// Caller supplies the denoiser mean at (previous location, new sigma),
    /// spending one extra score evaluation but avoiding transfer error.
    ExactEvaluation,
}

#[derive(Debug, Clone)]
pub struct TrackerConfig {
    pub init: InitStrategy,
    /// Noise level at which the initial covariance is declared valid.
    pub init_sigma: f64,
    /// Inclusive sigma interval in which space updates are applied.
    pub space_update_range: (f64, f64),
    /// Relative curvature floor: updates with
    /// `de . dx <= tol * |de| * |dx|` are skipped.
    pub curvature_tolerance: f64,
    pub backend: BackendChoice,
    pub mean_transfer: MeanTransferMode,
}

impl TrackerConfig {
    pub fn new(init: InitStrategy, init_sigma: f64) -> Self {
        Self {
            init,
            init_sigma,
            space_update_range: (1.0, 5.0),
            curvature_tolerance: 1e-8,
            backend: BackendChoice::Auto,
            mean_transfer: MeanTransferMode::TimeUpdate,
        }
    }

    pub fn with_space_update_range(mut self, lo: f64, hi: f64) -> Self {
        self.space_update_range = (lo, hi);
        self
    }

    pub fn with_backend(mut self, backend: BackendChoice) -> Self {
        self.backend = backend;
        self
    }

    pub fn with_mean_transfer(mut self, mode: MeanTransferMode) -> Self {
        self.mean_transfer = mode;
        self
    }
}

/// What happened to the space update in one `process_denoiser` call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpaceUpdateOutcome {
    Applied,
    SkippedCurvature,
    SkippedRange,
    /// First call: no previous evaluation to pair with.
    FirstCall,
}

/// Builds the initial covariance (and, for the DCT strategy, the resident
/// basis plan). The mean is set by the first denoiser evaluation.
pub fn initialize(
    strategy: &InitStrategy,
    dim: usize,
    backend: BackendChoice,
) -> Result<(CovarianceBackend, Option<Arc<DctPlan>>)> {
    match strategy {
        InitStrategy::Identity { scale } => {
            if !(*scale > 0.0) {
                return Err(FhError::contract("identity scale must be positive"));
            }
            let dense = backend == BackendChoice::Dense
                || (backend == BackendChoice::Auto && dim <= DENSE_BACKEND_LIMIT);
            let cov = if dense {
                CovarianceBackend::Dense(DenseSymMatrix::scaled_identity(dim, *scale))
            } else {
                CovarianceBackend::LowRank(LowRankDiagMatrix::scaled_identity(dim, *scale))
            };
            Ok((cov, None))
        }
        InitStrategy::DataCovariance { samples } => {
            let cov = empirical_covariance(samples, dim)?;
            Ok((CovarianceBackend::Dense(cov), None))
        }
        InitStrategy::DctDiagonal { samples, shape } => {
            if shape.len() != dim {
                return Err(FhError::contract("signal shape does not match dimension"));
            }
            let plan = Arc::new(match *shape {
                SignalShape::OneD { len } => DctPlan::new_1d(len)?,
                SignalShape::TwoD { height, width } => DctPlan::new_2d(height, width)?,
            });
            let variances = dct_coefficient_variances(samples, &plan, dim)?;
            Ok((
                CovarianceBackend::LowRank(LowRankDiagMatrix::from_real_diag(&variances)),
                Some(plan),
            ))
        }
    }
}

/// Population covariance of the sample rows (divisor n, so analytically
/// constructed +/- pairs reproduce their target exactly).
fn empirical_covariance(samples: &[DVector<f64>], dim: usize) -> Result<DenseSymMatrix> {
    if samples.len() < 2 {
        return Err(FhError::InsufficientData(
            "data covariance needs at least 2 samples".into(),
        ));
    }
    if samples.iter().any(|s| s.len() != dim) {
        return Err(FhError::contract("sample dimension mismatch"));
    }
    let n = samples.len() as f64;
    let mean = samples.iter().fold(DVector::zeros(dim), |a, s| a + s) / n;
    let mut cov = DMatrix::zeros(dim, dim);
    for s in samples {
        let d = s - &mean;
        cov += &d * d.transpose();
    }
    cov /= n;
    DenseSymMatrix::new(linalg::symmetrize(&cov))
}

fn dct_coefficient_variances(
    samples: &[DVector<f64>],
    plan: &DctPlan,
    dim: usize,
) -> Result<DVector<f64>> {
    if samples.len() < 2 {
        return Err(FhError::InsufficientData(
            "dct-diagonal covariance needs at least 2 samples".into(),
        ));
    }
    let n = samples.len() as f64;
    let mut transformed = Vec::with_capacity(samples.len());
    for s in samples {
        if s.len() != dim {
            return Err(FhError::contract("sample dimension mismatch"));
        }
        transformed.push(plan.forward(s)?);
    }
    let mean = transformed.iter().fold(DVector::zeros(dim), |a, s| a + s) / n;
    let mut var = DVector::zeros(dim);
    for t in &transformed {
        for i in 0..dim {
            let d = t[i] - mean[i];
            var[i] += d * d;
        }
    }
    Ok(var / n)
}

/// Covariance part of the time update from `sigma_from` to `sigma_to`.
pub(crate) fn time_update_covariance(
    cov: &CovarianceBackend,
    sigma_from: f64,
    sigma_to: f64,
) -> Result<CovarianceBackend> {
    if !(sigma_from > 0.0 && sigma_to > 0.0) {
        return Err(FhError::contract("time update requires positive noise levels"));
    }
    if sigma_to == sigma_from {
        return Ok(cov.clone());
    }
    let shift = 1.0 / (sigma_to * sigma_to) - 1.0 / (sigma_from * sigma_from);
    match cov {
        CovarianceBackend::Dense(d) => {
            // (S^{-1} + shift I)^{-1} = (I + shift S)^{-1} S, via Cholesky;
            // a spectral route would be natural here but loses digits on
            // clustered spectra (small-sigma covariances are near sigma^2 I)
            let n = d.dim();
            let system = DMatrix::identity(n, n) + d.as_matrix() * shift;
            let chol = system.cholesky().ok_or_else(|| {
                FhError::domain(format!(
                    "time update leaves the positive-definite cone: largest eigenvalue \
                     {:.6e} exceeds the admissible bound {:.6e} for sigma {} -> {}",
                    d.as_matrix().clone().symmetric_eigen().eigenvalues.max(),
                    -1.0 / shift,
                    sigma_from,
                    sigma_to
                ))
            })?;
            let mat = chol.solve(d.as_matrix());
            Ok(CovarianceBackend::Dense(DenseSymMatrix::new(
                linalg::symmetrize(&mat),
            )?))
        }
        CovarianceBackend::LowRank(l) => {
            let inv = l.invert()?;
            let shifted = inv.add_scalar_diagonal(shift);
            Ok(CovarianceBackend::LowRank(shifted.invert()?))
        }
    }
}

/// Mean transfer from `sigma_from` to `sigma_to` using the covariance at the
/// *old* level. All vectors in the covariance's resident coordinates.
pub(crate) fn transfer_mean(
    cov_at_from: &CovarianceBackend,
    mean: &DVector<f64>,
    location: &DVector<f64>,
    sigma_from: f64,
    sigma_to: f64,
) -> Result<DVector<f64>> {
    if sigma_to == sigma_from {
        return Ok(mean.clone());
    }
    let s_from2 = sigma_from * sigma_from;
    let s_to2 = sigma_to * sigma_to;
    let c = (s_to2 - s_from2) / s_from2;
    let rhs = mean - location;
    match cov_at_from {
        CovarianceBackend::Dense(d) => {
            let n = d.dim();
            let system = DMatrix::identity(n, n) * s_to2 - d.as_matrix() * c;
            let chol = linalg::symmetrize(&system).cholesky().ok_or_else(|| {
                FhError::domain(format!(
                    "mean transfer singular: eigenvalue {:.6e} reaches the bound {:.6e}",
                    d.as_matrix().clone().symmetric_eigen().eigenvalues.max(),
                    s_to2 / c
                ))
            })?;
            Ok(location + chol.solve(&rhs) * s_to2)
        }
        CovarianceBackend::LowRank(l) => {
            // sigma_to^2 I - c S in the same diagonal + low-rank format:
            // scaling S by -c swaps the roles of the factors when c > 0.
            let shifted = l.scale_and_shift(s_to2, -c);
            let solved = shifted.invert()?.apply(&rhs)?;
            Ok(location + solved * s_to2)
        }
    }
}

/// Full time update of a moment estimate (Tweedie transport).
pub fn time_update(m: &DenoiserMoments, sigma_next: f64) -> Result<DenoiserMoments> {
    if !(sigma_next > 0.0) {
        return Err(FhError::contract("time update requires sigma_next > 0"));
    }
    let to_resident = |v: &DVector<f64>| -> Result<DVector<f64>> {
        match &m.basis {
            None => Ok(v.clone()),
            Some(plan) => plan.forward(v),
        }
    };
    let mean_r = to_resident(&m.mean)?;
    let loc_r = to_resident(&m.location)?;
    let new_mean_r = transfer_mean(&m.covariance, &mean_r, &loc_r, m.sigma, sigma_next)?;
    let covariance = time_update_covariance(&m.covariance, m.sigma, sigma_next)?;
    let mean = match &m.basis {
        None => new_mean_r,
        Some(plan) => plan.inverse(&new_mean_r)?,
    };
    Ok(DenoiserMoments {
        mean,
        covariance,
        sigma: sigma_next,
        location: m.location.clone(),
        basis: m.basis.clone(),
    })
}

/// BFGS rank-two update of the covariance toward the secant pair
/// `(dx, de)`. Returns the (possibly unchanged) covariance and whether the
/// update was applied; curvature violations skip rather than fail.
pub fn bfgs_space_update(
    cov: &CovarianceBackend,
    dx: &DVector<f64>,
    de: &DVector<f64>,
    curvature_tolerance: f64,
) -> Result<(CovarianceBackend, bool)> {
    let curvature = de.dot(dx);
    if curvature <= curvature_tolerance * de.norm() * dx.norm() || curvature <= 0.0 {
        return Ok((cov.clone(), false));
    }
    let s_dx = cov.apply(dx)?;
    let quad = dx.dot(&s_dx);
    if quad <= 0.0 {
        return Err(FhError::domain(
            "space update requires a positive-definite covariance (dx^T S dx <= 0)",
        ));
    }
    let plus = de / curvature.sqrt();
    let minus = s_dx / quad.sqrt();
    let updated = cov.rank_two_update(&plus, &minus)?;
    Ok((updated, true))
}

/// State machine that consumes denoiser evaluations along one trajectory and
/// keeps a guidance-ready covariance estimate.
#[derive(Debug, Clone)]
pub struct CovarianceTracker {
    covariance: CovarianceBackend,
    sigma: f64,
    prev: Option<PrevEval>,
    plan: Option<Arc<DctPlan>>,
    config: TrackerConfig,
}

#[derive(Debug, Clone)]
struct PrevEval {
    mean: DVector<f64>,     // resident coordinates
    location: DVector<f64>, // resident coordinates
    sigma: f64,
}

impl CovarianceTracker {
    pub fn new(config: TrackerConfig, dim: usize) -> Result<Self> {
        if !(config.init_sigma > 0.0) {
            return Err(FhError::contract("tracker init_sigma must be positive"));
        }
        let (covariance, plan) = initialize(&config.init, dim, config.backend)?;
        Ok(Self {
            covariance,
            sigma: config.init_sigma,
            prev: None,
            plan,
            config,
        })
    }

    pub fn config(&self) -> &TrackerConfig {
        &self.config
    }

    pub fn current_sigma(&self) -> f64 {
        self.sigma
    }

    /// Current covariance estimate in its resident coordinates.
    pub fn covariance(&self) -> &CovarianceBackend {
        &self.covariance
    }

    pub fn basis(&self) -> Option<&Arc<DctPlan>> {
        self.plan.as_ref()
    }

    /// Previous evaluation location in signal coordinates (needed by callers
    /// that supply exact transferred means).
    pub fn prev_location_signal(&self) -> Option<DVector<f64>> {
        let prev = self.prev.as_ref()?;
        match &self.plan {
            None => Some(prev.location.clone()),
            Some(plan) => plan.inverse(&prev.location).ok(),
        }
    }

    fn to_resident(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        match &self.plan {
            None => Ok(v.clone()),
            Some(plan) => plan.forward(v),
        }
    }

    /// Feeds one denoiser evaluation (mean `mu_new` at `x_new`, level
    /// `sigma_new`) through the time + space update pipeline and returns
    /// guidance-ready moments at that point.
    ///
    /// `exact_transferred_mean` is the denoiser mean evaluated at the
    /// *previous* location and `sigma_new` (signal coordinates); required in
    /// [`MeanTransferMode::ExactEvaluation`] once a previous call exists.
    pub fn process_denoiser(
        &mut self,
        mu_new: &DVector<f64>,
        x_new: &DVector<f64>,
        sigma_new: f64,
        exact_transferred_mean: Option<&DVector<f64>>,
    ) -> Result<(DenoiserMoments, SpaceUpdateOutcome)> {
        if !(sigma_new > 0.0) {
            return Err(FhError::contract("process_denoiser requires sigma > 0"));
        }
        let mu_r = self.to_resident(mu_new)?;
        let x_r = self.to_resident(x_new)?;

        let outcome = match self.prev.take() {
            None => {
                self.covariance =
                    time_update_covariance(&self.covariance, self.sigma, sigma_new)?;
                SpaceUpdateOutcome::FirstCall
            }
            Some(prev) => {
                let transferred = match (self.config.mean_transfer, exact_transferred_mean) {
                    (MeanTransferMode::ExactEvaluation, Some(m)) => self.to_resident(m)?,
                    (MeanTransferMode::ExactEvaluation, None) => {
                        return Err(FhError::contract(
                            "exact-evaluation transfer requires the evaluated mean",
                        ))
                    }
                    (MeanTransferMode::TimeUpdate, _) => transfer_mean(
                        &self.covariance,
                        &prev.mean,
                        &prev.location,
                        prev.sigma,
                        sigma_new,
                    )?,
                };
                self.covariance =
                    time_update_covariance(&self.covariance, prev.sigma, sigma_new)?;

                let (lo, hi) = self.config.space_update_range;
                if sigma_new < lo || sigma_new > hi {
                    SpaceUpdateOutcome::SkippedRange
                } else {
                    let dx = &x_r - &prev.location;
                    let de = (&mu_r - &transferred) * (sigma_new * sigma_new);
                    let (updated, applied) = bfgs_space_update(
                        &self.covariance,
                        &dx,
                        &de,
                        self.config.curvature_tolerance,
                    )?;
                    self.covariance = updated;
                    if applied {
                        SpaceUpdateOutcome::Applied
                    } else {
                        SpaceUpdateOutcome::SkippedCurvature
                    }
                }
            }
        };

        self.sigma = sigma_new;
        self.prev = Some(PrevEval {
            mean: mu_r,
            location: x_r,
            sigma: sigma_new,
        });

        let moments = DenoiserMoments {
            mean: mu_new.clone(),
            covariance: self.covariance.clone(),
            sigma: sigma_new,
            location: x_new.clone(),
            basis: self.plan.clone(),
        };
        Ok((moments, outcome))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::DenseSymMatrix;
    use crate::mixture::GaussianMixture;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn dense(cov: &CovarianceBackend) -> DMatrix<f64> {
        cov.to_dense().unwrap().into_matrix()
    }


    #[test]
    fn initialize_identity() {
        let (cov, plan) = initialize(
            &InitStrategy::Identity { scale: 1.0 },
            3,
            BackendChoice::Auto,
        )
        .unwrap();
        assert!(plan.is_none());
        assert_eq!(dense(&cov), DMatrix::identity(3, 3));
    }

    #[test]
    fn initialize_data_covariance_from_eigen_pairs() {
        // samples +/- sqrt(N * lambda_j) v_j have population covariance
        // sum lambda_j v_j v_j^T exactly.
        let target = DMatrix::from_row_slice(2, 2, &[2.0, 0.6, 0.6, 1.0]);
        let (vals, vecs) = crate::linalg::sym_eigen(&target);
        let mut samples = Vec::new();
        for j in 0..2 {
            let col = vecs.column(j).clone_owned() * (2.0 * vals[j]).sqrt();
            samples.push(col.clone());
            samples.push(-col);
        }
        let (cov, _) = initialize(
            &InitStrategy::DataCovariance { samples },
            2,
            BackendChoice::Auto,
        )
        .unwrap();
        assert!((dense(&cov) - target).norm() < 1e-12);
    }

    #[test]
    fn initialize_data_covariance_needs_samples() {
        let err = initialize(
            &InitStrategy::DataCovariance {
                samples: vec![DVector::zeros(2)],
            },
            2,
            BackendChoice::Auto,
        )
        .unwrap_err();
        assert!(matches!(err, FhError::InsufficientData(_)));
    }

    #[test]
    fn initialize_dct_diagonal_constant_signals() {
        let samples: Vec<DVector<f64>> = [1.0, 2.0, -0.5, 0.7]
            .iter()
            .map(|&c| DVector::from_element(8, c))
            .collect();
        let (cov, plan) = initialize(
            &InitStrategy::DctDiagonal {
                samples,
                shape: SignalShape::OneD { len: 8 },
            },
            8,
            BackendChoice::Auto,
        )
        .unwrap();
        assert!(plan.is_some());
        let diag = cov.represented_diag();
        assert!(diag[0] > 0.0);
        for i in 1..8 {
            assert!(diag[i].abs() < 1e-24, "non-DC variance at {i}: {}", diag[i]);
        }
    }

    #[test]
    fn time_update_gaussian_closed_form() {
        // N(0, 1) data in 1-D: at sigma=1, x=1 the moments are (0.5, 0.5);
        // at sigma=2 they are (0.2, 0.8).
        let m = DenoiserMoments::new(
            DVector::from_vec(vec![0.5]),
            CovarianceBackend::Dense(DenseSymMatrix::scaled_identity(1, 0.5)),
            1.0,
            DVector::from_vec(vec![1.0]),
        )
        .unwrap();
        let out = time_update(&m, 2.0).unwrap();
        assert_relative_eq!(dense(&out.covariance)[(0, 0)], 0.8, epsilon = 1e-12);
        assert_relative_eq!(out.mean[0], 0.2, epsilon = 1e-12);
        assert_eq!(out.sigma, 2.0);
        assert_eq!(out.location, m.location);
    }

    #[test]
    fn time_update_same_sigma_is_identity() {
        let m = DenoiserMoments::new(
            DVector::from_vec(vec![0.3, -0.2]),
            CovarianceBackend::Dense(DenseSymMatrix::scaled_identity(2, 0.7)),
            3.0,
            DVector::zeros(2),
        )
        .unwrap();
        let out = time_update(&m, 3.0).unwrap();
        assert_eq!(out.mean, m.mean);
        assert_eq!(dense(&out.covariance), dense(&m.covariance));
    }

    #[test]
    fn time_update_matches_oracle_to_first_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let gmm = crate::test_support::random_mixture_2d(&mut rng, 3);
        let x = DVector::from_vec(vec![0.7, -0.4]);
        let sigma = 1.0;
        let base = gmm.denoiser_moments(&x, sigma).unwrap();
        let mut errors = Vec::new();
        for frac in [0.2, 0.1, 0.05, 0.025] {
            let target = sigma * (1.0 + frac);
            let m = DenoiserMoments::new(
                base.mean.clone(),
                CovarianceBackend::Dense(base.covariance.clone()),
                sigma,
                x.clone(),
            )
            .unwrap();
            let updated = time_update(&m, target).unwrap();
            let oracle = gmm.denoiser_moments(&x, target).unwrap();
            let cov_err = (dense(&updated.covariance) - oracle.covariance.as_matrix()).norm();
            let mean_err = (&updated.mean - &oracle.mean).norm();
            errors.push(cov_err + mean_err);
        }
        // halving the step should roughly halve (or better) the error
        for w in errors.windows(2) {
            assert!(w[1] < w[0] * 0.75, "no first-order decay: {errors:?}");
        }
        let slope = (errors[0] / errors[3]).log2() / 3.0;
        assert!(slope > 0.9, "observed order {slope:.2} from {errors:?}");
    }

    #[test]
    fn time_update_semigroup_composition() {
        // Eigenvalues stay below the admissible upward-transfer bound
        // sigma^2 sigma'^2 / dsigma^2 for every transition exercised.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10 {
            let diag = DVector::from_fn(3, |_, _| 0.05 + 0.1 * rng.random::<f64>());
            let mut low = LowRankDiagMatrix::from_real_diag(&diag);
            low = low
                .append_rank_one(
                    &DVector::from_fn(3, |_, _| rng.sample::<f64, _>(StandardNormal) * 0.05),
                    &DVector::zeros(3),
                )
                .unwrap();
            let mean = DVector::from_fn(3, |_, _| rng.sample::<f64, _>(StandardNormal));
            for (s0, s1, s2) in [(2.0, 1.0, 0.5), (0.5, 1.5, 3.0), (1.0, 2.5, 0.8)] {
                for cov in [
                    CovarianceBackend::Dense(low.to_dense().unwrap()),
                    CovarianceBackend::LowRank(low.clone()),
                ] {
                    let m = DenoiserMoments::new(mean.clone(), cov, s0, DVector::zeros(3)).unwrap();
                    let two_step = time_update(&time_update(&m, s1).unwrap(), s2).unwrap();
                    let direct = time_update(&m, s2).unwrap();
                    let a = dense(&two_step.covariance);
                    let b = dense(&direct.covariance);
                    let rel = (&a - &b).norm() / b.norm();
                    assert!(rel < 1e-10, "semigroup violated: {rel:.3e}");
                    let mean_rel =
                        (&two_step.mean - &direct.mean).norm() / direct.mean.norm().max(1e-12);
                    assert!(mean_rel < 1e-10, "mean semigroup violated: {mean_rel:.3e}");
                }
            }
        }
    }

    #[test]
    fn time_update_domain_error_on_backward_extrapolation() {
        // Sigma = 2 I at sigma=1 moving to sigma=10: 1 + shift*lambda < 0.
        let m = DenoiserMoments::new(
            DVector::zeros(2),
            CovarianceBackend::Dense(DenseSymMatrix::scaled_identity(2, 2.0)),
            1.0,
            DVector::zeros(2),
        )
        .unwrap();
        let err = time_update(&m, 10.0).unwrap_err();
        match err {
            FhError::Domain(msg) => assert!(msg.contains("bound"), "message: {msg}"),
            other => panic!("expected domain error, got {other:?}"),
        }
    }

    #[test]
    fn space_update_scalar_hand_case() {
        // Sigma=1, dx=1, de=2: Sigma' = 1 - 1 + 4/2 = 2, and 2*1 = 2.
        let cov = CovarianceBackend::Dense(DenseSymMatrix::identity(1));
        let dx = DVector::from_vec(vec![1.0]);
        let de = DVector::from_vec(vec![2.0]);
        let (updated, applied) = bfgs_space_update(&cov, &dx, &de, 1e-8).unwrap();
        assert!(applied);
        assert_relative_eq!(dense(&updated)[(0, 0)], 2.0, epsilon = 1e-14);
    }

    #[test]
    fn space_update_fixed_point_when_secant_already_holds() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mat = {
            let a = DMatrix::from_fn(3, 3, |_, _| rng.sample::<f64, _>(StandardNormal));
            DenseSymMatrix::new(&a * a.transpose() + DMatrix::identity(3, 3)).unwrap()
        };
        let cov = CovarianceBackend::Dense(mat);
        let dx = DVector::from_fn(3, |_, _| rng.sample::<f64, _>(StandardNormal));
        let de = cov.apply(&dx).unwrap();
        let (updated, applied) = bfgs_space_update(&cov, &dx, &de, 1e-8).unwrap();
        assert!(applied);
        assert_eq!(dense(&updated), dense(&cov), "BFGS fixed point must be exact");
    }

    #[test]
    fn space_update_secant_and_positive_definiteness_randomized() {
        // both storage backends take the same rank-two update path
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for trial in 0..200 {
            let n = 2 + (rng.random::<u32>() % 5) as usize;
            let cov = if trial % 2 == 0 {
                let a = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
                CovarianceBackend::Dense(
                    DenseSymMatrix::new(&a * a.transpose() + DMatrix::identity(n, n) * 0.1)
                        .unwrap(),
                )
            } else {
                let diag = DVector::from_fn(n, |_, _| 0.3 + rng.random::<f64>());
                CovarianceBackend::LowRank(
                    LowRankDiagMatrix::from_real_diag(&diag)
                        .append_rank_one(
                            &(DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal))
                                * 0.4),
                            &DVector::zeros(n),
                        )
                        .unwrap(),
                )
            };
            let dx = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
            let mut de = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
            if de.dot(&dx) <= 0.0 {
                de = -de;
            }
            let (updated, applied) = bfgs_space_update(&cov, &dx, &de, 1e-8).unwrap();
            if !applied {
                continue;
            }
            let secant = (updated.apply(&dx).unwrap() - &de).norm();
            assert!(secant <= 1e-9 * de.norm(), "secant residual {secant:.3e}");
            assert!(
                updated.to_dense().unwrap().min_eigenvalue() > 0.0,
                "positive definiteness lost"
            );
        }
    }

    #[test]
    fn space_update_skips_on_curvature_violation() {
        let cov = CovarianceBackend::Dense(DenseSymMatrix::identity(2));
        let dx = DVector::from_vec(vec![1.0, 0.0]);
        let de = DVector::from_vec(vec![-1.0, 0.5]);
        let (updated, applied) = bfgs_space_update(&cov, &dx, &de, 1e-8).unwrap();
        assert!(!applied);
        assert_eq!(dense(&updated), DMatrix::identity(2, 2));
    }

    #[test]
    fn process_denoiser_first_call_at_init_sigma_is_noop() {
        let samples: Vec<DVector<f64>> = (0..64)
            .map(|i| DVector::from_fn(2, |j, _| ((i * 2 + j) as f64 * 0.37).sin()))
            .collect();
        let config = TrackerConfig::new(
            InitStrategy::DataCovariance { samples: samples.clone() },
            20.0,
        );
        let init_cov = dense(&initialize(&config.init, 2, config.backend).unwrap().0);
        let mut tracker = CovarianceTracker::new(config, 2).unwrap();
        let (m, outcome) = tracker
            .process_denoiser(&DVector::zeros(2), &DVector::from_vec(vec![5.0, 5.0]), 20.0, None)
            .unwrap();
        assert_eq!(outcome, SpaceUpdateOutcome::FirstCall);
        assert_eq!(dense(&m.covariance), init_cov);
    }

    #[test]
    fn process_denoiser_same_sigma_space_update_is_exact_for_gaussian() {
        // Gaussian data: constant true covariance; secant holds and the
        // tracked error does not grow.
        let data_cov = DMatrix::from_row_slice(2, 2, &[1.0, 0.4, 0.4, 0.8]);
        let gmm = GaussianMixture::single(
            DVector::zeros(2),
            DenseSymMatrix::new(data_cov.clone()).unwrap(),
        )
        .unwrap();
        let sigma = 1.5;
        let oracle_cov = gmm
            .denoiser_moments(&DVector::zeros(2), sigma)
            .unwrap()
            .covariance;

        let config = TrackerConfig::new(InitStrategy::Identity { scale: 1.0 }, sigma)
            .with_space_update_range(0.0, f64::INFINITY);
        let mut tracker = CovarianceTracker::new(config, 2).unwrap();

        let x1 = DVector::from_vec(vec![0.5, -0.5]);
        let mu1 = gmm.denoiser_moments(&x1, sigma).unwrap().mean;
        tracker.process_denoiser(&mu1, &x1, sigma, None).unwrap();
        let err_before = (dense(&tracker.covariance) - oracle_cov.as_matrix()).norm();

        let x2 = DVector::from_vec(vec![1.2, 0.3]);
        let mu2 = gmm.denoiser_moments(&x2, sigma).unwrap().mean;
        let (m, outcome) = tracker.process_denoiser(&mu2, &x2, sigma, None).unwrap();
        assert_eq!(outcome, SpaceUpdateOutcome::Applied);

        let dx = &x2 - &x1;
        let de = (&mu2 - &mu1) * sigma * sigma;
        let secant = (m.cov_apply_signal(&dx).unwrap() - &de).norm();
        assert!(secant <= 1e-9 * de.norm(), "secant {secant:.3e}");

        let err_after = (dense(&m.covariance) - oracle_cov.as_matrix()).norm();
        assert!(
            err_after <= err_before + 1e-12,
            "error grew: {err_before:.3e} -> {err_after:.3e}"
        );
    }

    #[test]
    fn process_denoiser_range_gating() {
        let config = TrackerConfig::new(InitStrategy::Identity { scale: 1.0 }, 20.0)
            .with_space_update_range(1.0, 5.0);
        let mut tracker = CovarianceTracker::new(config, 2).unwrap();
        let x = DVector::from_vec(vec![0.1, 0.2]);
        tracker.process_denoiser(&x, &x, 20.0, None).unwrap();
        let (_, outcome) = tracker
            .process_denoiser(&DVector::zeros(2), &DVector::from_vec(vec![0.3, 0.1]), 10.0, None)
            .unwrap();
        assert_eq!(outcome, SpaceUpdateOutcome::SkippedRange);
        let (_, outcome) = tracker
            .process_denoiser(&DVector::from_vec(vec![0.2, 0.0]), &DVector::from_vec(vec![0.25, 0.15]), 3.0, None)
            .unwrap();
        assert_ne!(outcome, SpaceUpdateOutcome::SkippedRange);
    }

    /// Euler probability-flow trajectory positions for the oracle mixture.
    fn euler_trajectory(
        gmm: &GaussianMixture,
        rng: &mut impl Rng,
        sigmas: &[f64],
    ) -> Vec<DVector<f64>> {
        let mut x = DVector::from_fn(gmm.dim(), |_, _| {
            rng.sample::<f64, _>(StandardNormal) * sigmas[0]
        });
        let mut out = vec![x.clone()];
        for w in sigmas.windows(2) {
            let (t, t_next) = (w[0], w[1]);
            let score = gmm.score(&x, t).unwrap();
            x += score * (-t) * (t_next - t);
            out.push(x.clone());
        }
        out
    }

    #[test]
    fn tracked_covariance_beats_time_only_beats_heuristic() {
        // Euler trajectories with the extra-evaluation transfer (the
        // closed-form transfer amplifies its error by sigma^2 on
        // low-dimensional data and needs a stochastic sampler to pay off;
        // see the cov-error experiment for that regime).
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let gmm = crate::test_support::random_mixture_2d(&mut rng, 3);
        let sigma_max = 20.0;
        let n_steps = 50;
        let sigmas: Vec<f64> = (0..=n_steps)
            .map(|i| {
                let f = i as f64 / n_steps as f64;
                (sigma_max_pow(sigma_max, f)).max(0.02)
            })
            .collect();

        let (mut err_tracked, mut err_time_only, mut err_heuristic) = (0.0, 0.0, 0.0);
        let trajectories = 20;
        for _ in 0..trajectories {
            let path = euler_trajectory(&gmm, &mut rng, &sigmas);
            let mk = |range: (f64, f64), mode: MeanTransferMode| {
                TrackerConfig::new(
                    InitStrategy::DataCovariance {
                        samples: {
                            let mut r2 = ChaCha8Rng::seed_from_u64(99);
                            gmm.sample_n(&mut r2, 4096)
                        },
                    },
                    sigma_max,
                )
                .with_space_update_range(range.0, range.1)
                .with_mean_transfer(mode)
            };
            let mut tracked = CovarianceTracker::new(
                mk((0.0, f64::INFINITY), MeanTransferMode::ExactEvaluation),
                2,
            )
            .unwrap();
            let mut time_only = CovarianceTracker::new(
                mk((f64::INFINITY, f64::INFINITY), MeanTransferMode::TimeUpdate),
                2,
            )
            .unwrap();
            for (i, &sigma) in sigmas.iter().enumerate().skip(1) {
                let x = &path[i];
                let mu = gmm.denoiser_moments(x, sigma).unwrap();
                let exact_transfer = tracked
                    .prev_location_signal()
                    .map(|p| gmm.denoiser_moments(&p, sigma).unwrap().mean);
                let (mt, _) = tracked
                    .process_denoiser(&mu.mean, x, sigma, exact_transfer.as_ref())
                    .unwrap();
                let (mo, _) = time_only.process_denoiser(&mu.mean, x, sigma, None).unwrap();
                let truth = mu.covariance;
                err_tracked += (dense(&mt.covariance) - truth.as_matrix()).norm();
                err_time_only += (dense(&mo.covariance) - truth.as_matrix()).norm();
                let r2 = sigma * sigma / (1.0 + sigma * sigma);
                let heuristic = DMatrix::identity(2, 2) * r2;
                err_heuristic += (&heuristic - truth.as_matrix()).norm();
            }
        }
        assert!(
            err_tracked <= err_time_only && err_time_only <= err_heuristic,
            "ordering violated: tracked {err_tracked:.3} time-only {err_time_only:.3} heuristic {err_heuristic:.3}"
        );
    }

    fn sigma_max_pow(sigma_max: f64, f: f64) -> f64 {
        // geometric interpolation down from sigma_max for test trajectories
        sigma_max * (0.02f64 / sigma_max).powf(f)
    }

    #[test]
    fn gaussian_data_time_updates_track_oracle_exactly() {
        let data_cov = DMatrix::from_row_slice(2, 2, &[1.3, -0.3, -0.3, 0.9]);
        let gmm = GaussianMixture::single(
            DVector::zeros(2),
            DenseSymMatrix::new(data_cov.clone()).unwrap(),
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let sigma_max = 20.0;
        let sigmas: Vec<f64> = (0..=40)
            .map(|i| sigma_max_pow(sigma_max, i as f64 / 40.0))
            .collect();
        let path = euler_trajectory(&gmm, &mut rng, &sigmas);

        // Seed the tracker with the exact denoiser covariance at sigma_max
        // (the data covariance is only its large-sigma limit), constructed
        // through eigen-pair samples so the data-driven path is exercised.
        let exact_at_max = gmm
            .denoiser_moments(&path[0], sigma_max)
            .unwrap()
            .covariance;
        let config = TrackerConfig::new(
            InitStrategy::DataCovariance {
                samples: {
                    let (vals, vecs) = crate::linalg::sym_eigen(exact_at_max.as_matrix());
                    let mut s = Vec::new();
                    for j in 0..2 {
                        let col = vecs.column(j).clone_owned() * (2.0 * vals[j]).sqrt();
                        s.push(col.clone());
                        s.push(-col);
                    }
                    s
                },
            },
            sigma_max,
        );
        let mut tracker = CovarianceTracker::new(config, 2).unwrap();
        for (i, &sigma) in sigmas.iter().enumerate().skip(1) {
            let x = &path[i];
            let oracle = gmm.denoiser_moments(x, sigma).unwrap();
            let (m, _) = tracker.process_denoiser(&oracle.mean, x, sigma, None).unwrap();
            let rel = (dense(&m.covariance) - oracle.covariance.as_matrix()).norm()
                / oracle.covariance.as_matrix().norm();
            assert!(rel < 1e-10, "Gaussian tracking drifted: {rel:.3e} at sigma {sigma}");
        }
    }

    #[test]
    fn tracked_covariance_approaches_sigma_squared_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let gmm = crate::test_support::random_mixture_2d(&mut rng, 2);
        let sigma_max = 20.0;
        let mut tracker = CovarianceTracker::new(
            TrackerConfig::new(
                InitStrategy::DataCovariance {
                    samples: gmm.sample_n(&mut rng, 2048),
                },
                sigma_max,
            ),
            2,
        )
        .unwrap();
        let sigmas: Vec<f64> = (0..=60)
            .map(|i| sigma_max * (1e-3f64 / sigma_max).powf(i as f64 / 60.0))
            .collect();
        let path = euler_trajectory(&gmm, &mut rng, &sigmas);
        let mut last_rel = f64::NAN;
        let mut last_sigma = f64::NAN;
        for (i, &sigma) in sigmas.iter().enumerate().skip(1) {
            let mu = gmm.denoiser_moments(&path[i], sigma).unwrap();
            let (m, _) = tracker.process_denoiser(&mu.mean, &path[i], sigma, None).unwrap();
            last_rel = (dense(&m.covariance) - DMatrix::identity(2, 2) * sigma * sigma).norm()
                / (sigma * sigma);
            last_sigma = sigma;
        }
        assert!(
            last_rel <= 10.0 * last_sigma * last_sigma,
            "relative deviation {last_rel:.3e} not O(sigma^2) at sigma {last_sigma:.3e}"
        );
    }

    #[test]
    fn dct_resident_tracker_matches_dense_tracker() {
        // 1-D signals; identity init in both bases (orthonormal conjugation
        // of I is I, so the two trackers represent the same matrix).
        let len = 8;
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let samples: Vec<DVector<f64>> = (0..32)
            .map(|_| DVector::from_fn(len, |_, _| rng.sample::<f64, _>(StandardNormal)))
            .collect();
        let plan = DctPlan::new_1d(len).unwrap();

        let cfg_dct = TrackerConfig::new(
            InitStrategy::DctDiagonal {
                samples: samples.clone(),
                shape: SignalShape::OneD { len },
            },
            20.0,
        )
        .with_space_update_range(0.0, f64::INFINITY);
        let mut dct_tracker = CovarianceTracker::new(cfg_dct, len).unwrap();

        // dense tracker initialized at the conjugated matrix
        let diag = dct_coefficient_variances(&samples, &plan, len).unwrap();
        let mut dense_init = DMatrix::zeros(len, len);
        for i in 0..len {
            let mut e = DVector::zeros(len);
            e[i] = diag[i];
            let col = plan.inverse(&e).unwrap();
            // build Gamma D Gamma^T column by column via basis application
            for r in 0..len {
                dense_init[(r, i)] = col[r];
            }
        }
        // conjugate rows too
        let mut conjugated = DMatrix::zeros(len, len);
        for r in 0..len {
            let row = plan.inverse(&dense_init.row(r).transpose()).unwrap();
            conjugated.set_row(r, &row.transpose());
        }
        let cfg_dense = TrackerConfig {
            init: InitStrategy::Identity { scale: 1.0 }, // replaced below
            init_sigma: 20.0,
            space_update_range: (0.0, f64::INFINITY),
            curvature_tolerance: 1e-8,
            backend: BackendChoice::Dense,
            mean_transfer: MeanTransferMode::TimeUpdate,
        };
        let mut dense_tracker = CovarianceTracker::new(cfg_dense, len).unwrap();
        dense_tracker.covariance = CovarianceBackend::Dense(
            DenseSymMatrix::new(crate::linalg::symmetrize(&conjugated)).unwrap(),
        );

        let mut x = DVector::from_fn(len, |_, _| rng.sample::<f64, _>(StandardNormal) * 20.0);
        for &sigma in &[20.0, 12.0, 7.0, 4.0, 2.0] {
            let mu = &x * 0.9; // synthetic denoiser mean; same for both
            let (md, _) = dct_tracker.process_denoiser(&mu, &x, sigma, None).unwrap();
            let (mm, _) = dense_tracker.process_denoiser(&mu, &x, sigma, None).unwrap();
            let a = md.cov_dense_signal().unwrap();
            let b = mm.cov_dense_signal().unwrap();
            let rel = (a.as_matrix() - b.as_matrix()).norm() / b.as_matrix().norm();
            assert!(rel < 1e-8, "resident/dense divergence {rel:.3e} at sigma {sigma}");
            x = &x * 0.8 + DVector::from_fn(len, |_, _| rng.sample::<f64, _>(StandardNormal) * 0.1);
        }
    }

    #[test]
    fn exact_evaluation_transfer_requires_mean() {
        let config = TrackerConfig::new(InitStrategy::Identity { scale: 1.0 }, 20.0)
            .with_mean_transfer(MeanTransferMode::ExactEvaluation);
        let mut tracker = CovarianceTracker::new(config, 2).unwrap();
        let x = DVector::zeros(2);
        tracker.process_denoiser(&x, &x, 20.0, None).unwrap();
        assert!(tracker
            .process_denoiser(&x, &DVector::from_vec(vec![1.0, 0.0]), 10.0, None)
            .is_err());
    }
}
