//! The synthetic experiment runners: posterior-quality comparison on a 2-D
//! mixture, variance calibration on correlated Gaussian data across
//! dimensions, covariance-estimation error along trajectories, and the
//! analytic guidance-scale study for correlated data.

use std::collections::BTreeMap;
use std::fmt;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{FhError, Result};
use crate::guidance::{BaselineRule, CgSettings, ClipConfig};
use crate::matrix::{CovarianceBackend, DenseSymMatrix};
use crate::metrics::{frobenius_error, jensen_shannon, HistogramGrid};
use crate::mixture::{GaussianMixture, LinearObservation, LinearOperator};
use crate::sampler::{
    euler_maruyama_step, euler_step, karras_timesteps, sample, ConditionalScore, JacobianKind,
    MomentsSource, SamplerConfig, SamplingMethod, SolverKind,
};
use crate::tracker::{CovarianceTracker, InitStrategy, MeanTransferMode, TrackerConfig};

/// One cell of a report table.
#[derive(Debug, Clone, PartialEq)]
pub enum ReportValue {
    Int(i64),
    Float(f64),
    Text(String),
}

impl fmt::Display for ReportValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ReportValue::Int(v) => write!(f, "{v}"),
            ReportValue::Float(v) => write!(f, "{v}"),
            ReportValue::Text(v) => write!(f, "{v}"),
        }
    }
}

/// Uniform result container: ordered columns, one map per row, and a
/// JSON-ready summary. Wall-clock is measured but kept out of the
/// deterministic table content.
#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub experiment: String,
    pub seed: u64,
    pub columns: Vec<String>,
    pub rows: Vec<BTreeMap<String, ReportValue>>,
    pub summary: BTreeMap<String, serde_json::Value>,
    pub wall_ms: u128,
}

impl ExperimentReport {
    fn new(experiment: &str, seed: u64, columns: &[&str]) -> Self {
        Self {
            experiment: experiment.to_string(),
            seed,
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
            summary: BTreeMap::new(),
            wall_ms: 0,
        }
    }

    fn push_row(&mut self, cells: Vec<(&str, ReportValue)>) {
        let mut row = BTreeMap::new();
        for (k, v) in cells {
            row.insert(k.to_string(), v);
        }
        self.rows.push(row);
    }

    pub fn float_cell(&self, row: usize, column: &str) -> Option<f64> {
        match self.rows.get(row)?.get(column)? {
            ReportValue::Float(v) => Some(*v),
            ReportValue::Int(v) => Some(*v as f64),
            ReportValue::Text(_) => None,
        }
    }

    /// First row matching all given (column, text) pairs.
    pub fn find_row(&self, filters: &[(&str, &str)]) -> Option<&BTreeMap<String, ReportValue>> {
        self.rows.iter().find(|row| {
            filters.iter().all(|(k, v)| {
                row.get(*k)
                    .map(|cell| cell.to_string() == *v)
                    .unwrap_or(false)
            })
        })
    }
}

pub fn float_of(row: &BTreeMap<String, ReportValue>, column: &str) -> Option<f64> {
    match row.get(column)? {
        ReportValue::Float(v) => Some(*v),
        ReportValue::Int(v) => Some(*v as f64),
        ReportValue::Text(_) => None,
    }
}

/// The default 2-D toy mixture: five well-separated components with strongly
/// anisotropic, differently oriented covariances and uneven weights, so
/// isotropic covariance rules are visibly wrong.
pub fn default_toy_mixture() -> GaussianMixture {
    let weights = vec![0.3, 0.25, 0.2, 0.15, 0.1];
    let means = vec![
        DVector::from_vec(vec![-2.2, -1.4]),
        DVector::from_vec(vec![-0.4, 1.8]),
        DVector::from_vec(vec![1.6, 2.2]),
        DVector::from_vec(vec![2.4, -0.8]),
        DVector::from_vec(vec![0.3, -2.3]),
    ];
    // R(theta) diag(major, minor) R(theta)^T
    let covs = [
        (20.0f64, 0.50, 0.05),
        (70.0, 0.40, 0.04),
        (125.0, 0.55, 0.06),
        (160.0, 0.35, 0.05),
        (45.0, 0.45, 0.04),
    ]
    .iter()
    .map(|&(deg, major, minor)| {
        let t = deg.to_radians();
        let (c, s) = (t.cos(), t.sin());
        let r = DMatrix::from_row_slice(2, 2, &[c, -s, s, c]);
        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![major, minor]));
        DenseSymMatrix::new(&r * d * r.transpose()).expect("SPD by construction")
    })
    .collect();
    GaussianMixture::new(weights, means, covs).expect("valid mixture")
}

/// Eigen-pair sample set whose population covariance reproduces `cov`
/// exactly; used to initialize trackers from an analytic covariance.
pub fn covariance_eigen_samples(cov: &DenseSymMatrix) -> Vec<DVector<f64>> {
    let eig = cov.as_matrix().clone().symmetric_eigen();
    let n = cov.dim();
    let mut samples = Vec::with_capacity(2 * n);
    for j in 0..n {
        let lam = eig.eigenvalues[j].max(0.0);
        let col = eig.eigenvectors.column(j).clone_owned() * (n as f64 * lam).sqrt();
        samples.push(col.clone());
        samples.push(-col);
    }
    samples
}

fn tracked_config(
    mixture: &GaussianMixture,
    sigma_max: f64,
    sigma_min: f64,
    init_samples: usize,
    seed: u64,
    transfer: MeanTransferMode,
) -> TrackerConfig {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX); // separate stream from trajectory noise
    TrackerConfig::new(
        InitStrategy::DataCovariance {
            samples: mixture.sample_n(&mut rng, init_samples),
        },
        sigma_max,
    )
    .with_space_update_range(sigma_min, sigma_max)
    .with_mean_transfer(transfer)
}

// ---------------------------------------------------------------------------
// Toy posterior comparison
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ToyPosteriorConfig {
    pub mixture: GaussianMixture,
    pub observation: LinearObservation,
    pub n_samples: usize,
    pub n_steps: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rho: f64,
    pub grid: HistogramGrid,
    pub dps_xi_sweep: Vec<f64>,
    pub tracker_init_samples: usize,
    pub cg: CgSettings,
    pub seed: u64,
}

impl ToyPosteriorConfig {
    pub fn default_with_seed(seed: u64) -> Self {
        let mixture = default_toy_mixture();
        let observation = LinearObservation::new(
            LinearOperator::Identity { dim: 2 },
            DVector::from_vec(vec![1.5, -0.5]),
            0.4,
        )
        .expect("valid observation");
        Self {
            mixture,
            observation,
            n_samples: 10_000,
            n_steps: 100,
            sigma_min: 0.002,
            sigma_max: 20.0,
            rho: 7.0,
            grid: HistogramGrid::square_2d(-5.0, 5.0, 100).expect("valid grid"),
            dps_xi_sweep: vec![0.1, 0.3, 1.0, 3.0, 10.0],
            tracker_init_samples: 4096,
            cg: CgSettings::default(),
            seed,
        }
    }
}

const TOY_COLUMNS: &[&str] = &["method", "seed", "steps", "jsd", "n_samples", "wall_ms"];

/// Posterior-quality comparison: exact posterior versus DPS (swept guidance
/// scale), PiGDM with and without post-scaling, tracked-covariance guidance,
/// and guidance with exact oracle moments.
pub fn run_toy_posterior(config: &ToyPosteriorConfig) -> Result<ExperimentReport> {
    let started = Instant::now();
    let mut report = ExperimentReport::new("toy-posterior", config.seed, TOY_COLUMNS);
    let grid = karras_timesteps(config.n_steps, config.sigma_min, config.sigma_max, config.rho)?;
    let sampler_config = SamplerConfig::new(SolverKind::Euler, grid, config.seed);

    let mut truth_rng = ChaCha8Rng::seed_from_u64(config.seed);
    truth_rng.set_stream(u64::MAX - 1);
    let posterior = config.mixture.posterior_given_y(&config.observation)?;
    let truth = posterior.sample_n(&mut truth_rng, config.n_samples);

    // GMM data has no [-1, 1] range, so the range-based clip and fallback
    // are disabled for every method here.
    let clip = ClipConfig::disabled();
    let jac = JacobianKind::ExactOracle {
        fallback_threshold: f64::INFINITY,
    };

    let mut methods: Vec<(String, SamplingMethod)> = Vec::new();
    for &xi in &config.dps_xi_sweep {
        methods.push((
            format!("dps[xi={xi}]"),
            SamplingMethod::Guided {
                observation: config.observation.clone(),
                rule: BaselineRule::Dps { xi },
                jacobian: jac,
                clip,
                cg: config.cg,
                moments: MomentsSource::ExactOracle,
            },
        ));
    }
    for (name, rule) in [
        ("pigdm", BaselineRule::PiGdm),
        ("pigdm-noscale", BaselineRule::PiGdmNoScale),
    ] {
        methods.push((
            name.to_string(),
            SamplingMethod::Guided {
                observation: config.observation.clone(),
                rule,
                jacobian: jac,
                clip,
                cg: config.cg,
                moments: MomentsSource::ExactOracle,
            },
        ));
    }
    methods.push((
        "free-hunch".to_string(),
        SamplingMethod::Guided {
            observation: config.observation.clone(),
            rule: BaselineRule::FreeHunch,
            jacobian: jac,
            clip,
            cg: config.cg,
            moments: MomentsSource::Tracked(tracked_config(
                &config.mixture,
                config.sigma_max,
                config.sigma_min,
                config.tracker_init_samples,
                config.seed,
                MeanTransferMode::ExactEvaluation,
            )),
        },
    ));
    methods.push((
        "optimal-covariance".to_string(),
        SamplingMethod::Guided {
            observation: config.observation.clone(),
            rule: BaselineRule::FreeHunch,
            jacobian: jac,
            clip,
            cg: config.cg,
            moments: MomentsSource::ExactOracle,
        },
    ));

    let mut jsd_by_method = BTreeMap::new();
    let mut coverage_warnings = Vec::new();
    let mut cg_failures = BTreeMap::new();
    for (name, method) in &methods {
        let run = sample(&sampler_config, &config.mixture, method, config.n_samples)?;
        // every innovation solve must have met its scheduled tolerance
        cg_failures.insert(name.clone(), run.diagnostics.cg_failures);
        let jsd = jensen_shannon(&run.samples, &truth, &config.grid)?;
        if jsd.coverage_warning {
            coverage_warnings.push(format!(
                "{name}: coverage {:.4}/{:.4}",
                jsd.coverage_a, jsd.coverage_b
            ));
        }
        jsd_by_method.insert(name.clone(), jsd.value);
        report.push_row(vec![
            ("method", ReportValue::Text(name.clone())),
            ("seed", ReportValue::Int(config.seed as i64)),
            ("steps", ReportValue::Int(config.n_steps as i64)),
            ("jsd", ReportValue::Float(jsd.value)),
            ("n_samples", ReportValue::Int(run.samples.len() as i64)),
            ("wall_ms", ReportValue::Int(0)),
        ]);
    }

    // best DPS over the sweep, reported like the tuned baseline
    let (best_name, best_jsd) = jsd_by_method
        .iter()
        .filter(|(k, _)| k.starts_with("dps["))
        .min_by(|a, b| a.1.partial_cmp(b.1).expect("finite jsd"))
        .map(|(k, v)| (k.clone(), *v))
        .ok_or_else(|| FhError::contract("dps sweep must be nonempty"))?;
    report.push_row(vec![
        ("method", ReportValue::Text("dps-best".into())),
        ("seed", ReportValue::Int(config.seed as i64)),
        ("steps", ReportValue::Int(config.n_steps as i64)),
        ("jsd", ReportValue::Float(best_jsd)),
        ("n_samples", ReportValue::Int(config.n_samples as i64)),
        ("wall_ms", ReportValue::Int(0)),
    ]);

    report.summary.insert(
        "jsd".into(),
        serde_json::to_value(&jsd_by_method).expect("serializable"),
    );
    report
        .summary
        .insert("dps_best".into(), serde_json::json!({"method": best_name, "jsd": best_jsd}));
    report.summary.insert(
        "coverage_warnings".into(),
        serde_json::to_value(&coverage_warnings).expect("serializable"),
    );
    report.summary.insert(
        "cg_failures".into(),
        serde_json::to_value(&cg_failures).expect("serializable"),
    );
    report.wall_ms = started.elapsed().as_millis();
    Ok(report)
}

// ---------------------------------------------------------------------------
// Correlated-dimensions variance calibration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct CorrelatedDimsConfig {
    pub dims: Vec<usize>,
    pub correlation: f64,
    pub sigma_y: f64,
    pub n_samples: usize,
    pub n_steps: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rho: f64,
    pub dps_xi: f64,
    pub cg: CgSettings,
    pub seed: u64,
}

impl CorrelatedDimsConfig {
    pub fn default_with_seed(seed: u64) -> Self {
        Self {
            dims: (1..=10).map(|i| 2 * i).collect(),
            correlation: 0.999,
            sigma_y: 0.2,
            n_samples: 4000,
            n_steps: 100,
            sigma_min: 0.002,
            sigma_max: 20.0,
            rho: 7.0,
            dps_xi: 1.0,
            cg: CgSettings::default(),
            seed,
        }
    }
}

const CORRELATED_COLUMNS: &[&str] = &[
    "method",
    "seed",
    "dim",
    "steps",
    "n_samples",
    "sample_std",
    "analytic_std",
    "wall_ms",
];

/// Data covariance `(1 - rho) I + rho J` for the correlated toy.
pub fn correlated_covariance(dim: usize, correlation: f64) -> DenseSymMatrix {
    let mat = DMatrix::from_element(dim, dim, correlation)
        + DMatrix::identity(dim, dim) * (1.0 - correlation);
    DenseSymMatrix::new(mat).expect("symmetric by construction")
}

/// Mean per-coordinate posterior standard deviation of the conjugate
/// Gaussian posterior for an identity observation.
pub fn analytic_posterior_std(data_cov: &DenseSymMatrix, sigma_y: f64) -> f64 {
    let n = data_cov.dim();
    let prec = data_cov.invert().expect("SPD").into_matrix()
        + DMatrix::identity(n, n) / (sigma_y * sigma_y);
    let post = prec.cholesky().expect("SPD").inverse();
    post.diagonal().iter().map(|v| v.sqrt()).sum::<f64>() / n as f64
}

fn mean_coordinate_std(samples: &[DVector<f64>]) -> f64 {
    let n = samples.len() as f64;
    let dim = samples[0].len();
    let mean = samples.iter().fold(DVector::zeros(dim), |a, s| a + s) / n;
    let mut acc = 0.0;
    for j in 0..dim {
        let var = samples.iter().map(|s| (s[j] - mean[j]).powi(2)).sum::<f64>() / (n - 1.0);
        acc += var.sqrt();
    }
    acc / dim as f64
}

/// Posterior variance calibration on strongly correlated Gaussian data as
/// the dimension grows: the exact conditional score, PiGDM, DPS, and the
/// tracked-covariance method.
pub fn run_correlated_dims(config: &CorrelatedDimsConfig) -> Result<ExperimentReport> {
    let started = Instant::now();
    let mut report = ExperimentReport::new("correlated-dims", config.seed, CORRELATED_COLUMNS);
    let clip = ClipConfig::disabled();

    for &dim in &config.dims {
        let data_cov = correlated_covariance(dim, config.correlation);
        let gaussian = GaussianMixture::single(DVector::zeros(dim), data_cov.clone())?;
        let analytic_std = analytic_posterior_std(&data_cov, config.sigma_y);

        // observation drawn from the generative model, fixed per (seed, dim)
        let mut obs_rng = ChaCha8Rng::seed_from_u64(config.seed ^ (dim as u64) << 32);
        obs_rng.set_stream(u64::MAX - 2);
        let x0 = gaussian.sample(&mut obs_rng);
        let noise =
            DVector::from_fn(dim, |_, _| obs_rng.sample::<f64, _>(StandardNormal)) * config.sigma_y;
        let observation = LinearObservation::new(
            LinearOperator::Identity { dim },
            &x0 + noise,
            config.sigma_y,
        )?;

        let grid = karras_timesteps(config.n_steps, config.sigma_min, config.sigma_max, config.rho)?;
        let sampler_config = SamplerConfig::new(SolverKind::Euler, grid, config.seed);
        let jac = JacobianKind::ExactOracle {
            fallback_threshold: f64::INFINITY,
        };

        let tracker = TrackerConfig::new(
            InitStrategy::DataCovariance {
                samples: covariance_eigen_samples(&data_cov),
            },
            config.sigma_max,
        )
        .with_space_update_range(config.sigma_min, config.sigma_max)
        .with_mean_transfer(MeanTransferMode::ExactEvaluation);

        let guided = |rule: BaselineRule, moments: MomentsSource| SamplingMethod::Guided {
            observation: observation.clone(),
            rule,
            jacobian: jac,
            clip,
            cg: config.cg,
            moments,
        };
        let methods: Vec<(&str, SamplingMethod)> = vec![
            ("true-posterior", SamplingMethod::ScoreOnly),
            ("pigdm", guided(BaselineRule::PiGdm, MomentsSource::ExactOracle)),
            (
                "dps",
                guided(
                    BaselineRule::Dps { xi: config.dps_xi },
                    MomentsSource::ExactOracle,
                ),
            ),
            (
                "free-hunch",
                guided(BaselineRule::FreeHunch, MomentsSource::Tracked(tracker)),
            ),
        ];

        for (name, method) in methods {
            let samples = if name == "true-posterior" {
                let source = ConditionalScore {
                    mixture: &gaussian,
                    observation: observation.clone(),
                };
                sample(&sampler_config, &source, &SamplingMethod::ScoreOnly, config.n_samples)?
                    .samples
            } else {
                sample(&sampler_config, &gaussian, &method, config.n_samples)?.samples
            };
            if samples.is_empty() {
                return Err(FhError::NumericalBreakdown(format!(
                    "all trajectories aborted for {name} at dim {dim}"
                )));
            }
            report.push_row(vec![
                ("method", ReportValue::Text(name.into())),
                ("seed", ReportValue::Int(config.seed as i64)),
                ("dim", ReportValue::Int(dim as i64)),
                ("steps", ReportValue::Int(config.n_steps as i64)),
                ("n_samples", ReportValue::Int(samples.len() as i64)),
                ("sample_std", ReportValue::Float(mean_coordinate_std(&samples))),
                ("analytic_std", ReportValue::Float(analytic_std)),
                ("wall_ms", ReportValue::Int(0)),
            ]);
        }
    }
    report.wall_ms = started.elapsed().as_millis();
    Ok(report)
}

// ---------------------------------------------------------------------------
// Covariance-estimation error along trajectories
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct CovErrorConfig {
    pub mixture: GaussianMixture,
    pub n_trajectories: usize,
    pub step_counts: Vec<usize>,
    pub solvers: Vec<SolverKind>,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rho: f64,
    pub tracker_init_samples: usize,
    pub seed: u64,
}

impl CovErrorConfig {
    pub fn default_with_seed(seed: u64) -> Self {
        Self {
            mixture: default_toy_mixture(),
            n_trajectories: 100,
            step_counts: vec![50, 100, 200, 400],
            solvers: vec![SolverKind::Euler, SolverKind::EulerMaruyama],
            sigma_min: 0.002,
            sigma_max: 20.0,
            rho: 7.0,
            tracker_init_samples: 4096,
            seed,
        }
    }
}

const COV_ERROR_COLUMNS: &[&str] = &[
    "method",
    "solver",
    "steps_total",
    "step_index",
    "sigma",
    "frobenius_error",
];

pub const COV_ERROR_METHODS: &[&str] = &[
    "pigdm-rule",
    "time-only",
    "time-space",
    "time-space-extra-eval",
];

fn solver_name(kind: SolverKind) -> &'static str {
    match kind {
        SolverKind::Euler => "euler",
        SolverKind::EulerMaruyama => "euler-maruyama",
        SolverKind::Heun => "heun",
    }
}

/// Tracks four covariance estimates along shared unconditional trajectories
/// and reports the per-step Frobenius distance to the exact denoiser
/// covariance, averaged over trajectories.
pub fn run_cov_error(config: &CovErrorConfig) -> Result<ExperimentReport> {
    let started = Instant::now();
    let mut report = ExperimentReport::new("cov-error", config.seed, COV_ERROR_COLUMNS);
    let gmm = &config.mixture;
    let dim = gmm.dim();

    let mut summary_means: BTreeMap<String, f64> = BTreeMap::new();
    for &solver in &config.solvers {
        for &n_steps in &config.step_counts {
            let grid = karras_timesteps(n_steps, config.sigma_min, config.sigma_max, config.rho)?;
            let sigmas = &grid.steps[..n_steps]; // positive levels only

            let per_traj: Vec<Result<Vec<[f64; 4]>>> = (0..config.n_trajectories)
                .into_par_iter()
                .map(|traj| {
                    let mut rng = ChaCha8Rng::seed_from_u64(
                        config.seed ^ ((n_steps as u64) << 24) ^ (solver as u64) << 16,
                    );
                    rng.set_stream(traj as u64 + 1);
                    let mut x = DVector::from_fn(dim, |_, _| {
                        rng.sample::<f64, _>(StandardNormal)
                    }) * config.sigma_max;

                    let base = tracked_config(
                        gmm,
                        config.sigma_max,
                        config.sigma_min,
                        config.tracker_init_samples,
                        config.seed,
                        MeanTransferMode::TimeUpdate,
                    );
                    let mut time_only = CovarianceTracker::new(
                        TrackerConfig {
                            space_update_range: (f64::INFINITY, f64::INFINITY),
                            ..base.clone()
                        },
                        dim,
                    )?;
                    let mut time_space = CovarianceTracker::new(base.clone(), dim)?;
                    let mut extra = CovarianceTracker::new(
                        TrackerConfig {
                            mean_transfer: MeanTransferMode::ExactEvaluation,
                            ..base.clone()
                        },
                        dim,
                    )?;

                    let mut rows = Vec::with_capacity(sigmas.len());
                    for (i, &sigma) in sigmas.iter().enumerate() {
                        let oracle = gmm.denoiser_moments(&x, sigma)?;
                        let truth = &oracle.covariance;

                        let r2 = sigma * sigma / (1.0 + sigma * sigma);
                        let pigdm = CovarianceBackend::Dense(DenseSymMatrix::scaled_identity(dim, r2));
                        let err_rule = frobenius_error(&pigdm, truth)?;

                        let (m1, _) = time_only.process_denoiser(&oracle.mean, &x, sigma, None)?;
                        let (m2, _) = time_space.process_denoiser(&oracle.mean, &x, sigma, None)?;
                        let exact_mean = extra
                            .prev_location_signal()
                            .map(|p| gmm.denoiser_moments(&p, sigma).map(|m| m.mean))
                            .transpose()?;
                        let (m3, _) =
                            extra.process_denoiser(&oracle.mean, &x, sigma, exact_mean.as_ref())?;

                        rows.push([
                            err_rule,
                            frobenius_error(&m1.covariance, truth)?,
                            frobenius_error(&m2.covariance, truth)?,
                            frobenius_error(&m3.covariance, truth)?,
                        ]);

                        let t_next = grid.steps[i + 1];
                        x = match solver {
                            SolverKind::Euler => euler_step(&x, sigma, t_next, &oracle.score).0,
                            SolverKind::EulerMaruyama => {
                                euler_maruyama_step(&x, sigma, t_next, &oracle.score, &mut rng).0
                            }
                            SolverKind::Heun => {
                                return Err(FhError::contract(
                                    "cov-error experiment drives Euler-family solvers",
                                ))
                            }
                        };
                        if x.iter().any(|v| !v.is_finite()) {
                            return Err(FhError::NumericalBreakdown(
                                "trajectory left the finite domain".into(),
                            ));
                        }
                    }
                    Ok(rows)
                })
                .collect();

            let mut sums = vec![[0.0f64; 4]; sigmas.len()];
            let mut n_ok = 0.0;
            for traj in per_traj {
                let rows = traj?;
                n_ok += 1.0;
                for (acc, row) in sums.iter_mut().zip(rows) {
                    for k in 0..4 {
                        acc[k] += row[k];
                    }
                }
            }

            // method order matches COV_ERROR_METHODS
            let mut means = [0.0f64; 4];
            for (i, &sigma) in sigmas.iter().enumerate() {
                for (k, method) in COV_ERROR_METHODS.iter().enumerate() {
                    let value = sums[i][k] / n_ok;
                    means[k] += value / sigmas.len() as f64;
                    report.push_row(vec![
                        ("method", ReportValue::Text(method.to_string())),
                        ("solver", ReportValue::Text(solver_name(solver).into())),
                        ("steps_total", ReportValue::Int(n_steps as i64)),
                        ("step_index", ReportValue::Int(i as i64)),
                        ("sigma", ReportValue::Float(sigma)),
                        ("frobenius_error", ReportValue::Float(value)),
                    ]);
                }
            }
            for (k, method) in COV_ERROR_METHODS.iter().enumerate() {
                summary_means.insert(
                    format!("{}/{}/{}", solver_name(solver), n_steps, method),
                    means[k],
                );
            }
        }
    }
    report.summary.insert(
        "mean_frobenius_error".into(),
        serde_json::to_value(&summary_means).expect("serializable"),
    );
    report.wall_ms = started.elapsed().as_millis();
    Ok(report)
}

// ---------------------------------------------------------------------------
// Guidance-scale study for correlated data
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct GuidanceNormConfig {
    pub dims: Vec<usize>,
    pub sigma: f64,
    pub sigma_y: f64,
    pub residual_scale: f64,
    pub cg: CgSettings,
    pub seed: u64,
}

impl GuidanceNormConfig {
    pub fn default_with_seed(seed: u64) -> Self {
        Self {
            dims: vec![10, 100, 10_000, 1_000_000],
            sigma: 20.0,
            sigma_y: 0.1,
            residual_scale: 1.0,
            cg: CgSettings::default(),
            seed,
        }
    }
}

const GUIDANCE_NORM_COLUMNS: &[&str] = &[
    "rule",
    "n_dim",
    "sigma",
    "sigma_y",
    "residual_scale",
    "scale_analytic",
    "scale_numeric",
    "guided_mean_err",
];

/// Analytic and numeric per-coordinate magnitude of `sigma^2 * guidance` for
/// perfectly correlated data under three covariance rules: zero (DPS-like),
/// the diagonal `sigma^2/(1+sigma^2)` rule, and the exact covariance.
/// Per-coordinate analytic scales: `a N / sigma_y^2`, `a N / (r^2 +
/// sigma_y^2)`, and `a N / (sigma_y^2 + N)` respectively. The exact rule at
/// `sigma_y = 0` also verifies that the guided mean hits the observation.
pub fn run_guidance_norm(config: &GuidanceNormConfig) -> Result<ExperimentReport> {
    let started = Instant::now();
    let mut report =
        ExperimentReport::new("guidance-norm", config.seed, GUIDANCE_NORM_COLUMNS);
    let a = config.residual_scale;
    let sigma = config.sigma;
    let s2 = sigma * sigma;
    let sy2 = config.sigma_y * config.sigma_y;
    let r2 = s2 / (1.0 + s2);
    // tiny ridge keeping the rank-one covariance invertible
    let ridge = 1e-9;

    let mut summary = BTreeMap::new();
    for &n in &config.dims {
        let nf = n as f64;
        let ones = DVector::from_element(n, 1.0);
        let residual = &ones * a;
        // J v = 1 (1^T v), plus the ridge
        let j_apply = |v: &DVector<f64>| -> DVector<f64> {
            let s: f64 = v.iter().sum();
            &ones * s + v * ridge
        };

        for rule in ["zero", "pigdm-diag", "exact"] {
            let (analytic, numeric, guided_err) = match rule {
                "zero" => {
                    let analytic = a * nf / sy2;
                    // innovation solve is diagonal: z = residual / sigma_y^2
                    let z = &residual / sy2;
                    let numeric = (j_apply(&z) / s2).amax() * s2;
                    (analytic, numeric, f64::NAN)
                }
                "pigdm-diag" => {
                    let analytic = a * nf / (r2 + sy2);
                    let op = |v: &DVector<f64>| v * (r2 + sy2);
                    let out = crate::guidance::cg_solve(
                        op,
                        &residual,
                        1e-10,
                        config.cg.max_iterations,
                        None,
                    )?;
                    if !out.converged {
                        return Err(FhError::NumericalBreakdown(
                            "diagonal-rule innovation solve did not converge".into(),
                        ));
                    }
                    let numeric = (j_apply(&out.solution) / s2).amax() * s2;
                    (analytic, numeric, f64::NAN)
                }
                "exact" => {
                    let analytic = a * nf / (sy2 + nf);
                    let op = |v: &DVector<f64>| j_apply(v) + v * sy2;
                    // rtol floors out at the summation noise of length-N dot
                    // products, so stay a little above it
                    let out = crate::guidance::cg_solve(
                        op,
                        &residual,
                        1e-10,
                        config.cg.max_iterations,
                        None,
                    )?;
                    if !out.converged {
                        return Err(FhError::NumericalBreakdown(
                            "exact-rule innovation solve did not converge".into(),
                        ));
                    }
                    let g = j_apply(&out.solution) / s2;
                    let numeric = g.amax() * s2;

                    // noiseless cancellation: guided mean equals y exactly
                    let noiseless = crate::guidance::cg_solve(
                        |v| j_apply(v),
                        &residual,
                        1e-10,
                        config.cg.max_iterations,
                        None,
                    )?;
                    let g0 = j_apply(&noiseless.solution); // sigma^2 * guidance
                    // mu + sigma^2 g0/sigma^2 should equal y, i.e. g0 = residual
                    let guided_err = (&g0 - &residual).amax();
                    (analytic, numeric, guided_err)
                }
                _ => unreachable!(),
            };
            report.push_row(vec![
                ("rule", ReportValue::Text(rule.into())),
                ("n_dim", ReportValue::Int(n as i64)),
                ("sigma", ReportValue::Float(sigma)),
                ("sigma_y", ReportValue::Float(config.sigma_y)),
                ("residual_scale", ReportValue::Float(a)),
                ("scale_analytic", ReportValue::Float(analytic)),
                ("scale_numeric", ReportValue::Float(numeric)),
                (
                    "guided_mean_err",
                    if guided_err.is_nan() {
                        ReportValue::Text(String::new())
                    } else {
                        ReportValue::Float(guided_err)
                    },
                ),
            ]);
            summary.insert(format!("{rule}/{n}"), serde_json::json!({"analytic": analytic, "numeric": numeric}));
        }
    }
    report.summary.insert(
        "per_coordinate_scale".into(),
        serde_json::to_value(&summary).expect("serializable"),
    );
    report.wall_ms = started.elapsed().as_millis();
    Ok(report)
}

// ---------------------------------------------------------------------------
// Free-form sampling
// ---------------------------------------------------------------------------

/// Settings for one free-form sampling run (the `custom-sample` experiment).
#[derive(Debug, Clone)]
pub struct CustomSampleRun {
    pub mixture: GaussianMixture,
    pub observation: LinearObservation,
    pub method: SamplingMethod,
    pub use_conditional_oracle: bool,
    pub solver: SolverKind,
    pub n_steps: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rho: f64,
    pub heun_tracker_both_evals: bool,
    pub n_samples: usize,
    pub seed: u64,
}

/// Draws samples with an arbitrary method configuration and tabulates them
/// (one row per sample, one column per coordinate).
pub fn run_custom_sample(run: &CustomSampleRun) -> Result<ExperimentReport> {
    let started = Instant::now();
    let dim = run.mixture.dim();
    let mut columns = vec!["sample_index".to_string()];
    columns.extend((0..dim).map(|i| format!("x_{i}")));
    let mut report = ExperimentReport {
        experiment: "custom-sample".into(),
        seed: run.seed,
        columns,
        rows: Vec::new(),
        summary: BTreeMap::new(),
        wall_ms: 0,
    };

    let grid = karras_timesteps(run.n_steps, run.sigma_min, run.sigma_max, run.rho)?;
    let mut config = SamplerConfig::new(run.solver, grid, run.seed);
    config.heun_tracker_both_evals = run.heun_tracker_both_evals;

    let out = if run.use_conditional_oracle {
        let source = ConditionalScore {
            mixture: &run.mixture,
            observation: run.observation.clone(),
        };
        sample(&config, &source, &SamplingMethod::ScoreOnly, run.n_samples)?
    } else {
        sample(&config, &run.mixture, &run.method, run.n_samples)?
    };

    for (i, s) in out.samples.iter().enumerate() {
        let mut row = BTreeMap::new();
        row.insert("sample_index".to_string(), ReportValue::Int(i as i64));
        for (j, v) in s.iter().enumerate() {
            row.insert(format!("x_{j}"), ReportValue::Float(*v));
        }
        report.rows.push(row);
    }
    report.summary.insert(
        "diagnostics".into(),
        serde_json::json!({
            "evaluations": out.diagnostics.evaluations,
            "cg_failures": out.diagnostics.cg_failures,
            "fallbacks": out.diagnostics.fallbacks,
            "space_applied": out.diagnostics.space_applied,
            "space_skipped_curvature": out.diagnostics.space_skipped_curvature,
            "space_skipped_range": out.diagnostics.space_skipped_range,
            "aborted_trajectories": out.diagnostics.aborted_trajectories,
        }),
    );
    report.wall_ms = started.elapsed().as_millis();
    Ok(report)
}
