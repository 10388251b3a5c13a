//! Reverse-time integrators over the variance-exploding process with the
//! rho-warped time discretization, wired to the covariance tracker and the
//! guidance engine. Trajectories are independent: each owns its RNG stream
//! and tracker, so sampling parallelizes without shared state.

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{FhError, Result};
use crate::guidance::{
    baseline_guidance, BaselineRule, CgSettings, ClipConfig, JacobianFactor,
};
use crate::matrix::CovarianceBackend;
use crate::mixture::{GaussianMixture, LinearObservation, OracleMoments};
use crate::tracker::{
    bfgs_space_update, time_update_covariance, transfer_mean, CovarianceTracker, DenoiserMoments,
    MeanTransferMode, SpaceUpdateOutcome, TrackerConfig,
};

/// Decreasing noise levels t_0 .. t_N with t_N = 0.
#[derive(Debug, Clone)]
pub struct TimeGrid {
    pub steps: Vec<f64>,
    pub rho: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
}

/// Warped discretization: `t_i = (t_max^(1/rho) + (i/(N-1)) (t_min^(1/rho) -
/// t_max^(1/rho)))^rho` for `i < N`, plus the terminal `t_N = 0`.
pub fn karras_timesteps(n_steps: usize, sigma_min: f64, sigma_max: f64, rho: f64) -> Result<TimeGrid> {
    if n_steps < 2 {
        return Err(FhError::contract("need at least 2 steps"));
    }
    if !(sigma_min > 0.0 && sigma_max > sigma_min) {
        return Err(FhError::contract("need 0 < sigma_min < sigma_max"));
    }
    if !(rho > 0.0) {
        return Err(FhError::contract("need rho > 0"));
    }
    let inv = 1.0 / rho;
    let (hi, lo) = (sigma_max.powf(inv), sigma_min.powf(inv));
    let mut steps: Vec<f64> = (0..n_steps)
        .map(|i| {
            let f = i as f64 / (n_steps - 1) as f64;
            (hi + f * (lo - hi)).powf(rho)
        })
        .collect();
    // pin the endpoints exactly; the warp is identity there up to rounding
    steps[0] = sigma_max;
    steps[n_steps - 1] = sigma_min;
    steps.push(0.0);
    Ok(TimeGrid {
        steps,
        rho,
        sigma_min,
        sigma_max,
    })
}

impl TimeGrid {
    /// Number of integration steps (score evaluations for Euler).
    pub fn n_steps(&self) -> usize {
        self.steps.len() - 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolverKind {
    Euler,
    EulerMaruyama,
    Heun,
}

/// One probability-flow Euler step under sigma(t) = t.
pub fn euler_step(
    x: &DVector<f64>,
    t: f64,
    t_next: f64,
    total_score: &DVector<f64>,
) -> (DVector<f64>, DVector<f64>) {
    let delta = total_score * (-t) * (t_next - t);
    (x + &delta, delta)
}

/// One reverse-SDE Euler–Maruyama step; drift is twice the PF-ODE drift and
/// the diffusion injects `sqrt(2 t |dt|)` noise.
pub fn euler_maruyama_step(
    x: &DVector<f64>,
    t: f64,
    t_next: f64,
    total_score: &DVector<f64>,
    rng: &mut impl Rng,
) -> (DVector<f64>, DVector<f64>) {
    let noise_scale = (2.0 * t * (t - t_next).abs()).sqrt();
    let z = DVector::from_fn(x.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
    let delta = total_score * (-2.0 * t) * (t_next - t) + z * noise_scale;
    (x + &delta, delta)
}

/// One (location, sigma, score) record consumed by a solver step.
pub type ScoreEvaluation = (DVector<f64>, f64, DVector<f64>);

/// One second-order Heun step over the PF-ODE; the final step to t = 0 falls
/// back to plain Euler. Returns the state and the (x, sigma, score)
/// evaluations consumed, so trackers can process each.
pub fn heun_step(
    x: &DVector<f64>,
    t: f64,
    t_next: f64,
    mut score_fn: impl FnMut(&DVector<f64>, f64) -> Result<DVector<f64>>,
) -> Result<(DVector<f64>, Vec<ScoreEvaluation>)> {
    let s1 = score_fn(x, t)?;
    let d1 = &s1 * (-t);
    let dt = t_next - t;
    let predicted = x + &d1 * dt;
    if t_next == 0.0 {
        return Ok((predicted, vec![(x.clone(), t, s1)]));
    }
    let s2 = score_fn(&predicted, t_next)?;
    let d2 = &s2 * (-t_next);
    let next = x + (&d1 + &d2) * (0.5 * dt);
    Ok((next, vec![(x.clone(), t, s1), (predicted, t_next, s2)]))
}

/// Source of (unconditional or conditional) scores, plus optional exact
/// denoiser moments when the source is an analytic oracle.
pub trait ScoreSource: Sync {
    fn dim(&self) -> usize;
    fn score(&self, x: &DVector<f64>, sigma: f64) -> Result<DVector<f64>>;

    fn denoiser_mean(&self, x: &DVector<f64>, sigma: f64) -> Result<DVector<f64>> {
        Ok(x + self.score(x, sigma)? * (sigma * sigma))
    }

    /// Exact denoiser moments at (x, sigma), when the source is analytic.
    fn oracle_moments(&self, _x: &DVector<f64>, _sigma: f64) -> Option<Result<OracleMoments>> {
        None
    }
}

impl ScoreSource for GaussianMixture {
    fn dim(&self) -> usize {
        GaussianMixture::dim(self)
    }

    fn score(&self, x: &DVector<f64>, sigma: f64) -> Result<DVector<f64>> {
        GaussianMixture::score(self, x, sigma)
    }

    fn oracle_moments(&self, x: &DVector<f64>, sigma: f64) -> Option<Result<OracleMoments>> {
        Some(self.denoiser_moments(x, sigma))
    }
}

/// Exact conditional score oracle: sampling with it draws from the true
/// posterior (up to solver discretization).
pub struct ConditionalScore<'a> {
    pub mixture: &'a GaussianMixture,
    pub observation: LinearObservation,
}

impl ScoreSource for ConditionalScore<'_> {
    fn dim(&self) -> usize {
        self.mixture.dim()
    }

    fn score(&self, x: &DVector<f64>, sigma: f64) -> Result<DVector<f64>> {
        self.mixture.conditional_score(&self.observation, x, sigma)
    }
}

/// Where the guidance formula takes its moment estimate from.
#[derive(Debug, Clone)]
pub enum MomentsSource {
    Tracked(TrackerConfig),
    /// Exact oracle moments recomputed at every evaluation.
    ExactOracle,
}

/// Config-level choice of the denoiser-mean Jacobian factor.
#[derive(Debug, Clone, Copy)]
pub enum JacobianKind {
    ExactOracle { fallback_threshold: f64 },
    CovarianceApprox,
    Identity,
}

/// What to add to the unconditional score at every evaluation.
#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
pub enum SamplingMethod {
    /// No guidance: integrate the source's score as-is.
    ScoreOnly,
    Guided {
        observation: LinearObservation,
        rule: BaselineRule,
        jacobian: JacobianKind,
        clip: ClipConfig,
        cg: CgSettings,
        moments: MomentsSource,
    },
}

#[derive(Debug, Clone)]
pub struct SamplerConfig {
    pub solver: SolverKind,
    pub grid: TimeGrid,
    pub seed: u64,
    /// Feed both Heun evaluations to the tracker (predictor-only when false).
    pub heun_tracker_both_evals: bool,
    /// Record per-step diagnostics for the first trajectory.
    pub record_diagnostics: bool,
}

impl SamplerConfig {
    pub fn new(solver: SolverKind, grid: TimeGrid, seed: u64) -> Self {
        Self {
            solver,
            grid,
            seed,
            heun_tracker_both_evals: true,
            record_diagnostics: false,
        }
    }
}

/// Per-step trace for one trajectory.
#[derive(Debug, Clone)]
pub struct StepDiagnostic {
    pub sigma: f64,
    pub space_update: Option<SpaceUpdateOutcome>,
    pub fell_back: bool,
    pub cg_converged: bool,
    pub cg_iterations: usize,
    pub cg_residual_norm: f64,
    pub cg_rhs_norm: f64,
    /// max |sigma^2 g| over coordinates.
    pub guidance_scale: f64,
    pub tracked_covariance: Option<DMatrix<f64>>,
}

/// Counters accumulated over every trajectory and evaluation.
#[derive(Debug, Clone, Default)]
pub struct AggregateDiagnostics {
    pub evaluations: usize,
    pub cg_failures: usize,
    pub fallbacks: usize,
    pub space_applied: usize,
    pub space_skipped_curvature: usize,
    pub space_skipped_range: usize,
    pub aborted_trajectories: usize,
}

#[derive(Debug, Clone)]
pub struct SampleRun {
    /// One row per surviving trajectory.
    pub samples: Vec<DVector<f64>>,
    pub diagnostics: AggregateDiagnostics,
    pub first_trajectory_trace: Option<Vec<StepDiagnostic>>,
}

struct TrajectoryState<'a> {
    source: &'a dyn ScoreSource,
    method: &'a SamplingMethod,
    tracker: Option<CovarianceTracker>,
    diag: AggregateDiagnostics,
    trace: Option<Vec<StepDiagnostic>>,
}

impl<'a> TrajectoryState<'a> {
    fn new(source: &'a dyn ScoreSource, method: &'a SamplingMethod, record: bool) -> Result<Self> {
        let tracker = match method {
            SamplingMethod::Guided {
                moments: MomentsSource::Tracked(cfg),
                ..
            } => Some(CovarianceTracker::new(cfg.clone(), source.dim())?),
            _ => None,
        };
        Ok(Self {
            source,
            method,
            tracker,
            diag: AggregateDiagnostics::default(),
            trace: if record { Some(Vec::new()) } else { None },
        })
    }

    /// Guided score at (x, sigma). `feed_tracker = false` evaluates guidance
    /// against a throwaway tracker clone (used by the Heun corrector in
    /// predictor-only mode).
    fn total_score(
        &mut self,
        x: &DVector<f64>,
        sigma: f64,
        feed_tracker: bool,
    ) -> Result<DVector<f64>> {
        self.diag.evaluations += 1;
        let (rule, observation, jacobian, clip, cg, moments_source) = match self.method {
            SamplingMethod::ScoreOnly => {
                let score = self.source.score(x, sigma)?;
                if let Some(t) = self.trace.as_mut() {
                    t.push(StepDiagnostic {
                        sigma,
                        space_update: None,
                        fell_back: false,
                        cg_converged: true,
                        cg_iterations: 0,
                        cg_residual_norm: 0.0,
                        cg_rhs_norm: 0.0,
                        guidance_scale: 0.0,
                        tracked_covariance: None,
                    });
                }
                return Ok(score);
            }
            SamplingMethod::Guided {
                observation,
                rule,
                jacobian,
                clip,
                cg,
                moments,
            } => (*rule, observation, *jacobian, *clip, *cg, moments),
        };

        // One oracle evaluation serves the score, the exact-moment source,
        // and the exact-Jacobian factor.
        let needs_oracle = matches!(moments_source, MomentsSource::ExactOracle)
            || matches!(jacobian, JacobianKind::ExactOracle { .. });
        let oracle = if needs_oracle {
            Some(
                self.source
                    .oracle_moments(x, sigma)
                    .ok_or_else(|| {
                        FhError::contract("method requires an analytic oracle score source")
                    })??,
            )
        } else {
            None
        };
        let score = match &oracle {
            Some(om) => om.score.clone(),
            None => self.source.score(x, sigma)?,
        };

        let mu = x + &score * (sigma * sigma);
        let (moments, outcome) = match moments_source {
            MomentsSource::Tracked(cfg) => {
                let exact_transfer = if cfg.mean_transfer == MeanTransferMode::ExactEvaluation {
                    match self
                        .tracker
                        .as_ref()
                        .and_then(|t| t.prev_location_signal())
                    {
                        Some(prev) => Some(self.source.denoiser_mean(&prev, sigma)?),
                        None => None,
                    }
                } else {
                    None
                };
                if feed_tracker {
                    let tracker = self.tracker.as_mut().expect("tracked method has a tracker");
                    let (m, o) = tracker.process_denoiser(&mu, x, sigma, exact_transfer.as_ref())?;
                    (m, Some(o))
                } else {
                    let mut peek = self.tracker.as_ref().expect("tracker").clone();
                    let (m, o) = peek.process_denoiser(&mu, x, sigma, exact_transfer.as_ref())?;
                    (m, Some(o))
                }
            }
            MomentsSource::ExactOracle => {
                let om = oracle.as_ref().expect("oracle computed above");
                (
                    DenoiserMoments::new(
                        mu.clone(),
                        CovarianceBackend::Dense(om.covariance.clone()),
                        sigma,
                        x.clone(),
                    )?,
                    None,
                )
            }
        };

        let cov_apply = oracle
            .as_ref()
            .map(|om| move |v: &DVector<f64>| om.covariance.as_matrix() * v);
        let factor = match jacobian {
            JacobianKind::Identity => JacobianFactor::Identity,
            JacobianKind::CovarianceApprox => JacobianFactor::CovarianceApprox,
            JacobianKind::ExactOracle { fallback_threshold } => JacobianFactor::ExactOracle {
                cov_apply: cov_apply.as_ref().expect("oracle computed above"),
                fallback_threshold,
            },
        };

        let guidance =
            baseline_guidance(rule, &moments, observation, &score, &factor, &cg, clip)?;
        if !guidance.cg_converged {
            self.diag.cg_failures += 1;
        }
        if guidance.fell_back {
            self.diag.fallbacks += 1;
        }
        match outcome {
            Some(SpaceUpdateOutcome::Applied) => self.diag.space_applied += 1,
            Some(SpaceUpdateOutcome::SkippedCurvature) => self.diag.space_skipped_curvature += 1,
            Some(SpaceUpdateOutcome::SkippedRange) => self.diag.space_skipped_range += 1,
            _ => {}
        }
        if let Some(t) = self.trace.as_mut() {
            t.push(StepDiagnostic {
                sigma,
                space_update: outcome,
                fell_back: guidance.fell_back,
                cg_converged: guidance.cg_converged,
                cg_iterations: guidance.cg_iterations,
                cg_residual_norm: guidance.cg_residual_norm,
                cg_rhs_norm: guidance.cg_rhs_norm,
                guidance_scale: guidance.gradient.amax() * sigma * sigma,
                tracked_covariance: if moments.dim() <= 64 {
                    moments.cov_dense_signal().ok().map(|d| d.into_matrix())
                } else {
                    None
                },
            });
        }
        Ok(&score + &guidance.gradient)
    }
}

type TrajectoryOutput = (
    Option<DVector<f64>>,
    AggregateDiagnostics,
    Option<Vec<StepDiagnostic>>,
);

fn run_trajectory(
    config: &SamplerConfig,
    source: &dyn ScoreSource,
    method: &SamplingMethod,
    index: usize,
) -> Result<TrajectoryOutput> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(index as u64 + 1);
    let n = source.dim();
    let sigma_max = config.grid.steps[0];
    let mut x =
        DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal)) * sigma_max;

    let record = config.record_diagnostics && index == 0;
    let mut state = TrajectoryState::new(source, method, record)?;

    let steps = &config.grid.steps;
    for i in 0..steps.len() - 1 {
        let (t, t_next) = (steps[i], steps[i + 1]);
        let next = match config.solver {
            SolverKind::Euler => {
                let total = state.total_score(&x, t, true)?;
                euler_step(&x, t, t_next, &total).0
            }
            SolverKind::EulerMaruyama => {
                let total = state.total_score(&x, t, true)?;
                euler_maruyama_step(&x, t, t_next, &total, &mut rng).0
            }
            SolverKind::Heun => {
                let both = config.heun_tracker_both_evals;
                let mut first = true;
                let state_ref = &mut state;
                let (next, _evals) = heun_step(&x, t, t_next, |p, s| {
                    let feed = if first {
                        first = false;
                        true
                    } else {
                        both
                    };
                    state_ref.total_score(p, s, feed)
                })?;
                next
            }
        };
        if next.iter().any(|v| !v.is_finite()) {
            state.diag.aborted_trajectories = 1;
            return Ok((None, state.diag, state.trace));
        }
        x = next;
    }
    Ok((Some(x), state.diag, state.trace))
}

/// Draws `n_samples` reverse-process samples. Trajectories run in parallel
/// on independent RNG streams; results merge in index order so output is
/// deterministic for a given (config, seed).
pub fn sample(
    config: &SamplerConfig,
    source: &dyn ScoreSource,
    method: &SamplingMethod,
    n_samples: usize,
) -> Result<SampleRun> {
    let results: Vec<_> = (0..n_samples)
        .into_par_iter()
        .map(|i| run_trajectory(config, source, method, i))
        .collect();

    let mut samples = Vec::with_capacity(n_samples);
    let mut diagnostics = AggregateDiagnostics::default();
    let mut first_trace = None;
    for r in results {
        let (sample, diag, trace) = r?;
        if let Some(s) = sample {
            samples.push(s);
        }
        diagnostics.evaluations += diag.evaluations;
        diagnostics.cg_failures += diag.cg_failures;
        diagnostics.fallbacks += diag.fallbacks;
        diagnostics.space_applied += diag.space_applied;
        diagnostics.space_skipped_curvature += diag.space_skipped_curvature;
        diagnostics.space_skipped_range += diag.space_skipped_range;
        diagnostics.aborted_trajectories += diag.aborted_trajectories;
        if first_trace.is_none() {
            first_trace = trace;
        }
    }
    Ok(SampleRun {
        samples,
        diagnostics,
        first_trajectory_trace: first_trace,
    })
}

/// Reference Euler loop with the tracker updates inlined in the classic
/// order (space update, guidance, step, mean transfer, covariance
/// transport). Exists to cross-check that the solver-agnostic tracker
/// pathway produces identical trajectories; only the tracked FreeHunch
/// configuration is supported.
#[allow(clippy::too_many_arguments)]
pub fn euler_reference_trajectory(
    config: &SamplerConfig,
    source: &dyn ScoreSource,
    observation: &LinearObservation,
    tracker_config: &TrackerConfig,
    jacobian: JacobianKind,
    clip: ClipConfig,
    cg: &CgSettings,
    index: usize,
) -> Result<DVector<f64>> {
    if tracker_config.mean_transfer != MeanTransferMode::TimeUpdate {
        return Err(FhError::contract(
            "reference loop implements the closed-form transfer only",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(index as u64 + 1);
    let n = source.dim();
    let sigma_max = config.grid.steps[0];
    let mut x =
        DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal)) * sigma_max;

    let (mut covariance, plan) =
        crate::tracker::initialize(&tracker_config.init, n, tracker_config.backend)?;
    if plan.is_some() {
        return Err(FhError::contract("reference loop does not handle basis residency"));
    }
    covariance = time_update_covariance(&covariance, tracker_config.init_sigma, config.grid.steps[0])?;
    let mut transferred: Option<DVector<f64>> = None;
    let mut delta_x: Option<DVector<f64>> = None;
    let mut prev_sigma = config.grid.steps[0];

    let steps = &config.grid.steps;
    for i in 0..steps.len() - 1 {
        let (sigma, sigma_next) = (steps[i], steps[i + 1]);
        let score = source.score(&x, sigma)?;
        let mu = &x + &score * (sigma * sigma);

        // covariance arrives here already transported to `sigma`
        covariance = time_update_covariance(&covariance, prev_sigma, sigma)?;
        if let (Some(mu_tr), Some(dx)) = (&transferred, &delta_x) {
            let (lo, hi) = tracker_config.space_update_range;
            if sigma >= lo && sigma <= hi {
                let de = (&mu - mu_tr) * (sigma * sigma);
                let (updated, _applied) =
                    bfgs_space_update(&covariance, dx, &de, tracker_config.curvature_tolerance)?;
                covariance = updated;
            }
        }

        let moments = DenoiserMoments::new(mu.clone(), covariance.clone(), sigma, x.clone())?;
        let exact_cov = match jacobian {
            JacobianKind::ExactOracle { .. } => Some(
                source
                    .oracle_moments(&x, sigma)
                    .ok_or_else(|| FhError::contract("exact Jacobian needs an oracle"))??
                    .covariance,
            ),
            _ => None,
        };
        let cov_apply = exact_cov
            .as_ref()
            .map(|c| move |v: &DVector<f64>| c.as_matrix() * v);
        let factor = match jacobian {
            JacobianKind::Identity => JacobianFactor::Identity,
            JacobianKind::CovarianceApprox => JacobianFactor::CovarianceApprox,
            JacobianKind::ExactOracle { fallback_threshold } => JacobianFactor::ExactOracle {
                cov_apply: cov_apply.as_ref().expect("computed above"),
                fallback_threshold,
            },
        };
        let guidance = baseline_guidance(
            BaselineRule::FreeHunch,
            &moments,
            observation,
            &score,
            &factor,
            cg,
            clip,
        )?;
        let total = &score + &guidance.gradient;
        let (next, _) = euler_step(&x, sigma, sigma_next, &total);

        if sigma_next > 0.0 {
            transferred = Some(transfer_mean(&covariance, &mu, &x, sigma, sigma_next)?);
            // position difference, exactly as the tracker will recompute it
            delta_x = Some(&next - &x);
        }
        prev_sigma = sigma;
        x = next;
    }
    Ok(x)
}
