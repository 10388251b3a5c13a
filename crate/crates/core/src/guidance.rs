//! Reconstruction guidance for linear-Gaussian observations: the
//! tolerance-scheduled conjugate-gradient solve of
//! `(A S A^T + sigma_y^2 I) z = y - A mu`, the denoiser-mean Jacobian
//! composition with its norm-triggered fallback, and the baseline covariance
//! rules (DPS, PiGDM variants, sigma^2 heuristic) with their post-processing.

use nalgebra::DVector;

use crate::error::{FhError, Result};
use crate::mixture::LinearObservation;
use crate::tracker::DenoiserMoments;

/// Conjugate-gradient settings with the log10-interpolated tolerance
/// schedule: loose solves at high noise, tight solves near the data.
#[derive(Debug, Clone, Copy)]
pub struct CgSettings {
    pub rtol_max: f64,
    pub rtol_min: f64,
    pub sigma_lo: f64,
    pub sigma_hi: f64,
    pub exponent: f64,
    pub max_iterations: usize,
}

impl Default for CgSettings {
    fn default() -> Self {
        Self {
            rtol_max: 1.0,
            rtol_min: 1e-14,
            sigma_lo: 1.0,
            sigma_hi: 80.0,
            exponent: 0.1,
            max_iterations: 1000,
        }
    }
}

impl CgSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.rtol_min > 0.0 && self.rtol_min <= self.rtol_max) {
            return Err(FhError::contract("need 0 < rtol_min <= rtol_max"));
        }
        if !(self.sigma_lo < self.sigma_hi) {
            return Err(FhError::contract("need sigma_lo < sigma_hi"));
        }
        if !(self.exponent > 0.0) {
            return Err(FhError::contract("need exponent > 0"));
        }
        Ok(())
    }
}

/// Solver tolerance for a noise level: clip sigma to the schedule range and
/// interpolate the tolerance exponent in log10 space with shape `p`.
pub fn rtol_for_sigma(settings: &CgSettings, sigma: f64) -> f64 {
    let clipped = sigma.clamp(settings.sigma_lo, settings.sigma_hi);
    let log_factor = ((clipped.log10() - settings.sigma_lo.log10())
        / (settings.sigma_hi.log10() - settings.sigma_lo.log10()))
    .powf(settings.exponent);
    let log_rtol =
        log_factor * (settings.rtol_max.log10() - settings.rtol_min.log10()) + settings.rtol_min.log10();
    10f64.powf(log_rtol)
}

/// Outcome of a conjugate-gradient solve.
#[derive(Debug, Clone)]
pub struct CgOutcome {
    pub solution: DVector<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// True residual norm `|op(z) - b|` recomputed at exit.
    pub residual_norm: f64,
    pub rhs_norm: f64,
}

/// Preconditioned conjugate gradients on a symmetric positive-definite
/// operator given as a matvec. Terminates when the residual drops below
/// `rtol * |b|`; returns the best iterate with `converged = false` after
/// `max_iterations` otherwise.
pub fn cg_solve(
    apply_op: impl Fn(&DVector<f64>) -> DVector<f64>,
    b: &DVector<f64>,
    rtol: f64,
    max_iterations: usize,
    jacobi_diag: Option<&DVector<f64>>,
) -> Result<CgOutcome> {
    let n = b.len();
    let rhs_norm = b.norm();
    if rhs_norm == 0.0 {
        return Ok(CgOutcome {
            solution: DVector::zeros(n),
            converged: true,
            iterations: 0,
            residual_norm: 0.0,
            rhs_norm,
        });
    }
    let precond = |r: &DVector<f64>| -> DVector<f64> {
        match jacobi_diag {
            Some(d) => DVector::from_fn(n, |i, _| r[i] / d[i]),
            None => r.clone(),
        }
    };
    if let Some(d) = jacobi_diag {
        if d.iter().any(|&x| !(x > 0.0)) {
            return Err(FhError::domain("Jacobi preconditioner needs a positive diagonal"));
        }
    }

    let mut x = DVector::zeros(n);
    let mut r = b.clone();
    let mut z = precond(&r);
    let mut p = z.clone();
    let mut rz = r.dot(&z);
    let target = rtol * rhs_norm;
    let mut iterations = 0;

    // terminate on the recurrence residual at half the target, then verify
    // the true residual below
    while iterations < max_iterations && r.norm() > 0.5 * target {
        let ap = apply_op(&p);
        let p_ap = p.dot(&ap);
        if !p_ap.is_finite() || p_ap <= 0.0 {
            return Err(FhError::NumericalBreakdown(format!(
                "conjugate gradients: curvature p^T A p = {p_ap:.3e}"
            )));
        }
        let alpha = rz / p_ap;
        x += &p * alpha;
        r -= &ap * alpha;
        if r.iter().any(|v| !v.is_finite()) {
            return Err(FhError::NumericalBreakdown(
                "conjugate gradients: non-finite residual".into(),
            ));
        }
        z = precond(&r);
        let rz_new = r.dot(&z);
        let beta = rz_new / rz;
        rz = rz_new;
        p = &z + &p * beta;
        iterations += 1;
    }

    let residual_norm = (apply_op(&x) - b).norm();
    Ok(CgOutcome {
        converged: residual_norm <= target.max(f64::EPSILON * rhs_norm),
        solution: x,
        iterations,
        residual_norm,
        rhs_norm,
    })
}

/// How the denoiser-mean Jacobian factor in the guidance formula is formed.
pub enum JacobianFactor<'a> {
    /// Exact Jacobian `Cov[x0|xt] / sigma^2` supplied as a matvec, with the
    /// norm-triggered fallback to the tracked-covariance approximation when
    /// `max|sigma^2 g|` exceeds `fallback_threshold`.
    ExactOracle {
        cov_apply: &'a dyn Fn(&DVector<f64>) -> DVector<f64>,
        fallback_threshold: f64,
    },
    /// Tracked covariance over sigma^2 (the fallback form used directly).
    CovarianceApprox,
    /// Treat the Jacobian as the identity.
    Identity,
}

/// Reconstruction-guidance gradient with solve diagnostics.
#[derive(Debug, Clone)]
pub struct GuidanceResult {
    pub gradient: DVector<f64>,
    pub cg_iterations: usize,
    pub cg_converged: bool,
    pub cg_residual_norm: f64,
    pub cg_rhs_norm: f64,
    pub fell_back: bool,
}

/// Matvec with the covariance placed inside the innovation system.
pub type CovarianceMatVec<'a> = &'a dyn Fn(&DVector<f64>) -> DVector<f64>;

fn solve_innovation(
    moments: &DenoiserMoments,
    obs: &LinearObservation,
    cg: &CgSettings,
    cov_override: Option<CovarianceMatVec>,
) -> Result<CgOutcome> {
    let a = &obs.operator;
    if a.in_dim() != moments.dim() {
        return Err(FhError::contract("operator input dimension mismatch"));
    }
    let sy2 = obs.noise_std * obs.noise_std;
    let residual = &obs.y - a.apply(&moments.mean);
    let apply_cov = |v: &DVector<f64>| -> DVector<f64> {
        match cov_override {
            Some(f) => f(v),
            None => moments
                .cov_apply_signal(v)
                .expect("covariance matvec on validated dimensions"),
        }
    };
    let op = |v: &DVector<f64>| a.apply(&apply_cov(&a.apply_transpose(v))) + v * sy2;
    let diag = a.diag_quadratic(apply_cov).add_scalar(sy2);
    let precond = if diag.iter().all(|&d| d > 0.0) {
        Some(diag)
    } else {
        None
    };
    let rtol = rtol_for_sigma(cg, moments.sigma);
    cg_solve(op, &residual, rtol, cg.max_iterations, precond.as_ref())
}

/// Guidance gradient `grad log p(y | x_t)` per the linear-Gaussian formula:
/// solve the innovation system under the moment covariance, then compose
/// with the Jacobian factor. The exact-Jacobian route falls back to the
/// covariance approximation when the guidance scale leaves the data range.
pub fn reconstruction_guidance(
    moments: &DenoiserMoments,
    obs: &LinearObservation,
    jacobian: &JacobianFactor,
    cg: &CgSettings,
) -> Result<GuidanceResult> {
    let outcome = solve_innovation(moments, obs, cg, None)?;
    let base = obs.operator.apply_transpose(&outcome.solution);
    let s2 = moments.sigma * moments.sigma;

    let (gradient, fell_back) = match jacobian {
        JacobianFactor::Identity => (base, false),
        JacobianFactor::CovarianceApprox => (moments.cov_apply_signal(&base)? / s2, false),
        JacobianFactor::ExactOracle {
            cov_apply,
            fallback_threshold,
        } => {
            let g = cov_apply(&base) / s2;
            let scale = g.amax() * s2;
            if scale > *fallback_threshold {
                (moments.cov_apply_signal(&base)? / s2, true)
            } else {
                (g, false)
            }
        }
    };
    Ok(GuidanceResult {
        gradient,
        cg_iterations: outcome.iterations,
        cg_converged: outcome.converged,
        cg_residual_norm: outcome.residual_norm,
        cg_rhs_norm: outcome.rhs_norm,
        fell_back,
    })
}

/// Covariance rule used inside the innovation system, with the rule's
/// post-processing applied to the result.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BaselineRule {
    /// Zero covariance; result scaled by `xi sigma_y^2 / |y - A mu|`.
    Dps { xi: f64 },
    /// `r^2 I` with `r^2 = sigma^2 / (1 + sigma^2)`; result scaled by `r^2`.
    PiGdm,
    /// PiGDM without the final `r^2` scaling.
    PiGdmNoScale,
    /// `sigma^2 I`, no post-scale.
    HeuristicSigma,
    /// Tracked covariance through `reconstruction_guidance`.
    FreeHunch,
}

/// Clipping of the implied denoiser mean `x + sigma^2 (score + g)`.
#[derive(Debug, Clone, Copy)]
pub struct ClipConfig {
    pub enabled: bool,
    pub lo: f64,
    pub hi: f64,
}

impl ClipConfig {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            lo: -1.0,
            hi: 1.0,
        }
    }

    pub fn data_range() -> Self {
        Self {
            enabled: true,
            lo: -1.0,
            hi: 1.0,
        }
    }
}

/// Baseline guidance rules; `score` is the unconditional score at the same
/// point, needed to clip the implied denoiser mean.
pub fn baseline_guidance(
    rule: BaselineRule,
    moments: &DenoiserMoments,
    obs: &LinearObservation,
    score: &DVector<f64>,
    jacobian: &JacobianFactor,
    cg: &CgSettings,
    clip: ClipConfig,
) -> Result<GuidanceResult> {
    let s2 = moments.sigma * moments.sigma;
    let mut result = match rule {
        BaselineRule::FreeHunch => reconstruction_guidance(moments, obs, jacobian, cg)?,
        BaselineRule::Dps { xi } => {
            if !(xi > 0.0) {
                return Err(FhError::contract("DPS guidance scale must be positive"));
            }
            let sy2 = obs.noise_std * obs.noise_std;
            if sy2 <= 0.0 {
                return Err(FhError::domain("DPS requires sigma_y > 0"));
            }
            let residual = &obs.y - obs.operator.apply(&moments.mean);
            let res_norm = residual.norm();
            if res_norm == 0.0 {
                // zero residual: guidance vanishes in the limit
                GuidanceResult {
                    gradient: DVector::zeros(moments.dim()),
                    cg_iterations: 0,
                    cg_converged: true,
                    cg_residual_norm: 0.0,
                    cg_rhs_norm: 0.0,
                    fell_back: false,
                }
            } else {
                let base = obs.operator.apply_transpose(&(residual / sy2));
                let gradient = apply_jacobian(&base, moments, jacobian, s2)?;
                let scale = xi * sy2 / res_norm;
                GuidanceResult {
                    gradient: gradient * scale,
                    cg_iterations: 0,
                    cg_converged: true,
                    cg_residual_norm: 0.0,
                    cg_rhs_norm: res_norm,
                    fell_back: false,
                }
            }
        }
        BaselineRule::PiGdm | BaselineRule::PiGdmNoScale | BaselineRule::HeuristicSigma => {
            let r2 = match rule {
                BaselineRule::HeuristicSigma => s2,
                _ => s2 / (1.0 + s2),
            };
            let override_cov = move |v: &DVector<f64>| v * r2;
            let outcome = solve_innovation(moments, obs, cg, Some(&override_cov))?;
            let base = obs.operator.apply_transpose(&outcome.solution);
            let mut gradient = apply_jacobian(&base, moments, jacobian, s2)?;
            if rule == BaselineRule::PiGdm {
                gradient *= r2;
            }
            GuidanceResult {
                gradient,
                cg_iterations: outcome.iterations,
                cg_converged: outcome.converged,
                cg_residual_norm: outcome.residual_norm,
                cg_rhs_norm: outcome.rhs_norm,
                fell_back: false,
            }
        }
    };

    if clip.enabled {
        // clip the implied denoiser mean, then translate back to a gradient
        let implied = &moments.location + (score + &result.gradient) * s2;
        let clipped = implied.map(|v| v.clamp(clip.lo, clip.hi));
        if clipped != implied {
            result.gradient = (clipped - &moments.location) / s2 - score;
        }
    }
    Ok(result)
}

fn apply_jacobian(
    base: &DVector<f64>,
    moments: &DenoiserMoments,
    jacobian: &JacobianFactor,
    s2: f64,
) -> Result<DVector<f64>> {
    Ok(match jacobian {
        JacobianFactor::Identity => base.clone(),
        JacobianFactor::CovarianceApprox => moments.cov_apply_signal(base)? / s2,
        JacobianFactor::ExactOracle { cov_apply, .. } => cov_apply(base) / s2,
    })
}
