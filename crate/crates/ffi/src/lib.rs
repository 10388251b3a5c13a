//! C ABI over the covariance-tracking and guidance library: opaque handles,
//! status codes, and a thread-local last-error message. The generated header
//! lives at `include/fh.h`.
//!
//! Conventions: matrices cross the boundary in row-major order, every
//! function returns an [`FhStatus`], and nothing panics across the boundary.
//! Pointer and length contracts are stated on each function; null checks
//! happen first and violations surface as status codes.

#![allow(clippy::missing_safety_doc)]
#![allow(clippy::too_many_arguments)]

use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;

use fh_core::error::FhError;
use fh_core::guidance::{reconstruction_guidance, CgSettings, JacobianFactor};
use fh_core::matrix::{CovarianceBackend, DenseSymMatrix};
use fh_core::mixture::{GaussianMixture, LinearObservation, LinearOperator};
use fh_core::tracker::{
    CovarianceTracker, DenoiserMoments, InitStrategy, MeanTransferMode, SpaceUpdateOutcome,
    TrackerConfig,
};

/// Status code returned by every FFI entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FhStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    NumericalFailure = 3,
    CapacityExceeded = 4,
    Unsupported = 5,
    InternalPanic = 6,
}

/// Outcome of one tracker update, mirrored as plain integers.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FhSpaceUpdate {
    Applied = 0,
    SkippedCurvature = 1,
    SkippedRange = 2,
    FirstCall = 3,
}

/// Mean-transfer mode for the tracker.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FhMeanTransfer {
    TimeUpdate = 0,
    ExactEvaluation = 1,
}

/// Jacobian factor selection for reconstruction guidance.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FhJacobian {
    Identity = 0,
    CovarianceApprox = 1,
    ExactCovariance = 2,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: &str) {
    let sanitized = msg.replace('\0', " ");
    LAST_ERROR.with(|e| {
        *e.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn status_of(err: &FhError) -> FhStatus {
    match err {
        FhError::Contract(_) | FhError::InvalidConfig(_) => FhStatus::InvalidArgument,
        FhError::Capacity { .. } => FhStatus::CapacityExceeded,
        FhError::UnsupportedOperator(_) => FhStatus::Unsupported,
        FhError::InsufficientData(_) => FhStatus::InvalidArgument,
        _ => FhStatus::NumericalFailure,
    }
}

fn guard(f: impl FnOnce() -> FhStatus) -> FhStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(_) => {
            set_error("internal panic");
            FhStatus::InternalPanic
        }
    }
}

/// Copies the last error message into `buffer` (truncating) and returns the
/// full message length in bytes, excluding the terminator.
#[no_mangle]
pub unsafe extern "C" fn fh_last_error_message(buffer: *mut c_char, length: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let bytes = msg.as_bytes();
        if !buffer.is_null() && length > 0 {
            let n = bytes.len().min(length - 1);
            std::ptr::copy_nonoverlapping(bytes.as_ptr() as *const c_char, buffer, n);
            *buffer.add(n) = 0;
        }
        bytes.len()
    })
}

/// Library version as a static C string.
#[no_mangle]
pub extern "C" fn fh_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Gaussian mixture handle.
pub struct FhMixture {
    inner: GaussianMixture,
}

/// Covariance tracker handle.
pub struct FhTracker {
    inner: CovarianceTracker,
    dim: usize,
}

unsafe fn slice<'a>(ptr: *const f64, len: usize) -> Option<&'a [f64]> {
    if ptr.is_null() {
        None
    } else {
        Some(std::slice::from_raw_parts(ptr, len))
    }
}

unsafe fn write_vector(out: *mut f64, v: &DVector<f64>) {
    std::ptr::copy_nonoverlapping(v.as_slice().as_ptr(), out, v.len());
}

unsafe fn write_matrix_row_major(out: *mut f64, m: &DMatrix<f64>) {
    let mut idx = 0;
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            *out.add(idx) = m[(i, j)];
            idx += 1;
        }
    }
}

/// Builds a mixture from row-major arrays: `weights` has `n_components`
/// entries, `means` is `n_components x dim`, `covariances` is
/// `n_components x dim x dim`.
#[no_mangle]
pub unsafe extern "C" fn fh_mixture_new(
    dim: usize,
    n_components: usize,
    weights: *const f64,
    means: *const f64,
    covariances: *const f64,
    out: *mut *mut FhMixture,
) -> FhStatus {
    guard(|| {
        if out.is_null() {
            set_error("out pointer is null");
            return FhStatus::NullPointer;
        }
        let (Some(w), Some(m), Some(c)) = (
            slice(weights, n_components),
            slice(means, n_components * dim),
            slice(covariances, n_components * dim * dim),
        ) else {
            set_error("mixture arrays must be non-null");
            return FhStatus::NullPointer;
        };
        let means: Vec<DVector<f64>> = (0..n_components)
            .map(|i| DVector::from_row_slice(&m[i * dim..(i + 1) * dim]))
            .collect();
        let mut covs = Vec::with_capacity(n_components);
        for i in 0..n_components {
            let block = &c[i * dim * dim..(i + 1) * dim * dim];
            match DenseSymMatrix::new(DMatrix::from_row_slice(dim, dim, block)) {
                Ok(cov) => covs.push(cov),
                Err(e) => {
                    set_error(&e.to_string());
                    return status_of(&e);
                }
            }
        }
        match GaussianMixture::new(w.to_vec(), means, covs) {
            Ok(gmm) => {
                *out = Box::into_raw(Box::new(FhMixture { inner: gmm }));
                FhStatus::Ok
            }
            Err(e) => {
                set_error(&e.to_string());
                status_of(&e)
            }
        }
    })
}

#[no_mangle]
pub unsafe extern "C" fn fh_mixture_free(mixture: *mut FhMixture) {
    if !mixture.is_null() {
        drop(Box::from_raw(mixture));
    }
}

/// Score of the sigma-smoothed mixture at `x` (length `dim`).
#[no_mangle]
pub unsafe extern "C" fn fh_mixture_score(
    mixture: *const FhMixture,
    x: *const f64,
    sigma: f64,
    out_score: *mut f64,
) -> FhStatus {
    guard(|| {
        let Some(m) = mixture.as_ref() else {
            set_error("mixture handle is null");
            return FhStatus::NullPointer;
        };
        let dim = m.inner.dim();
        let (Some(xs), false) = (slice(x, dim), out_score.is_null()) else {
            set_error("x and out_score must be non-null");
            return FhStatus::NullPointer;
        };
        match m.inner.score(&DVector::from_row_slice(xs), sigma) {
            Ok(score) => {
                write_vector(out_score, &score);
                FhStatus::Ok
            }
            Err(e) => {
                set_error(&e.to_string());
                status_of(&e)
            }
        }
    })
}

/// Exact denoiser mean and (optionally) covariance at `(x, sigma)`;
/// `out_covariance` may be null, otherwise it receives `dim x dim` row-major
/// entries.
#[no_mangle]
pub unsafe extern "C" fn fh_mixture_denoiser_moments(
    mixture: *const FhMixture,
    x: *const f64,
    sigma: f64,
    out_mean: *mut f64,
    out_covariance: *mut f64,
) -> FhStatus {
    guard(|| {
        let Some(m) = mixture.as_ref() else {
            set_error("mixture handle is null");
            return FhStatus::NullPointer;
        };
        let dim = m.inner.dim();
        let (Some(xs), false) = (slice(x, dim), out_mean.is_null()) else {
            set_error("x and out_mean must be non-null");
            return FhStatus::NullPointer;
        };
        match m.inner.denoiser_moments(&DVector::from_row_slice(xs), sigma) {
            Ok(moments) => {
                write_vector(out_mean, &moments.mean);
                if !out_covariance.is_null() {
                    write_matrix_row_major(out_covariance, moments.covariance.as_matrix());
                }
                FhStatus::Ok
            }
            Err(e) => {
                set_error(&e.to_string());
                status_of(&e)
            }
        }
    })
}

/// Draws `n_samples` mixture samples into `out` (`n_samples x dim`,
/// row-major), deterministically in `seed`.
#[no_mangle]
pub unsafe extern "C" fn fh_mixture_sample(
    mixture: *const FhMixture,
    seed: u64,
    n_samples: usize,
    out: *mut f64,
) -> FhStatus {
    guard(|| {
        let Some(m) = mixture.as_ref() else {
            set_error("mixture handle is null");
            return FhStatus::NullPointer;
        };
        if out.is_null() {
            set_error("out must be non-null");
            return FhStatus::NullPointer;
        }
        let dim = m.inner.dim();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        for i in 0..n_samples {
            let s = m.inner.sample(&mut rng);
            std::ptr::copy_nonoverlapping(s.as_slice().as_ptr(), out.add(i * dim), dim);
        }
        FhStatus::Ok
    })
}

fn transfer_mode(mode: FhMeanTransfer) -> MeanTransferMode {
    match mode {
        FhMeanTransfer::TimeUpdate => MeanTransferMode::TimeUpdate,
        FhMeanTransfer::ExactEvaluation => MeanTransferMode::ExactEvaluation,
    }
}

unsafe fn tracker_from_config(
    config: TrackerConfig,
    dim: usize,
    out: *mut *mut FhTracker,
) -> FhStatus {
    match CovarianceTracker::new(config, dim) {
        Ok(tracker) => {
            *out = Box::into_raw(Box::new(FhTracker { inner: tracker, dim }));
            FhStatus::Ok
        }
        Err(e) => {
            set_error(&e.to_string());
            status_of(&e)
        }
    }
}

/// Tracker with a scaled-identity initial covariance declared at
/// `init_sigma`. Space updates apply inside `[space_lo, space_hi]`.
#[no_mangle]
pub unsafe extern "C" fn fh_tracker_new_identity(
    dim: usize,
    scale: f64,
    init_sigma: f64,
    space_lo: f64,
    space_hi: f64,
    curvature_tolerance: f64,
    mean_transfer: FhMeanTransfer,
    out: *mut *mut FhTracker,
) -> FhStatus {
    guard(|| {
        if out.is_null() {
            set_error("out pointer is null");
            return FhStatus::NullPointer;
        }
        let mut config = TrackerConfig::new(InitStrategy::Identity { scale }, init_sigma)
            .with_space_update_range(space_lo, space_hi)
            .with_mean_transfer(transfer_mode(mean_transfer));
        config.curvature_tolerance = curvature_tolerance;
        tracker_from_config(config, dim, out)
    })
}

/// Tracker initialized at the empirical covariance of `samples`
/// (`n_samples x dim`, row-major).
#[no_mangle]
pub unsafe extern "C" fn fh_tracker_new_data_covariance(
    dim: usize,
    samples: *const f64,
    n_samples: usize,
    init_sigma: f64,
    space_lo: f64,
    space_hi: f64,
    curvature_tolerance: f64,
    mean_transfer: FhMeanTransfer,
    out: *mut *mut FhTracker,
) -> FhStatus {
    guard(|| {
        if out.is_null() {
            set_error("out pointer is null");
            return FhStatus::NullPointer;
        }
        let Some(data) = slice(samples, n_samples * dim) else {
            set_error("samples must be non-null");
            return FhStatus::NullPointer;
        };
        let rows: Vec<DVector<f64>> = (0..n_samples)
            .map(|i| DVector::from_row_slice(&data[i * dim..(i + 1) * dim]))
            .collect();
        let mut config =
            TrackerConfig::new(InitStrategy::DataCovariance { samples: rows }, init_sigma)
                .with_space_update_range(space_lo, space_hi)
                .with_mean_transfer(transfer_mode(mean_transfer));
        config.curvature_tolerance = curvature_tolerance;
        tracker_from_config(config, dim, out)
    })
}

#[no_mangle]
pub unsafe extern "C" fn fh_tracker_free(tracker: *mut FhTracker) {
    if !tracker.is_null() {
        drop(Box::from_raw(tracker));
    }
}

/// Feeds one denoiser evaluation through the tracker.
/// `exact_transferred_mean` is required in exact-evaluation transfer mode
/// once a previous call exists, and is ignored otherwise (may be null).
#[no_mangle]
pub unsafe extern "C" fn fh_tracker_process_denoiser(
    tracker: *mut FhTracker,
    denoiser_mean: *const f64,
    location: *const f64,
    sigma: f64,
    exact_transferred_mean: *const f64,
    out_outcome: *mut FhSpaceUpdate,
) -> FhStatus {
    guard(|| {
        let Some(t) = tracker.as_mut() else {
            set_error("tracker handle is null");
            return FhStatus::NullPointer;
        };
        let (Some(mu), Some(x)) = (slice(denoiser_mean, t.dim), slice(location, t.dim)) else {
            set_error("denoiser_mean and location must be non-null");
            return FhStatus::NullPointer;
        };
        let exact = slice(exact_transferred_mean, t.dim).map(DVector::from_row_slice);
        match t.inner.process_denoiser(
            &DVector::from_row_slice(mu),
            &DVector::from_row_slice(x),
            sigma,
            exact.as_ref(),
        ) {
            Ok((_, outcome)) => {
                if !out_outcome.is_null() {
                    *out_outcome = match outcome {
                        SpaceUpdateOutcome::Applied => FhSpaceUpdate::Applied,
                        SpaceUpdateOutcome::SkippedCurvature => FhSpaceUpdate::SkippedCurvature,
                        SpaceUpdateOutcome::SkippedRange => FhSpaceUpdate::SkippedRange,
                        SpaceUpdateOutcome::FirstCall => FhSpaceUpdate::FirstCall,
                    };
                }
                FhStatus::Ok
            }
            Err(e) => {
                set_error(&e.to_string());
                status_of(&e)
            }
        }
    })
}

/// Densifies the tracker's current covariance estimate (signal coordinates)
/// into `out` (`dim x dim`, row-major).
#[no_mangle]
pub unsafe extern "C" fn fh_tracker_covariance(
    tracker: *const FhTracker,
    out: *mut f64,
) -> FhStatus {
    guard(|| {
        let Some(t) = tracker.as_ref() else {
            set_error("tracker handle is null");
            return FhStatus::NullPointer;
        };
        if out.is_null() {
            set_error("out must be non-null");
            return FhStatus::NullPointer;
        }
        // densify through a moments view so basis residency is handled
        let moments = DenoiserMoments {
            mean: DVector::zeros(t.dim),
            covariance: t.inner.covariance().clone(),
            sigma: t.inner.current_sigma(),
            location: DVector::zeros(t.dim),
            basis: t.inner.basis().cloned(),
        };
        match moments.cov_dense_signal() {
            Ok(dense) => {
                write_matrix_row_major(out, dense.as_matrix());
                FhStatus::Ok
            }
            Err(e) => {
                set_error(&e.to_string());
                status_of(&e)
            }
        }
    })
}

/// Reconstruction guidance for a linear-Gaussian observation with a dense
/// (or identity, when `operator` is null) measurement matrix.
///
/// `covariance` is the moment covariance (dense `dim x dim`), `operator` is
/// `y_len x dim` row-major. The Jacobian factor uses the same covariance in
/// `ExactCovariance` mode.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn fh_guidance_reconstruction(
    dim: usize,
    denoiser_mean: *const f64,
    covariance: *const f64,
    sigma: f64,
    operator: *const f64,
    y: *const f64,
    y_len: usize,
    sigma_y: f64,
    jacobian: FhJacobian,
    fallback_threshold: f64,
    cg_rtol: f64,
    cg_max_iterations: usize,
    out_gradient: *mut f64,
) -> FhStatus {
    guard(|| {
        let (Some(mean), Some(cov), Some(ys), false) = (
            slice(denoiser_mean, dim),
            slice(covariance, dim * dim),
            slice(y, y_len),
            out_gradient.is_null(),
        ) else {
            set_error("mean, covariance, y, and out_gradient must be non-null");
            return FhStatus::NullPointer;
        };
        let cov_matrix = match DenseSymMatrix::new(DMatrix::from_row_slice(dim, dim, cov)) {
            Ok(c) => c,
            Err(e) => {
                set_error(&e.to_string());
                return status_of(&e);
            }
        };
        let op = match slice(operator, y_len * dim) {
            Some(a) => LinearOperator::Dense(DMatrix::from_row_slice(y_len, dim, a)),
            None => {
                if y_len != dim {
                    set_error("identity operator requires y_len == dim");
                    return FhStatus::InvalidArgument;
                }
                LinearOperator::Identity { dim }
            }
        };
        let observation = match LinearObservation::new(op, DVector::from_row_slice(ys), sigma_y) {
            Ok(o) => o,
            Err(e) => {
                set_error(&e.to_string());
                return status_of(&e);
            }
        };
        let moments = match DenoiserMoments::new(
            DVector::from_row_slice(mean),
            CovarianceBackend::Dense(cov_matrix.clone()),
            sigma,
            DVector::zeros(dim),
        ) {
            Ok(m) => m,
            Err(e) => {
                set_error(&e.to_string());
                return status_of(&e);
            }
        };
        let cg = CgSettings {
            rtol_max: cg_rtol,
            rtol_min: cg_rtol,
            max_iterations: cg_max_iterations,
            ..CgSettings::default()
        };
        let exact = cov_matrix.as_matrix().clone();
        let cov_apply = move |v: &DVector<f64>| &exact * v;
        let factor = match jacobian {
            FhJacobian::Identity => JacobianFactor::Identity,
            FhJacobian::CovarianceApprox => JacobianFactor::CovarianceApprox,
            FhJacobian::ExactCovariance => JacobianFactor::ExactOracle {
                cov_apply: &cov_apply,
                fallback_threshold,
            },
        };
        match reconstruction_guidance(&moments, &observation, &factor, &cg) {
            Ok(result) => {
                write_vector(out_gradient, &result.gradient);
                if result.cg_converged {
                    FhStatus::Ok
                } else {
                    set_error("conjugate gradients did not reach the requested tolerance");
                    FhStatus::NumericalFailure
                }
            }
            Err(e) => {
                set_error(&e.to_string());
                status_of(&e)
            }
        }
    })
}
