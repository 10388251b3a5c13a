//! Closed-form scores, denoiser moments, and conditional posteriors for
//! Gaussian-mixture data under the variance-exploding forward process.
//!
//! The mixture doubles as the "trained model" in the synthetic experiments
//! and as the ground-truth oracle in tests: every quantity here is exact up
//! to floating point.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{FhError, Result};
use crate::linalg;
use crate::matrix::DenseSymMatrix;

/// Linear measurement operator. Structured forms avoid materializing the
/// matrix where possible.
#[derive(Debug, Clone)]
pub enum LinearOperator {
    Identity { dim: usize },
    /// Keeps the listed coordinates (a row subset of the identity).
    Mask { kept: Vec<usize>, dim: usize },
    Dense(DMatrix<f64>),
}

impl LinearOperator {
    /// Dense operator formed from a 1-D convolution kernel (zero-padded,
    /// same-length output).
    pub fn convolution_1d(kernel: &[f64], dim: usize) -> Result<Self> {
        if kernel.is_empty() {
            return Err(FhError::contract("convolution kernel must be nonempty"));
        }
        let half = kernel.len() / 2;
        let mut a = DMatrix::zeros(dim, dim);
        for i in 0..dim {
            for (k, &w) in kernel.iter().enumerate() {
                let j = i as isize + k as isize - half as isize;
                if j >= 0 && (j as usize) < dim {
                    a[(i, j as usize)] += w;
                }
            }
        }
        Ok(LinearOperator::Dense(a))
    }

    pub fn in_dim(&self) -> usize {
        match self {
            LinearOperator::Identity { dim } => *dim,
            LinearOperator::Mask { dim, .. } => *dim,
            LinearOperator::Dense(a) => a.ncols(),
        }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            LinearOperator::Identity { dim } => *dim,
            LinearOperator::Mask { kept, .. } => kept.len(),
            LinearOperator::Dense(a) => a.nrows(),
        }
    }

    pub fn is_identity(&self) -> bool {
        matches!(self, LinearOperator::Identity { .. })
    }

    pub fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        match self {
            LinearOperator::Identity { .. } => v.clone(),
            LinearOperator::Mask { kept, .. } => DVector::from_fn(kept.len(), |i, _| v[kept[i]]),
            LinearOperator::Dense(a) => a * v,
        }
    }

    pub fn apply_transpose(&self, v: &DVector<f64>) -> DVector<f64> {
        match self {
            LinearOperator::Identity { .. } => v.clone(),
            LinearOperator::Mask { kept, dim } => {
                let mut out = DVector::zeros(*dim);
                for (i, &j) in kept.iter().enumerate() {
                    out[j] = v[i];
                }
                out
            }
            LinearOperator::Dense(a) => a.transpose() * v,
        }
    }

    /// i-th row as a vector (used for diagonal extraction).
    fn row(&self, i: usize) -> DVector<f64> {
        match self {
            LinearOperator::Identity { dim } => {
                let mut e = DVector::zeros(*dim);
                e[i] = 1.0;
                e
            }
            LinearOperator::Mask { kept, dim } => {
                let mut e = DVector::zeros(*dim);
                e[kept[i]] = 1.0;
                e
            }
            LinearOperator::Dense(a) => a.row(i).transpose(),
        }
    }

    /// diag(A S A^T) given a matvec for S.
    pub fn diag_quadratic(&self, apply_s: impl Fn(&DVector<f64>) -> DVector<f64>) -> DVector<f64> {
        DVector::from_fn(self.out_dim(), |i, _| {
            let r = self.row(i);
            r.dot(&apply_s(&r))
        })
    }
}

/// Linear-Gaussian observation `y = A x + noise`, noise std `sigma_y`.
///
/// `sigma_y = 0` is accepted so noiseless guidance identities can be
/// exercised; operations that condition on the observation (posteriors,
/// conditional scores) require a strictly positive value.
#[derive(Debug, Clone)]
pub struct LinearObservation {
    pub operator: LinearOperator,
    pub y: DVector<f64>,
    pub noise_std: f64,
}

impl LinearObservation {
    pub fn new(operator: LinearOperator, y: DVector<f64>, noise_std: f64) -> Result<Self> {
        if y.len() != operator.out_dim() {
            return Err(FhError::contract(
                "observation length does not match operator output dimension",
            ));
        }
        if !(noise_std >= 0.0) || !noise_std.is_finite() {
            return Err(FhError::contract("observation noise must be finite and >= 0"));
        }
        Ok(Self { operator, y, noise_std })
    }

    fn require_identity(&self, what: &str) -> Result<()> {
        if !self.operator.is_identity() {
            return Err(FhError::UnsupportedOperator(format!(
                "{what} requires an identity measurement operator"
            )));
        }
        Ok(())
    }

    fn require_noise(&self, what: &str) -> Result<()> {
        if self.noise_std <= 0.0 {
            return Err(FhError::domain(format!("{what} requires sigma_y > 0")));
        }
        Ok(())
    }
}

/// Noise schedule sigma(t) = t with clamped working range.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub sigma_min: f64,
    pub sigma_max: f64,
}

impl NoiseSchedule {
    pub fn new(sigma_min: f64, sigma_max: f64) -> Result<Self> {
        if !(sigma_min > 0.0 && sigma_max > sigma_min) {
            return Err(FhError::contract("need 0 < sigma_min < sigma_max"));
        }
        Ok(Self { sigma_min, sigma_max })
    }

    pub fn sigma(&self, t: f64) -> f64 {
        t
    }
}

/// Mixture of Gaussians with validated simplex weights and SPD components.
#[derive(Debug, Clone)]
pub struct GaussianMixture {
    weights: Vec<f64>,
    means: Vec<DVector<f64>>,
    covariances: Vec<DenseSymMatrix>,
}

/// Exact denoiser moments E[x0 | xt] and Cov[x0 | xt] at a noise level.
#[derive(Debug, Clone)]
pub struct OracleMoments {
    pub mean: DVector<f64>,
    pub covariance: DenseSymMatrix,
    pub score: DVector<f64>,
}

impl GaussianMixture {
    pub fn new(
        weights: Vec<f64>,
        means: Vec<DVector<f64>>,
        covariances: Vec<DenseSymMatrix>,
    ) -> Result<Self> {
        if weights.is_empty() || weights.len() != means.len() || weights.len() != covariances.len() {
            return Err(FhError::contract("mixture component counts must match and be nonzero"));
        }
        let dim = means[0].len();
        if means.iter().any(|m| m.len() != dim) || covariances.iter().any(|c| c.dim() != dim) {
            return Err(FhError::contract("mixture component dimensions must agree"));
        }
        if weights.iter().any(|&w| !(w > 0.0)) {
            return Err(FhError::contract("mixture weights must be strictly positive"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(FhError::contract(format!(
                "mixture weights must sum to 1 (got {total})"
            )));
        }
        for c in &covariances {
            if !c.is_positive_definite() {
                return Err(FhError::domain("mixture component covariance not positive definite"));
            }
        }
        Ok(Self { weights, means, covariances })
    }

    /// Single Gaussian as a 1-component mixture.
    pub fn single(mean: DVector<f64>, covariance: DenseSymMatrix) -> Result<Self> {
        Self::new(vec![1.0], vec![mean], vec![covariance])
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[DVector<f64>] {
        &self.means
    }

    pub fn covariances(&self) -> &[DenseSymMatrix] {
        &self.covariances
    }

    /// Mixture mean.
    pub fn mean(&self) -> DVector<f64> {
        let mut m = DVector::zeros(self.dim());
        for (w, mu) in self.weights.iter().zip(&self.means) {
            m += mu * *w;
        }
        m
    }

    /// Total covariance sum_i w_i (S_i + mu_i mu_i^T) - m m^T.
    pub fn total_covariance(&self) -> DenseSymMatrix {
        let m = self.mean();
        let mut c = DMatrix::zeros(self.dim(), self.dim());
        for i in 0..self.n_components() {
            c += (self.covariances[i].as_matrix() + &self.means[i] * self.means[i].transpose())
                * self.weights[i];
        }
        c -= &m * m.transpose();
        DenseSymMatrix::new(c).expect("total covariance is symmetric")
    }

    pub fn sample(&self, rng: &mut impl Rng) -> DVector<f64> {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut idx = self.weights.len() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u <= acc {
                idx = i;
                break;
            }
        }
        let chol = self.covariances[idx]
            .as_matrix()
            .clone()
            .cholesky()
            .expect("component covariance is SPD");
        let z = DVector::from_fn(self.dim(), |_, _| rng.sample(StandardNormal));
        &self.means[idx] + chol.l() * z
    }

    pub fn sample_n(&self, rng: &mut impl Rng, n: usize) -> Vec<DVector<f64>> {
        (0..n).map(|_| self.sample(rng)).collect()
    }

    fn check_point(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.dim() {
            return Err(FhError::contract("point dimension does not match mixture"));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(FhError::contract("point has non-finite entries"));
        }
        Ok(())
    }

    /// Per-component responsibilities and solves shared by the score and
    /// moment computations at noise level `sigma`.
    fn smoothed_components(&self, x: &DVector<f64>, sigma: f64) -> Result<SmoothedEval> {
        self.check_point(x)?;
        if !(sigma >= 0.0) || !sigma.is_finite() {
            return Err(FhError::contract("sigma must be finite and >= 0"));
        }
        let k = self.n_components();
        let mut log_terms = Vec::with_capacity(k);
        let mut solved = Vec::with_capacity(k);
        for i in 0..k {
            let smoothed = self.covariances[i].add_scalar_diagonal(sigma * sigma);
            let chol = smoothed
                .as_matrix()
                .clone()
                .cholesky()
                .ok_or_else(|| FhError::domain("smoothed component covariance not PD"))?;
            let diff = x - &self.means[i];
            let s = chol.solve(&diff); // (S_i + sigma^2 I)^{-1} (x - mu_i)
            let log_det: f64 = chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>() * 2.0;
            let quad = diff.dot(&s);
            let log_n = -0.5
                * (self.dim() as f64 * (2.0 * std::f64::consts::PI).ln() + log_det + quad);
            log_terms.push(self.weights[i].ln() + log_n);
            solved.push(s);
        }
        let log_density = linalg::log_sum_exp(&log_terms);
        let responsibilities: Vec<f64> = log_terms
            .iter()
            .map(|&lt| {
                let r = (lt - log_density).exp();
                if r < 1e-300 {
                    0.0
                } else {
                    r
                }
            })
            .collect();
        Ok(SmoothedEval {
            log_density,
            responsibilities,
            solved,
        })
    }

    /// log p(x_t) of the sigma-smoothed mixture; sigma = 0 evaluates the raw
    /// mixture.
    pub fn log_density(&self, x: &DVector<f64>, sigma: f64) -> Result<f64> {
        Ok(self.smoothed_components(x, sigma)?.log_density)
    }

    /// Score of the sigma-smoothed mixture.
    pub fn score(&self, x: &DVector<f64>, sigma: f64) -> Result<DVector<f64>> {
        if !(sigma > 0.0) {
            return Err(FhError::contract("score requires sigma > 0"));
        }
        let eval = self.smoothed_components(x, sigma)?;
        Ok(eval.score(self.dim()))
    }

    /// Exact denoiser moments at (x, sigma). The returned mean satisfies
    /// `mean = x + sigma^2 * score` by construction (same responsibilities
    /// and solves on both paths).
    pub fn denoiser_moments(&self, x: &DVector<f64>, sigma: f64) -> Result<OracleMoments> {
        if !(sigma > 0.0) {
            return Err(FhError::contract("denoiser moments require sigma > 0"));
        }
        let eval = self.smoothed_components(x, sigma)?;
        let score = eval.score(self.dim());
        let mean = x + &score * (sigma * sigma);

        // Component posterior moments: mu~_i = x - sigma^2 s_i,
        // S~_i = S_i - C^T C with C = L^{-1} S_i from B_i = L L^T.
        let mut cov = DMatrix::zeros(self.dim(), self.dim());
        for i in 0..self.n_components() {
            let r = eval.responsibilities[i];
            if r == 0.0 {
                continue;
            }
            let smoothed = self.covariances[i].add_scalar_diagonal(sigma * sigma);
            let chol = smoothed
                .as_matrix()
                .clone()
                .cholesky()
                .expect("checked PD above");
            let mut c = self.covariances[i].as_matrix().clone();
            chol.l().solve_lower_triangular_mut(&mut c); // C = L^{-1} S_i
            let cond_cov = self.covariances[i].as_matrix() - c.transpose() * &c;
            let mu_i = x - &eval.solved[i] * (sigma * sigma);
            cov += (cond_cov + &mu_i * mu_i.transpose()) * r;
        }
        cov -= &mean * mean.transpose();
        Ok(OracleMoments {
            mean,
            covariance: DenseSymMatrix::new(linalg::symmetrize(&cov))?,
            score,
        })
    }

    /// Exact conditional score grad log p(x_t | y) for an identity operator
    /// and Gaussian observation noise.
    pub fn conditional_score(
        &self,
        obs: &LinearObservation,
        x: &DVector<f64>,
        sigma: f64,
    ) -> Result<DVector<f64>> {
        obs.require_identity("conditional score")?;
        obs.require_noise("conditional score")?;
        if !(sigma > 0.0) {
            return Err(FhError::contract("conditional score requires sigma > 0"));
        }
        self.check_point(x)?;
        let mean = self.conditional_denoiser_mean(obs, x, sigma)?;
        Ok((mean - x) / (sigma * sigma))
    }

    /// E[x0 | x_t, y] for identity A: posterior mixture with reweighted
    /// components and three-precision conjugate updates.
    pub fn conditional_denoiser_mean(
        &self,
        obs: &LinearObservation,
        x: &DVector<f64>,
        sigma: f64,
    ) -> Result<DVector<f64>> {
        obs.require_identity("conditional denoiser mean")?;
        obs.require_noise("conditional denoiser mean")?;
        let n = self.dim();
        if obs.y.len() != n {
            return Err(FhError::contract("observation dimension mismatch"));
        }
        let sy2 = obs.noise_std * obs.noise_std;
        let s2 = sigma * sigma;
        let k = self.n_components();

        let mut log_w = Vec::with_capacity(k);
        let mut mus = Vec::with_capacity(k);
        for i in 0..k {
            let si = self.covariances[i].as_matrix();
            let smoothed = self.covariances[i].add_scalar_diagonal(s2);
            let lx = linalg::gaussian_log_density(x, &self.means[i], smoothed.as_matrix())?;
            // Component evidence for y given x_t: y | x_t, i is Gaussian
            // around the x_t-conditioned component mean a_i with covariance
            // sy2 I + A_i (x_t and y are coupled through x0, so the marginal
            // N(y | mu_i, sy2 I + S_i) would be exact only as sigma -> inf).
            let chol = smoothed
                .as_matrix()
                .clone()
                .cholesky()
                .ok_or_else(|| FhError::domain("smoothed component covariance not PD"))?;
            let a_i = &self.means[i] + si * chol.solve(&(x - &self.means[i]));
            let mut c = si.clone();
            chol.l().solve_lower_triangular_mut(&mut c);
            let cond_cov = si - c.transpose() * &c;
            let ly = linalg::gaussian_log_density(
                &obs.y,
                &a_i,
                &(cond_cov + DMatrix::<f64>::identity(n, n) * sy2),
            )?;
            log_w.push(self.weights[i].ln() + lx + ly);

            // S'_i = (1/s2 I + 1/sy2 I + S_i^{-1})^{-1},
            // mu'_i = S'_i (x/s2 + y/sy2 + S_i^{-1} mu_i)
            let si_chol = si
                .clone()
                .cholesky()
                .ok_or_else(|| FhError::domain("component covariance not PD"))?;
            let prec = si_chol.inverse()
                + DMatrix::<f64>::identity(n, n) * (1.0 / s2 + 1.0 / sy2);
            let prec_chol = prec
                .cholesky()
                .ok_or_else(|| FhError::domain("posterior precision not PD"))?;
            let rhs = x / s2 + &obs.y / sy2 + si_chol.solve(&self.means[i]);
            mus.push(prec_chol.solve(&rhs));
        }
        let log_norm = linalg::log_sum_exp(&log_w);
        let mut mean = DVector::zeros(n);
        for i in 0..k {
            let w = (log_w[i] - log_norm).exp();
            if w >= 1e-300 {
                mean += &mus[i] * w;
            }
        }
        Ok(mean)
    }

    /// The exact posterior p(x0 | y) for identity A, as another mixture.
    pub fn posterior_given_y(&self, obs: &LinearObservation) -> Result<GaussianMixture> {
        obs.require_identity("posterior")?;
        obs.require_noise("posterior")?;
        let n = self.dim();
        if obs.y.len() != n {
            return Err(FhError::contract("observation dimension mismatch"));
        }
        let sy2 = obs.noise_std * obs.noise_std;
        let k = self.n_components();

        let mut log_w = Vec::with_capacity(k);
        let mut means = Vec::with_capacity(k);
        let mut covs = Vec::with_capacity(k);
        for i in 0..k {
            let si = self.covariances[i].as_matrix();
            let smoothed = self.covariances[i].add_scalar_diagonal(sy2);
            log_w.push(
                self.weights[i].ln()
                    + linalg::gaussian_log_density(&obs.y, &self.means[i], smoothed.as_matrix())?,
            );
            let chol = smoothed
                .as_matrix()
                .clone()
                .cholesky()
                .expect("SPD by construction");
            // conjugate update: mu^ = mu + S (S + sy2 I)^{-1} (y - mu),
            //                   S^ = S - C^T C, C = L^{-1} S
            let diff = &obs.y - &self.means[i];
            means.push(&self.means[i] + si * chol.solve(&diff));
            let mut c = si.clone();
            chol.l().solve_lower_triangular_mut(&mut c);
            covs.push(DenseSymMatrix::new(linalg::symmetrize(
                &(si - c.transpose() * &c),
            ))?);
        }
        let log_norm = linalg::log_sum_exp(&log_w);
        let weights: Vec<f64> = log_w.iter().map(|&lw| (lw - log_norm).exp()).collect();
        // renormalize exactly to protect the simplex invariant
        let total: f64 = weights.iter().sum();
        GaussianMixture::new(weights.into_iter().map(|w| w / total).collect(), means, covs)
    }
}

struct SmoothedEval {
    log_density: f64,
    responsibilities: Vec<f64>,
    /// (S_i + sigma^2 I)^{-1} (x - mu_i) per component.
    solved: Vec<DVector<f64>>,
}

impl SmoothedEval {
    fn score(&self, dim: usize) -> DVector<f64> {
        let mut s = DVector::zeros(dim);
        for (r, sol) in self.responsibilities.iter().zip(&self.solved) {
            if *r > 0.0 {
                s -= sol * *r;
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn unit_gaussian(dim: usize) -> GaussianMixture {
        GaussianMixture::single(DVector::zeros(dim), DenseSymMatrix::identity(dim)).unwrap()
    }


    fn fd_gradient(
        f: impl Fn(&DVector<f64>) -> f64,
        x: &DVector<f64>,
        h: f64,
    ) -> DVector<f64> {
        DVector::from_fn(x.len(), |i, _| {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            (f(&xp) - f(&xm)) / (2.0 * h)
        })
    }

    fn fd_hessian(f: impl Fn(&DVector<f64>) -> f64 + Copy, x: &DVector<f64>, h: f64) -> DMatrix<f64> {
        let n = x.len();
        DMatrix::from_fn(n, n, |i, j| {
            let mut xpp = x.clone();
            let mut xpm = x.clone();
            let mut xmp = x.clone();
            let mut xmm = x.clone();
            xpp[i] += h;
            xpp[j] += h;
            xpm[i] += h;
            xpm[j] -= h;
            xmp[i] -= h;
            xmp[j] += h;
            xmm[i] -= h;
            xmm[j] -= h;
            (f(&xpp) - f(&xpm) - f(&xmp) + f(&xmm)) / (4.0 * h * h)
        })
    }

    #[test]
    fn validation_rejects_bad_weights() {
        let cov = DenseSymMatrix::identity(1);
        assert!(GaussianMixture::new(
            vec![0.6, 0.6],
            vec![DVector::zeros(1), DVector::zeros(1)],
            vec![cov.clone(), cov.clone()]
        )
        .is_err());
        assert!(GaussianMixture::new(vec![1.0], vec![DVector::zeros(1)], vec![cov]).is_ok());
    }

    #[test]
    fn single_gaussian_score() {
        let gmm = unit_gaussian(2);
        let x = DVector::from_vec(vec![2.0, 0.0]);
        let s = gmm.score(&x, 1.0).unwrap();
        assert_relative_eq!(s[0], -1.0, epsilon = 1e-14);
        assert_relative_eq!(s[1], 0.0, epsilon = 1e-14);
    }

    #[test]
    fn log_density_standard_normal_at_mode() {
        let gmm = unit_gaussian(2);
        let got = gmm.log_density(&DVector::zeros(2), 0.0).unwrap();
        assert_relative_eq!(got, -(2.0 * std::f64::consts::PI).ln(), epsilon = 1e-14);
    }

    #[test]
    fn density_integrates_to_one_on_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let gmm = crate::test_support::random_mixture_2d(&mut rng, 3);
        let sigma = 0.5;
        let (lo, hi, n) = (-9.0, 9.0, 600);
        let h = (hi - lo) / n as f64;
        let mut total = 0.0;
        for i in 0..n {
            for j in 0..n {
                let x = DVector::from_vec(vec![lo + (i as f64 + 0.5) * h, lo + (j as f64 + 0.5) * h]);
                total += gmm.log_density(&x, sigma).unwrap().exp() * h * h;
            }
        }
        assert!((total - 1.0).abs() < 1e-3, "integral {total}");
    }

    #[test]
    fn density_decreases_along_rays_for_single_gaussian() {
        let gmm = unit_gaussian(2);
        let dir = DVector::from_vec(vec![0.6, -0.8]);
        let mut prev = f64::INFINITY;
        for k in 0..10 {
            let x = &dir * (k as f64 * 0.5);
            let ld = gmm.log_density(&x, 0.7).unwrap();
            assert!(ld < prev);
            prev = ld;
        }
    }

    #[test]
    fn symmetric_mixture_score_points_to_other_component() {
        // equal-covariance components symmetric about the origin; at one mean
        // the score points toward the other.
        let cov = DenseSymMatrix::identity(2);
        let mu = DVector::from_vec(vec![1.5, 0.0]);
        let gmm = GaussianMixture::new(
            vec![0.5, 0.5],
            vec![mu.clone(), -mu.clone()],
            vec![cov.clone(), cov],
        )
        .unwrap();
        let s = gmm.score(&mu, 1.0).unwrap();
        assert!(s[0] < 0.0, "score should point toward the other mode");
        let fd = fd_gradient(|x| gmm.log_density(x, 1.0).unwrap(), &mu, 1e-5);
        let rel = (&s - &fd).norm() / fd.norm();
        assert!(rel < 1e-5, "fd mismatch {rel:.2e}");
    }

    #[test]
    fn score_matches_finite_differences_randomized() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let gmm = crate::test_support::random_mixture_2d(&mut rng, 3);
        for _ in 0..50 {
            let x = DVector::from_fn(2, |_, _| rng.random::<f64>() * 6.0 - 3.0);
            let sigma = 0.3 + rng.random::<f64>() * 3.0;
            let s = gmm.score(&x, sigma).unwrap();
            let fd = fd_gradient(|p| gmm.log_density(p, sigma).unwrap(), &x, 1e-5);
            let rel = (&s - &fd).norm() / fd.norm().max(1e-12);
            assert!(rel < 1e-5, "rel fd error {rel:.2e}");
        }
    }

    #[test]
    fn denoiser_moments_conjugate_case() {
        let gmm = unit_gaussian(2);
        let x = DVector::from_vec(vec![1.0, 1.0]);
        let m = gmm.denoiser_moments(&x, 1.0).unwrap();
        assert_relative_eq!(m.mean[0], 0.5, epsilon = 1e-14);
        assert_relative_eq!(m.mean[1], 0.5, epsilon = 1e-14);
        assert_relative_eq!(m.covariance.as_matrix()[(0, 0)], 0.5, epsilon = 1e-14);
        assert_relative_eq!(m.covariance.as_matrix()[(1, 1)], 0.5, epsilon = 1e-14);
        assert!(m.covariance.as_matrix()[(0, 1)].abs() < 1e-14);
    }

    #[test]
    fn tweedie_mean_identity_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let gmm = crate::test_support::random_mixture_2d(&mut rng, 4);
        for _ in 0..20 {
            let x = DVector::from_fn(2, |_, _| rng.random::<f64>() * 6.0 - 3.0);
            let sigma = 0.2 + rng.random::<f64>() * 4.0;
            let m = gmm.denoiser_moments(&x, sigma).unwrap();
            let score = gmm.score(&x, sigma).unwrap();
            let recon = &x + &score * (sigma * sigma);
            assert_eq!(m.mean, recon, "same responsibilities must give identical bits");
        }
    }

    #[test]
    fn covariance_matches_hessian_tweedie_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let gmm = crate::test_support::random_mixture_2d(&mut rng, 3);
        for _ in 0..5 {
            let x = DVector::from_fn(2, |_, _| rng.random::<f64>() * 4.0 - 2.0);
            let sigma = 0.5 + rng.random::<f64>() * 1.5;
            let s2 = sigma * sigma;
            let m = gmm.denoiser_moments(&x, sigma).unwrap();
            let h = fd_hessian(|p| gmm.log_density(p, sigma).unwrap(), &x, 1e-4);
            let expected = (h * s2 + DMatrix::identity(2, 2)) * s2;
            let rel = (m.covariance.as_matrix() - &expected).norm() / expected.norm();
            assert!(rel < 1e-4, "hessian tweedie mismatch {rel:.2e}");
        }
    }

    #[test]
    fn covariance_approaches_data_covariance_at_large_sigma() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let gmm = crate::test_support::random_mixture_2d(&mut rng, 3);
        let total = gmm.total_covariance();
        let x = DVector::from_vec(vec![100.0, -50.0]);
        let m = gmm.denoiser_moments(&x, 1e3).unwrap();
        let rel = (m.covariance.as_matrix() - total.as_matrix()).norm() / total.as_matrix().norm();
        assert!(rel < 1e-3, "large-sigma covariance error {rel:.2e}");
    }

    #[test]
    fn conditional_score_scalar_case() {
        // K=1, N=1, mu=0, S=1, y=1, sy=1, sigma=1, x=0: posterior precision 3,
        // posterior mean 1/3, score = (1/3 - 0) / 1.
        let gmm = unit_gaussian(1);
        let obs = LinearObservation::new(
            LinearOperator::Identity { dim: 1 },
            DVector::from_vec(vec![1.0]),
            1.0,
        )
        .unwrap();
        let s = gmm
            .conditional_score(&obs, &DVector::zeros(1), 1.0)
            .unwrap();
        assert_relative_eq!(s[0], 1.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn conditional_score_reduces_to_unconditional_with_weak_likelihood() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let gmm = crate::test_support::random_mixture_2d(&mut rng, 3);
        let obs = LinearObservation::new(
            LinearOperator::Identity { dim: 2 },
            DVector::from_vec(vec![0.3, -0.4]),
            1e6,
        )
        .unwrap();
        for _ in 0..5 {
            let x = DVector::from_fn(2, |_, _| rng.random::<f64>() * 4.0 - 2.0);
            let sigma = 0.5 + rng.random::<f64>();
            let cond = gmm.conditional_score(&obs, &x, sigma).unwrap();
            let unc = gmm.score(&x, sigma).unwrap();
            let rel = (&cond - &unc).norm() / unc.norm().max(1e-12);
            assert!(rel < 1e-4, "weak-likelihood limit violated: {rel:.2e}");
        }
    }

    #[test]
    fn conditional_score_matches_quadrature() {
        // grad log integral p(x_t | x0) p(x0 | y) dx0 by 2-D quadrature.
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let gmm = crate::test_support::random_mixture_2d(&mut rng, 2);
        let obs = LinearObservation::new(
            LinearOperator::Identity { dim: 2 },
            DVector::from_vec(vec![0.5, 0.2]),
            0.8,
        )
        .unwrap();
        let posterior = gmm.posterior_given_y(&obs).unwrap();
        let sigma = 0.9;
        let log_cond_marginal =
            |x: &DVector<f64>| posterior.log_density(x, sigma).unwrap();
        let x = DVector::from_vec(vec![0.4, -0.3]);
        let got = gmm.conditional_score(&obs, &x, sigma).unwrap();
        let fd = fd_gradient(log_cond_marginal, &x, 1e-5);
        let rel = (&got - &fd).norm() / fd.norm();
        assert!(rel < 1e-4, "conditional score mismatch {rel:.2e}");
    }

    #[test]
    fn posterior_given_y_single_component_conjugacy() {
        let cov = DenseSymMatrix::scaled_identity(2, 2.0);
        let mu = DVector::from_vec(vec![1.0, -1.0]);
        let gmm = GaussianMixture::single(mu.clone(), cov).unwrap();
        let y = DVector::from_vec(vec![2.0, 0.0]);
        let obs =
            LinearObservation::new(LinearOperator::Identity { dim: 2 }, y.clone(), 1.0).unwrap();
        let post = gmm.posterior_given_y(&obs).unwrap();
        // precision 1/2 + 1 = 3/2; mean = (mu/2 + y) / (3/2)
        let expected_mean = (&mu * 0.5 + &y) * (2.0 / 3.0);
        assert!((post.means()[0].clone() - expected_mean).norm() < 1e-12);
        assert_relative_eq!(post.covariances()[0].as_matrix()[(0, 0)], 2.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn posterior_weights_stay_uniform_under_symmetry() {
        let cov = DenseSymMatrix::identity(2);
        let mu = DVector::from_vec(vec![1.0, 0.0]);
        let gmm = GaussianMixture::new(
            vec![0.5, 0.5],
            vec![mu.clone(), -mu],
            vec![cov.clone(), cov],
        )
        .unwrap();
        let obs = LinearObservation::new(
            LinearOperator::Identity { dim: 2 },
            DVector::zeros(2),
            0.7,
        )
        .unwrap();
        let post = gmm.posterior_given_y(&obs).unwrap();
        assert_relative_eq!(post.weights()[0], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn posterior_sampling_matches_analytic_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let gmm = crate::test_support::random_mixture_2d(&mut rng, 3);
        let obs = LinearObservation::new(
            LinearOperator::Identity { dim: 2 },
            DVector::from_vec(vec![0.6, -0.2]),
            0.9,
        )
        .unwrap();
        let post = gmm.posterior_given_y(&obs).unwrap();
        let n = 100_000;
        let samples = post.sample_n(&mut rng, n);
        let mean_hat = samples.iter().fold(DVector::zeros(2), |a, s| a + s) / n as f64;
        let analytic_mean = post.mean();
        let analytic_cov = post.total_covariance();
        for i in 0..2 {
            let se = (analytic_cov.as_matrix()[(i, i)] / n as f64).sqrt();
            assert!(
                (mean_hat[i] - analytic_mean[i]).abs() < 3.0 * se,
                "posterior mean off beyond 3 MC standard errors"
            );
        }
        let mut cov_hat = DMatrix::zeros(2, 2);
        for s in &samples {
            let d = s - &mean_hat;
            cov_hat += &d * d.transpose();
        }
        cov_hat /= n as f64 - 1.0;
        for i in 0..2 {
            let var = analytic_cov.as_matrix()[(i, i)];
            let se = var * (2.0 / (n as f64 - 1.0)).sqrt();
            assert!(
                (cov_hat[(i, i)] - var).abs() < 3.0 * se,
                "posterior variance off beyond 3 MC standard errors"
            );
        }
    }

    #[test]
    fn non_identity_operator_is_rejected_for_oracle_ops() {
        let gmm = unit_gaussian(2);
        let obs = LinearObservation::new(
            LinearOperator::Mask { kept: vec![0], dim: 2 },
            DVector::zeros(1),
            0.5,
        )
        .unwrap();
        assert!(matches!(
            gmm.posterior_given_y(&obs),
            Err(FhError::UnsupportedOperator(_))
        ));
        assert!(matches!(
            gmm.conditional_score(&obs, &DVector::zeros(2), 1.0),
            Err(FhError::UnsupportedOperator(_))
        ));
    }

    #[test]
    fn heat_semigroup_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let gmm = crate::test_support::random_mixture_2d(&mut rng, 3);
        let (s1, s2) = (0.8, 1.3);
        // treat the s1-smoothed mixture as data, smooth by s2
        let smoothed = GaussianMixture::new(
            gmm.weights().to_vec(),
            gmm.means().to_vec(),
            gmm.covariances()
                .iter()
                .map(|c| c.add_scalar_diagonal(s1 * s1))
                .collect(),
        )
        .unwrap();
        let direct_sigma = (s1 * s1 + s2 * s2).sqrt();
        for _ in 0..30 {
            let x = DVector::from_fn(2, |_, _| rng.random::<f64>() * 8.0 - 4.0);
            let a = smoothed.log_density(&x, s2).unwrap();
            let b = gmm.log_density(&x, direct_sigma).unwrap();
            assert!((a - b).abs() < 1e-8, "semigroup violated: {}", (a - b).abs());
        }
    }

    #[test]
    fn operator_structured_forms() {
        let v = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let mask = LinearOperator::Mask { kept: vec![2, 0], dim: 3 };
        assert_eq!(mask.apply(&v), DVector::from_vec(vec![3.0, 1.0]));
        assert_eq!(
            mask.apply_transpose(&DVector::from_vec(vec![5.0, 7.0])),
            DVector::from_vec(vec![7.0, 0.0, 5.0])
        );
        let conv = LinearOperator::convolution_1d(&[0.25, 0.5, 0.25], 3).unwrap();
        let out = conv.apply(&v);
        assert_relative_eq!(out[1], 2.0, epsilon = 1e-14);
        assert_relative_eq!(out[0], 0.5 * 1.0 + 0.25 * 2.0, epsilon = 1e-14);
    }
}
