//! Symmetric-matrix algebra for the diagonal + low-rank covariance
//! representation, with a dense backend for small dimensions and for
//! verification.
//!
//! The low-rank form stores `M = Diag(d) + U U^T - V V^T` with complex
//! entries and *plain* (not conjugate) transposes. Imaginary parts only
//! enter through the inner square roots taken during inversion and cancel
//! in the represented matrix; a relative imaginary-residual invariant is
//! enforced whenever the representation is densified.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{FhError, Result};
use crate::linalg;

/// Default bound on the number of columns in each low-rank factor.
pub const DEFAULT_RANK_CAP: usize = 64;

/// Largest dimension for which densification is permitted.
pub const DENSE_DIM_LIMIT: usize = 4096;

/// Relative tolerance on the imaginary residual of the represented matrix.
pub const IMAG_RESIDUAL_TOL: f64 = 1e-8;

/// Dimension at and below which the dense backend is the default choice.
pub const DENSE_BACKEND_LIMIT: usize = 64;

fn to_complex(v: &DVector<f64>) -> DVector<Complex64> {
    v.map(|x| Complex64::new(x, 0.0))
}

/// Symmetric matrix stored as `Diag(d) + U U^T - V V^T`.
#[derive(Debug, Clone)]
pub struct LowRankDiagMatrix {
    dim: usize,
    diag: DVector<Complex64>,
    pos: DMatrix<Complex64>,
    neg: DMatrix<Complex64>,
    rank_cap: usize,
}

impl LowRankDiagMatrix {
    pub fn from_real_diag(diag: &DVector<f64>) -> Self {
        let dim = diag.len();
        Self {
            dim,
            diag: to_complex(diag),
            pos: DMatrix::zeros(dim, 0),
            neg: DMatrix::zeros(dim, 0),
            rank_cap: DEFAULT_RANK_CAP,
        }
    }

    pub fn scaled_identity(dim: usize, scale: f64) -> Self {
        Self::from_real_diag(&DVector::from_element(dim, scale))
    }

    pub fn identity(dim: usize) -> Self {
        Self::scaled_identity(dim, 1.0)
    }

    pub fn from_parts(
        diag: DVector<Complex64>,
        pos: DMatrix<Complex64>,
        neg: DMatrix<Complex64>,
        rank_cap: usize,
    ) -> Result<Self> {
        let dim = diag.len();
        if pos.nrows() != dim || neg.nrows() != dim {
            return Err(FhError::contract("factor row count must match dimension"));
        }
        if pos.ncols() > rank_cap || neg.ncols() > rank_cap {
            return Err(FhError::Capacity {
                current: pos.ncols().max(neg.ncols()),
                cap: rank_cap,
            });
        }
        Ok(Self { dim, diag, pos, neg, rank_cap })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ranks(&self) -> (usize, usize) {
        (self.pos.ncols(), self.neg.ncols())
    }

    pub fn rank_cap(&self) -> usize {
        self.rank_cap
    }

    pub fn with_rank_cap(mut self, cap: usize) -> Self {
        self.rank_cap = cap;
        self
    }

    /// Real part of `M v` in O(N (k1 + k2)).
    pub fn apply(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        if v.len() != self.dim {
            return Err(FhError::contract(format!(
                "apply: vector length {} does not match dimension {}",
                v.len(),
                self.dim
            )));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(FhError::contract("apply: non-finite vector entry"));
        }
        Ok(self.apply_complex(&to_complex(v)).map(|c| c.re))
    }

    fn apply_complex(&self, v: &DVector<Complex64>) -> DVector<Complex64> {
        let mut out = self.diag.component_mul(v);
        if self.pos.ncols() > 0 {
            out += &self.pos * (self.pos.transpose() * v);
        }
        if self.neg.ncols() > 0 {
            out -= &self.neg * (self.neg.transpose() * v);
        }
        out
    }

    /// Real diagonal of the represented matrix, O(N (k1 + k2)).
    pub fn represented_diag(&self) -> DVector<f64> {
        let mut d = self.diag.map(|c| c.re);
        for j in 0..self.pos.ncols() {
            for i in 0..self.dim {
                let u = self.pos[(i, j)];
                d[i] += (u * u).re;
            }
        }
        for j in 0..self.neg.ncols() {
            for i in 0..self.dim {
                let v = self.neg[(i, j)];
                d[i] -= (v * v).re;
            }
        }
        d
    }

    /// `M + c I`: shifts the stored diagonal, factors untouched.
    pub fn add_scalar_diagonal(&self, c: f64) -> Self {
        let mut out = self.clone();
        if c != 0.0 {
            for d in out.diag.iter_mut() {
                *d += Complex64::new(c, 0.0);
            }
        }
        out
    }

    /// Appends `plus` as a new column of U and `minus` as a new column of V,
    /// so the represented matrix gains `plus plus^T - minus minus^T`.
    pub fn append_rank_one(&self, plus: &DVector<f64>, minus: &DVector<f64>) -> Result<Self> {
        if plus.len() != self.dim || minus.len() != self.dim {
            return Err(FhError::contract("append_rank_one: dimension mismatch"));
        }
        if plus.iter().chain(minus.iter()).any(|x| !x.is_finite()) {
            return Err(FhError::contract("append_rank_one: non-finite entry"));
        }
        let (k1, k2) = self.ranks();
        if k1 + 1 > self.rank_cap || k2 + 1 > self.rank_cap {
            return Err(FhError::Capacity {
                current: k1.max(k2) + 1,
                cap: self.rank_cap,
            });
        }
        let mut pos = self.pos.clone().insert_column(k1, Complex64::new(0.0, 0.0));
        let mut neg = self.neg.clone().insert_column(k2, Complex64::new(0.0, 0.0));
        for i in 0..self.dim {
            pos[(i, k1)] = Complex64::new(plus[i], 0.0);
            neg[(i, k2)] = Complex64::new(minus[i], 0.0);
        }
        Ok(Self {
            dim: self.dim,
            diag: self.diag.clone(),
            pos,
            neg,
            rank_cap: self.rank_cap,
        })
    }

    /// Inverse in the same representation, using the Woodbury identity twice.
    ///
    /// `(D + U U^T)^{-1} = D^{-1} - V' V'^T` with
    /// `V' = D^{-1} U sqrt((I + U^T D^{-1} U)^{-1})`, and the second
    /// application folds `- V V^T` back in, producing
    /// `D^{-1} + U' U'^T - V' V'^T`. Only k x k systems are factored; the
    /// inner square roots go through a Schur decomposition because the inner
    /// matrices need not be positive definite, which is where complex
    /// entries enter.
    pub fn invert(&self) -> Result<Self> {
        let n = self.dim;
        let diag_floor = f64::EPSILON
            * self
                .diag
                .iter()
                .map(|c| c.norm())
                .fold(0.0, f64::max)
                .max(1.0);
        if self.diag.iter().any(|c| c.norm() <= diag_floor) {
            return Err(FhError::NumericalRank(
                "invert: stored diagonal has (near-)zero entries".into(),
            ));
        }
        // Necessary positive-definiteness screen: the represented diagonal of
        // a PD matrix is strictly positive.
        let rep_diag = self.represented_diag();
        if let Some(bad) = rep_diag.iter().cloned().reduce(f64::min) {
            if bad <= 0.0 {
                return Err(FhError::domain(format!(
                    "invert: represented diagonal has non-positive entry {bad:.3e}"
                )));
            }
        }

        let dinv: DVector<Complex64> = self.diag.map(|c| Complex64::new(1.0, 0.0) / c);

        // First Woodbury pass: A = D + U U^T.
        let k1 = self.pos.ncols();
        let mut neg_new = DMatrix::<Complex64>::zeros(n, k1);
        if k1 > 0 {
            // W = D^{-1} U
            let mut w = self.pos.clone();
            for i in 0..n {
                for j in 0..k1 {
                    w[(i, j)] *= dinv[i];
                }
            }
            let inner = DMatrix::<Complex64>::identity(k1, k1) + self.pos.transpose() * &w;
            let root = linalg::sqrtm_principal(&inner)?;
            // V' = W * root^{-1}; solve root^T X^T = W^T with root symmetric.
            let x_t = linalg::solve_complex(&root.transpose(), &w.transpose())?;
            neg_new = x_t.transpose();
        }

        // Second pass: M = A - V V^T, with A^{-1} = D^{-1} - V' V'^T.
        let k2 = self.neg.ncols();
        let mut pos_new = DMatrix::<Complex64>::zeros(n, k2);
        if k2 > 0 {
            // Z = A^{-1} V = D^{-1} V - V'(V'^T V)
            let mut z = self.neg.clone();
            for i in 0..n {
                for j in 0..k2 {
                    z[(i, j)] *= dinv[i];
                }
            }
            if k1 > 0 {
                z -= &neg_new * (neg_new.transpose() * &self.neg);
            }
            let inner = DMatrix::<Complex64>::identity(k2, k2) - self.neg.transpose() * &z;
            let root = linalg::sqrtm_principal(&inner)?;
            let x_t = linalg::solve_complex(&root.transpose(), &z.transpose())?;
            pos_new = x_t.transpose();
        }

        Self::from_parts(dinv, pos_new, neg_new, self.rank_cap)
    }

    /// Representation of `alpha I + beta M`, staying in the diagonal +
    /// low-rank format: negative `beta` swaps the roles of the factors.
    pub fn scale_and_shift(&self, alpha: f64, beta: f64) -> Self {
        let diag = self
            .diag
            .map(|d| Complex64::new(alpha, 0.0) + d * Complex64::new(beta, 0.0));
        let (pos, neg) = if beta == 0.0 {
            (DMatrix::zeros(self.dim, 0), DMatrix::zeros(self.dim, 0))
        } else if beta > 0.0 {
            let s = Complex64::new(beta.sqrt(), 0.0);
            (self.pos.map(|v| v * s), self.neg.map(|v| v * s))
        } else {
            let s = Complex64::new((-beta).sqrt(), 0.0);
            (self.neg.map(|v| v * s), self.pos.map(|v| v * s))
        };
        Self {
            dim: self.dim,
            diag,
            pos,
            neg,
            rank_cap: self.rank_cap,
        }
    }

    /// Largest absolute imaginary entry of the represented matrix relative to
    /// the largest absolute real entry.
    pub fn imaginary_residual(&self) -> f64 {
        let full = self.represent_complex();
        let max_im = full.iter().map(|c| c.im.abs()).fold(0.0, f64::max);
        let max_re = full.iter().map(|c| c.re.abs()).fold(0.0, f64::max);
        if max_re == 0.0 {
            if max_im == 0.0 {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            max_im / max_re
        }
    }

    fn represent_complex(&self) -> DMatrix<Complex64> {
        let mut full = DMatrix::<Complex64>::zeros(self.dim, self.dim);
        for i in 0..self.dim {
            full[(i, i)] = self.diag[i];
        }
        if self.pos.ncols() > 0 {
            full += &self.pos * self.pos.transpose();
        }
        if self.neg.ncols() > 0 {
            full -= &self.neg * self.neg.transpose();
        }
        full
    }

    /// Densifies the real part. Fails if the dimension exceeds the dense
    /// budget or the imaginary-cancellation invariant is violated.
    pub fn to_dense(&self) -> Result<DenseSymMatrix> {
        if self.dim > DENSE_DIM_LIMIT {
            return Err(FhError::contract(format!(
                "to_dense: dimension {} exceeds dense budget {}",
                self.dim, DENSE_DIM_LIMIT
            )));
        }
        let residual = self.imaginary_residual();
        if residual > IMAG_RESIDUAL_TOL {
            return Err(FhError::RepresentationCorrupted {
                residual,
                tolerance: IMAG_RESIDUAL_TOL,
            });
        }
        let full = self.represent_complex();
        DenseSymMatrix::new(full.map(|c| c.re))
    }

    /// Re-expresses `U U^T - V V^T` with at most `target_rank` columns per
    /// factor by eigendecomposition of the (real part of the) factor
    /// contribution, dropping the smallest-magnitude directions. Returns the
    /// compressed matrix and the spectral mass dropped.
    pub fn recompress(&self, target_rank: usize) -> Result<(Self, f64)> {
        let (k1, k2) = self.ranks();
        if k1 <= target_rank && k2 <= target_rank {
            return Ok((self.clone(), 0.0));
        }
        // Real part of U U^T - V V^T splits into signed real outer products.
        let cols = 2 * (k1 + k2);
        let mut w = DMatrix::<f64>::zeros(self.dim, cols);
        let mut signs = Vec::with_capacity(cols);
        let mut c = 0;
        let push = |mat: &DMatrix<Complex64>, re: bool, sign: f64, c: &mut usize, w: &mut DMatrix<f64>, signs: &mut Vec<f64>| {
            for j in 0..mat.ncols() {
                for i in 0..mat.nrows() {
                    w[(i, *c)] = if re { mat[(i, j)].re } else { mat[(i, j)].im };
                }
                signs.push(sign);
                *c += 1;
            }
        };
        push(&self.pos, true, 1.0, &mut c, &mut w, &mut signs);
        push(&self.pos, false, -1.0, &mut c, &mut w, &mut signs);
        push(&self.neg, true, -1.0, &mut c, &mut w, &mut signs);
        push(&self.neg, false, 1.0, &mut c, &mut w, &mut signs);

        let qr = w.qr();
        let q = qr.q();
        let r = qr.r();
        let m = r.nrows(); // min(dim, cols)
        let mut small = DMatrix::<f64>::zeros(m, m);
        for (j, s) in signs.iter().enumerate() {
            for a in 0..m {
                for b in 0..m {
                    small[(a, b)] += r[(a, j)] * s * r[(b, j)];
                }
            }
        }
        let (vals, vecs) = linalg::sym_eigen(&small);
        let mut order: Vec<usize> = (0..vals.len()).collect();
        order.sort_by(|&a, &b| vals[b].abs().partial_cmp(&vals[a].abs()).unwrap());

        let mut pos_cols = Vec::new();
        let mut neg_cols = Vec::new();
        let mut dropped = 0.0;
        for &idx in &order {
            let lam = vals[idx];
            let dir = &q * vecs.column(idx);
            if lam > 0.0 && pos_cols.len() < target_rank {
                pos_cols.push(dir * lam.sqrt());
            } else if lam < 0.0 && neg_cols.len() < target_rank {
                neg_cols.push(dir * (-lam).sqrt());
            } else {
                dropped += lam.abs();
            }
        }
        let build = |cols: &[DVector<f64>]| {
            let mut m = DMatrix::<Complex64>::zeros(self.dim, cols.len());
            for (j, col) in cols.iter().enumerate() {
                for i in 0..self.dim {
                    m[(i, j)] = Complex64::new(col[i], 0.0);
                }
            }
            m
        };
        let out = Self {
            dim: self.dim,
            diag: self.diag.clone(),
            pos: build(&pos_cols),
            neg: build(&neg_cols),
            rank_cap: self.rank_cap,
        };
        Ok((out, dropped))
    }
}

/// Dense symmetric real matrix; symmetry is validated on construction.
#[derive(Debug, Clone)]
pub struct DenseSymMatrix {
    mat: DMatrix<f64>,
}

impl DenseSymMatrix {
    pub fn new(mat: DMatrix<f64>) -> Result<Self> {
        if mat.nrows() != mat.ncols() {
            return Err(FhError::contract("dense symmetric matrix must be square"));
        }
        let max_abs = mat.iter().map(|x| x.abs()).fold(0.0, f64::max);
        let asym = (&mat - mat.transpose())
            .iter()
            .map(|x| x.abs())
            .fold(0.0, f64::max);
        if asym > 1e-12 * max_abs.max(1.0) {
            return Err(FhError::contract(format!(
                "matrix is not symmetric: max asymmetry {asym:.3e}"
            )));
        }
        Ok(Self {
            mat: linalg::symmetrize(&mat),
        })
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            mat: DMatrix::identity(dim, dim),
        }
    }

    pub fn scaled_identity(dim: usize, scale: f64) -> Self {
        Self {
            mat: DMatrix::identity(dim, dim) * scale,
        }
    }

    pub fn from_diag(diag: &DVector<f64>) -> Self {
        Self {
            mat: DMatrix::from_diagonal(diag),
        }
    }

    pub fn dim(&self) -> usize {
        self.mat.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.mat
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.mat
    }

    pub fn apply(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        if v.len() != self.dim() {
            return Err(FhError::contract("apply: dimension mismatch"));
        }
        Ok(&self.mat * v)
    }

    pub fn add_scalar_diagonal(&self, c: f64) -> Self {
        let mut mat = self.mat.clone();
        for i in 0..mat.nrows() {
            mat[(i, i)] += c;
        }
        Self { mat }
    }

    /// `M + p p^T - m m^T`. Grouping the two outer products keeps the
    /// already-consistent case (p == m bitwise) an exact no-op.
    pub fn rank_two_update(&self, plus: &DVector<f64>, minus: &DVector<f64>) -> Result<Self> {
        if plus.len() != self.dim() || minus.len() != self.dim() {
            return Err(FhError::contract("rank_two_update: dimension mismatch"));
        }
        let mat = &self.mat + (plus * plus.transpose() - minus * minus.transpose());
        Ok(Self {
            mat: linalg::symmetrize(&mat),
        })
    }

    pub fn invert(&self) -> Result<Self> {
        let chol = self
            .mat
            .clone()
            .cholesky()
            .ok_or_else(|| FhError::domain("dense inverse: matrix not positive definite"))?;
        Ok(Self {
            mat: linalg::symmetrize(&chol.inverse()),
        })
    }

    pub fn min_eigenvalue(&self) -> f64 {
        linalg::min_eigenvalue(&self.mat)
    }

    pub fn is_positive_definite(&self) -> bool {
        self.mat.clone().cholesky().is_some()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.mat.norm()
    }

    pub fn diagonal(&self) -> DVector<f64> {
        self.mat.diagonal()
    }
}

/// Tagged union over the two storage formats. All operations represent the
/// same matrix regardless of the backend chosen.
#[derive(Debug, Clone)]
pub enum CovarianceBackend {
    Dense(DenseSymMatrix),
    LowRank(LowRankDiagMatrix),
}

impl CovarianceBackend {
    pub fn dim(&self) -> usize {
        match self {
            CovarianceBackend::Dense(d) => d.dim(),
            CovarianceBackend::LowRank(l) => l.dim(),
        }
    }

    pub fn apply(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        match self {
            CovarianceBackend::Dense(d) => d.apply(v),
            CovarianceBackend::LowRank(l) => l.apply(v),
        }
    }

    pub fn add_scalar_diagonal(&self, c: f64) -> Self {
        match self {
            CovarianceBackend::Dense(d) => CovarianceBackend::Dense(d.add_scalar_diagonal(c)),
            CovarianceBackend::LowRank(l) => CovarianceBackend::LowRank(l.add_scalar_diagonal(c)),
        }
    }

    /// Rank-two update `M + p p^T - m m^T`; appends factor columns on the
    /// low-rank backend.
    pub fn rank_two_update(&self, plus: &DVector<f64>, minus: &DVector<f64>) -> Result<Self> {
        match self {
            CovarianceBackend::Dense(d) => Ok(CovarianceBackend::Dense(d.rank_two_update(plus, minus)?)),
            CovarianceBackend::LowRank(l) => {
                Ok(CovarianceBackend::LowRank(l.append_rank_one(plus, minus)?))
            }
        }
    }

    pub fn invert(&self) -> Result<Self> {
        match self {
            CovarianceBackend::Dense(d) => Ok(CovarianceBackend::Dense(d.invert()?)),
            CovarianceBackend::LowRank(l) => Ok(CovarianceBackend::LowRank(l.invert()?)),
        }
    }

    pub fn to_dense(&self) -> Result<DenseSymMatrix> {
        match self {
            CovarianceBackend::Dense(d) => Ok(d.clone()),
            CovarianceBackend::LowRank(l) => l.to_dense(),
        }
    }

    /// Real diagonal of the represented matrix (used by the Jacobi
    /// preconditioner).
    pub fn represented_diag(&self) -> DVector<f64> {
        match self {
            CovarianceBackend::Dense(d) => d.diagonal(),
            CovarianceBackend::LowRank(l) => l.represented_diag(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_vector(rng: &mut impl Rng, n: usize) -> DVector<f64> {
        DVector::from_fn(n, |_, _| rng.sample(StandardNormal))
    }

    /// Random SPD matrix in diagonal + low-rank form (verified PD densely).
    fn random_spd_lowrank(rng: &mut impl Rng, n: usize, k: usize) -> LowRankDiagMatrix {
        loop {
            let diag = DVector::from_fn(n, |_, _| 0.5 + rng.random::<f64>() * 2.0);
            let mut m = LowRankDiagMatrix::from_real_diag(&diag);
            for _ in 0..k {
                let plus = random_vector(rng, n) * 0.6;
                let minus = random_vector(rng, n) * 0.25;
                m = m.append_rank_one(&plus, &minus).unwrap();
            }
            if m.to_dense().unwrap().is_positive_definite() {
                return m;
            }
        }
    }

    #[test]
    fn apply_identity() {
        let m = LowRankDiagMatrix::identity(2);
        let v = DVector::from_vec(vec![3.0, -2.0]);
        assert_eq!(m.apply(&v).unwrap(), v);
    }

    #[test]
    fn apply_hand_expanded_case() {
        // diag=(2,2) plus U column (1,0): represents diag(3,2).
        let m = LowRankDiagMatrix::from_real_diag(&DVector::from_vec(vec![2.0, 2.0]))
            .append_rank_one(
                &DVector::from_vec(vec![1.0, 0.0]),
                &DVector::zeros(2),
            )
            .unwrap();
        let out = m.apply(&DVector::from_vec(vec![1.0, 1.0])).unwrap();
        assert_relative_eq!(out[0], 3.0, epsilon = 1e-14);
        assert_relative_eq!(out[1], 2.0, epsilon = 1e-14);
    }

    #[test]
    fn apply_matches_dense_backend() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let m = random_spd_lowrank(&mut rng, 8, 3);
            let dense = m.to_dense().unwrap();
            let v = random_vector(&mut rng, 8);
            let a = m.apply(&v).unwrap();
            let b = dense.apply(&v).unwrap();
            let rel = (&a - &b).norm() / b.norm().max(1e-300);
            assert!(rel < 1e-10, "backend mismatch: {rel:.3e}");
        }
    }

    #[test]
    fn apply_dimension_mismatch_is_contract_error() {
        let m = LowRankDiagMatrix::identity(3);
        let err = m.apply(&DVector::zeros(2)).unwrap_err();
        assert!(matches!(err, FhError::Contract(_)));
    }

    #[test]
    fn invert_identity() {
        let m = LowRankDiagMatrix::identity(4);
        let inv = m.invert().unwrap();
        let dense = inv.to_dense().unwrap();
        assert!((dense.as_matrix() - DMatrix::<f64>::identity(4, 4)).norm() < 1e-13);
    }

    #[test]
    fn invert_hand_case_diag_3_2() {
        let m = LowRankDiagMatrix::from_real_diag(&DVector::from_vec(vec![2.0, 2.0]))
            .append_rank_one(&DVector::from_vec(vec![1.0, 0.0]), &DVector::zeros(2))
            .unwrap();
        let inv = m.invert().unwrap().to_dense().unwrap();
        assert_relative_eq!(inv.as_matrix()[(0, 0)], 1.0 / 3.0, epsilon = 1e-10);
        assert_relative_eq!(inv.as_matrix()[(1, 1)], 0.5, epsilon = 1e-10);
        assert!(inv.as_matrix()[(0, 1)].abs() < 1e-10);
    }

    #[test]
    fn invert_round_trip_applies() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let m = random_spd_lowrank(&mut rng, 16, 3);
        let inv = m.invert().unwrap();
        for _ in 0..100 {
            let v = random_vector(&mut rng, 16);
            let w = inv.apply(&m.apply(&v).unwrap()).unwrap();
            let rel = (&w - &v).norm() / v.norm();
            assert!(rel < 1e-8, "round trip error {rel:.3e}");
        }
    }

    #[test]
    fn invert_matches_dense_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..20 {
            let m = random_spd_lowrank(&mut rng, 12, 3);
            let inv = m.invert().unwrap().to_dense().unwrap();
            let dense_inv = m.to_dense().unwrap().invert().unwrap();
            let rel = (inv.as_matrix() - dense_inv.as_matrix()).norm() / dense_inv.as_matrix().norm();
            assert!(rel < 1e-8, "woodbury vs dense inverse: {rel:.3e}");
        }
    }

    #[test]
    fn double_inversion_returns_original() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..100 {
            let n = 4 + (rng.random::<u32>() % 29) as usize; // up to 32
            let k = 1 + (rng.random::<u32>() % 4) as usize;
            let m = random_spd_lowrank(&mut rng, n, k);
            let back = m.invert().unwrap().invert().unwrap();
            let d0 = m.to_dense().unwrap();
            let d1 = back.to_dense().unwrap();
            let rel = (d1.as_matrix() - d0.as_matrix()).norm() / d0.as_matrix().norm();
            assert!(rel < 1e-7, "double inversion error {rel:.3e}");
            assert!(back.imaginary_residual() <= IMAG_RESIDUAL_TOL);
        }
    }

    #[test]
    fn invert_flags_zero_diagonal() {
        let m = LowRankDiagMatrix::from_real_diag(&DVector::from_vec(vec![1.0, 0.0]));
        assert!(matches!(m.invert(), Err(FhError::NumericalRank(_))));
    }

    #[test]
    fn invert_flags_non_positive_definite() {
        // diag(1,1) - e1 e1^T * 4 has a negative represented diagonal entry.
        let m = LowRankDiagMatrix::identity(2)
            .append_rank_one(&DVector::zeros(2), &DVector::from_vec(vec![2.0, 0.0]))
            .unwrap();
        assert!(matches!(m.invert(), Err(FhError::Domain(_))));
    }

    #[test]
    fn add_scalar_diagonal_cases() {
        let m = LowRankDiagMatrix::identity(3).add_scalar_diagonal(1.0);
        let d = m.to_dense().unwrap();
        assert!((d.as_matrix() - DMatrix::<f64>::identity(3, 3) * 2.0).norm() < 1e-14);

        // diag(3,2) via factors, shift by -0.5
        let m = LowRankDiagMatrix::from_real_diag(&DVector::from_vec(vec![2.0, 2.0]))
            .append_rank_one(&DVector::from_vec(vec![1.0, 0.0]), &DVector::zeros(2))
            .unwrap()
            .add_scalar_diagonal(-0.5);
        let d = m.to_dense().unwrap();
        assert_relative_eq!(d.as_matrix()[(0, 0)], 2.5, epsilon = 1e-14);
        assert_relative_eq!(d.as_matrix()[(1, 1)], 1.5, epsilon = 1e-14);
    }

    #[test]
    fn add_zero_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let m = random_spd_lowrank(&mut rng, 6, 2);
        let shifted = m.add_scalar_diagonal(0.0);
        for i in 0..6 {
            assert_eq!(m.diag[i], shifted.diag[i]);
        }
    }

    #[test]
    fn append_zero_update_keeps_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let m = random_spd_lowrank(&mut rng, 5, 1);
        let z = DVector::zeros(5);
        let m2 = m.append_rank_one(&z, &z).unwrap();
        let (k1, k2) = m2.ranks();
        assert_eq!((k1, k2), (2, 2));
        let rel = (m2.to_dense().unwrap().as_matrix() - m.to_dense().unwrap().as_matrix()).norm();
        assert_eq!(rel, 0.0);
    }

    #[test]
    fn append_on_identity_matches_dense() {
        let m = LowRankDiagMatrix::identity(2)
            .append_rank_one(&DVector::from_vec(vec![1.0, 0.0]), &DVector::zeros(2))
            .unwrap();
        let d = m.to_dense().unwrap();
        assert_relative_eq!(d.as_matrix()[(0, 0)], 2.0, epsilon = 1e-15);
        assert_relative_eq!(d.as_matrix()[(1, 1)], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn rank_cap_overflow_is_capacity_error() {
        let mut m = LowRankDiagMatrix::identity(3).with_rank_cap(2);
        let v = DVector::from_vec(vec![0.1, 0.2, 0.3]);
        let z = DVector::zeros(3);
        m = m.append_rank_one(&v, &z).unwrap();
        m = m.append_rank_one(&v, &z).unwrap();
        let err = m.append_rank_one(&v, &z).unwrap_err();
        assert!(matches!(err, FhError::Capacity { .. }));
    }

    #[test]
    fn recompress_preserves_value_when_rank_fits() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let m = random_spd_lowrank(&mut rng, 10, 4);
        // invert to give the factors complex entries, then recompress
        let inv = m.invert().unwrap();
        let (small, dropped) = inv.recompress(8).unwrap();
        assert_eq!(dropped, 0.0);
        let a = inv.to_dense().unwrap();
        let b = small.to_dense().unwrap();
        let rel = (a.as_matrix() - b.as_matrix()).norm() / a.as_matrix().norm();
        assert!(rel < 1e-10, "recompression changed value: {rel:.3e}");
    }

    #[test]
    fn recompress_shrinks_ranks() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let mut m = LowRankDiagMatrix::identity(6);
        let dir = random_vector(&mut rng, 6);
        // same direction appended repeatedly: true rank is 1 per factor
        for _ in 0..5 {
            m = m.append_rank_one(&(dir.clone() * 0.3), &(dir.clone() * 0.1)).unwrap();
        }
        let (small, dropped) = m.recompress(2).unwrap();
        assert!(small.ranks().0 <= 2 && small.ranks().1 <= 2);
        assert!(dropped < 1e-12);
        let rel = (small.to_dense().unwrap().as_matrix() - m.to_dense().unwrap().as_matrix()).norm();
        assert!(rel < 1e-10);
    }

    #[test]
    fn dense_construction_rejects_asymmetry() {
        let mut mat = DMatrix::<f64>::identity(3, 3);
        mat[(0, 1)] = 0.5;
        assert!(DenseSymMatrix::new(mat).is_err());
    }

    #[test]
    fn dense_invert_requires_pd() {
        let m = DenseSymMatrix::from_diag(&DVector::from_vec(vec![1.0, -1.0]));
        assert!(matches!(m.invert(), Err(FhError::Domain(_))));
    }

    #[test]
    fn to_dense_round_trip_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..100 {
            let m = random_spd_lowrank(&mut rng, 8, 2);
            let d = m.to_dense().unwrap();
            let asym = (d.as_matrix() - d.as_matrix().transpose()).norm();
            assert!(asym <= 1e-12 * d.as_matrix().norm().max(1.0));
        }
    }

    #[test]
    fn backend_operations_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let low = random_spd_lowrank(&mut rng, 10, 3);
        let dense = low.to_dense().unwrap();
        let a = CovarianceBackend::LowRank(low);
        let b = CovarianceBackend::Dense(dense);

        let plus = random_vector(&mut rng, 10) * 0.3;
        let minus = random_vector(&mut rng, 10) * 0.1;
        let ops: Vec<(CovarianceBackend, CovarianceBackend)> = vec![
            (a.add_scalar_diagonal(0.7), b.add_scalar_diagonal(0.7)),
            (
                a.rank_two_update(&plus, &minus).unwrap(),
                b.rank_two_update(&plus, &minus).unwrap(),
            ),
            (a.invert().unwrap(), b.invert().unwrap()),
        ];
        for (x, y) in ops {
            let dx = x.to_dense().unwrap();
            let dy = y.to_dense().unwrap();
            let rel = (dx.as_matrix() - dy.as_matrix()).norm() / dy.as_matrix().norm();
            assert!(rel < 1e-8, "backend divergence {rel:.3e}");
        }
    }
}
