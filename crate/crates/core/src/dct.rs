//! Orthonormal DCT-II transforms for 1-D signals and separable 2-D grids.
//!
//! Plans precompute the basis matrix and apply it directly; at desk scale
//! (L <= 4096) the O(L^2) product is not a bottleneck.

use nalgebra::{DMatrix, DVector};

use crate::error::{FhError, Result};

/// Signal layout the plan was built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SignalShape {
    OneD { len: usize },
    /// Row-major H x W grid, transformed separably per axis.
    TwoD { height: usize, width: usize },
}

impl SignalShape {
    pub fn len(&self) -> usize {
        match self {
            SignalShape::OneD { len } => *len,
            SignalShape::TwoD { height, width } => height * width,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Precomputed orthonormal DCT-II basis.
#[derive(Debug, Clone)]
pub struct DctPlan {
    shape: SignalShape,
    /// 1-D case: the full basis. 2-D case: the height-axis basis.
    basis_rows: DMatrix<f64>,
    /// 2-D case: the width-axis basis (same as `basis_rows` in 1-D).
    basis_cols: DMatrix<f64>,
}

fn orthonormal_dct2_basis(len: usize) -> DMatrix<f64> {
    // row k, column n: c_k cos(pi (2n + 1) k / (2 L))
    let l = len as f64;
    DMatrix::from_fn(len, len, |k, n| {
        let scale = if k == 0 { (1.0 / l).sqrt() } else { (2.0 / l).sqrt() };
        scale * (std::f64::consts::PI * (2.0 * n as f64 + 1.0) * k as f64 / (2.0 * l)).cos()
    })
}

impl DctPlan {
    pub fn new_1d(len: usize) -> Result<Self> {
        if len == 0 {
            return Err(FhError::contract("dct plan needs a nonzero length"));
        }
        let basis = orthonormal_dct2_basis(len);
        Ok(Self {
            shape: SignalShape::OneD { len },
            basis_rows: basis.clone(),
            basis_cols: basis,
        })
    }

    pub fn new_2d(height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(FhError::contract("dct plan needs nonzero grid sides"));
        }
        Ok(Self {
            shape: SignalShape::TwoD { height, width },
            basis_rows: orthonormal_dct2_basis(height),
            basis_cols: orthonormal_dct2_basis(width),
        })
    }

    pub fn shape(&self) -> SignalShape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.shape.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn forward(&self, signal: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_len(signal)?;
        match self.shape {
            SignalShape::OneD { .. } => Ok(&self.basis_rows * signal),
            SignalShape::TwoD { height, width } => {
                let grid = DMatrix::from_row_slice(height, width, signal.as_slice());
                let out = &self.basis_rows * grid * self.basis_cols.transpose();
                Ok(row_major_vector(&out))
            }
        }
    }

    pub fn inverse(&self, coefficients: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_len(coefficients)?;
        match self.shape {
            SignalShape::OneD { .. } => Ok(self.basis_rows.transpose() * coefficients),
            SignalShape::TwoD { height, width } => {
                let grid = DMatrix::from_row_slice(height, width, coefficients.as_slice());
                let out = self.basis_rows.transpose() * grid * &self.basis_cols;
                Ok(row_major_vector(&out))
            }
        }
    }

    fn check_len(&self, v: &DVector<f64>) -> Result<()> {
        if v.len() != self.len() {
            return Err(FhError::contract(format!(
                "signal length {} does not match plan length {}",
                v.len(),
                self.len()
            )));
        }
        Ok(())
    }
}

fn row_major_vector(m: &DMatrix<f64>) -> DVector<f64> {
    let mut out = DVector::zeros(m.nrows() * m.ncols());
    let mut idx = 0;
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out[idx] = m[(i, j)];
            idx += 1;
        }
    }
    out
}
