use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Upper end of the jitter ladder used by samplers and oracles.
pub const DEFAULT_MAX_JITTER: f64 = 1e-6;
const FIRST_JITTER: f64 = 1e-12;

/// Lower Cholesky factor of `A + jitter·I`.
#[derive(Debug, Clone)]
pub struct CholeskyFactor {
    chol: Cholesky<f64, Dyn>,
    jitter: f64,
}

impl CholeskyFactor {
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn lower(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    pub fn dim(&self) -> usize {
        self.chol.l_dirty().nrows()
    }

    /// `(A + jitter·I)⁻¹ b`.
    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    pub fn solve_matrix(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(b)
    }

    /// `L⁻¹ b`.
    pub fn solve_lower(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol
            .l_dirty()
            .solve_lower_triangular(b)
            .expect("Cholesky factor has a positive diagonal")
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }

    /// `log |A + jitter·I|`.
    pub fn log_det(&self) -> f64 {
        let l = self.chol.l_dirty();
        2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>()
    }
}

/// Cholesky with a geometric jitter ladder: tries `A` as is, then
/// `A + jitter·I` for jitter = 1e-12, 1e-11, … while jitter ≤ `max_jitter`.
pub fn cholesky_safe(a: &DMatrix<f64>, max_jitter: f64) -> Result<CholeskyFactor> {
    if !a.is_square() {
        return Err(Error::ShapeMismatch {
            op: "cholesky",
            left: vec![a.nrows(), a.ncols()],
            right: vec![a.ncols(), a.nrows()],
        });
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::Cholesky { jitter: 0.0 });
    }
    let n = a.nrows();
    let mut jitter = 0.0;
    let mut last: f64 = 0.0;
    loop {
        let mut shifted = a.clone();
        for i in 0..n {
            shifted[(i, i)] += jitter;
        }
        if let Some(chol) = Cholesky::new(shifted) {
            return Ok(CholeskyFactor { chol, jitter });
        }
        last = last.max(jitter);
        jitter = if jitter == 0.0 { FIRST_JITTER } else { jitter * 10.0 };
        if jitter > max_jitter * (1.0 + 1e-9) {
            return Err(Error::Cholesky { jitter: last });
        }
    }
}

/// Frobenius-nearest symmetric PSD matrix: symmetrise, then clip negative
/// eigenvalues to zero.
pub fn nearest_psd(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !a.is_square() {
        return Err(Error::ShapeMismatch {
            op: "nearest_psd",
            left: vec![a.nrows(), a.ncols()],
            right: vec![a.ncols(), a.nrows()],
        });
    }
    let sym = (a + a.transpose()) * 0.5;
    let eig = sym
        .try_symmetric_eigen(1e-15, 10_000)
        .ok_or(Error::EigenDecomposition)?;
    let clipped = eig.eigenvalues.map(|v| v.max(0.0));
    let q = &eig.eigenvectors;
    let out = q * DMatrix::from_diagonal(&clipped) * q.transpose();
    Ok((&out + out.transpose()) * 0.5)
}
