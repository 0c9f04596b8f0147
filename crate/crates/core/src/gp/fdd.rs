use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::linalg::{cholesky_safe, CholeskyFactor, DEFAULT_MAX_JITTER};
use crate::error::{Error, Result};

/// Finite set of `(input, output)` observations. May be empty.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

impl Dataset {
    pub fn new(x: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        if x.len() != y.len() {
            return Err(Error::ShapeMismatch {
                op: "Dataset::new",
                left: vec![x.len()],
                right: vec![y.len()],
            });
        }
        Ok(Self { x, y })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    /// Concatenation `self ∪ other`.
    pub fn union(&self, other: &Dataset) -> Dataset {
        Dataset {
            x: self.x.iter().chain(&other.x).copied().collect(),
            y: self.y.iter().chain(&other.y).copied().collect(),
        }
    }

    /// Same pairs reordered by `perm`.
    pub fn permuted(&self, perm: &[usize]) -> Dataset {
        Dataset {
            x: perm.iter().map(|&i| self.x[i]).collect(),
            y: perm.iter().map(|&i| self.y[i]).collect(),
        }
    }

    pub fn shifted(&self, by: f64) -> Dataset {
        Dataset {
            x: self.x.iter().map(|v| v + by).collect(),
            y: self.y.clone(),
        }
    }
}

/// Gaussian finite-dimensional distribution `N(mean, cov)` over index set `x`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianFdd {
    pub x: Vec<f64>,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianFdd {
    pub fn new(x: Vec<f64>, mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let n = mean.len();
        if cov.nrows() != n || cov.ncols() != n || (!x.is_empty() && x.len() != n) {
            return Err(Error::ShapeMismatch {
                op: "GaussianFdd::new",
                left: vec![x.len(), n],
                right: vec![cov.nrows(), cov.ncols()],
            });
        }
        Ok(Self { x, mean, cov })
    }

    /// Distribution without an attached index set (pure `N(m, K)` on ℝⁿ).
    pub fn unindexed(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        Self::new(Vec::new(), mean, cov)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn with_extra_diag(&self, extra: f64) -> Self {
        let mut out = self.clone();
        for i in 0..out.dim() {
            out.cov[(i, i)] += extra;
        }
        out
    }

    /// Zeroes all off-diagonal covariance entries.
    pub fn diagonal(&self) -> Self {
        let mut out = self.clone();
        out.cov = DMatrix::from_diagonal(&self.cov.diagonal());
        out
    }

    /// Coordinate projection onto `indices`.
    pub fn marginal(&self, indices: &[usize]) -> Self {
        let k = indices.len();
        Self {
            x: if self.x.is_empty() {
                Vec::new()
            } else {
                indices.iter().map(|&i| self.x[i]).collect()
            },
            mean: DVector::from_fn(k, |a, _| self.mean[indices[a]]),
            cov: DMatrix::from_fn(k, k, |a, b| self.cov[(indices[a], indices[b])]),
        }
    }

    pub fn factor(&self, max_jitter: f64) -> Result<CholeskyFactor> {
        cholesky_safe(&self.cov, max_jitter)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<DVector<f64>> {
        let l = self.factor(DEFAULT_MAX_JITTER)?.lower();
        Ok(self.sample_with(&l, rng))
    }

    pub(crate) fn sample_with<R: Rng + ?Sized>(
        &self,
        lower: &DMatrix<f64>,
        rng: &mut R,
    ) -> DVector<f64> {
        let z = DVector::from_fn(self.dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
        &self.mean + lower * z
    }

    pub fn logpdf(&self, y: &[f64]) -> Result<f64> {
        gaussian_logpdf(y, self, 0.0)
    }
}

/// Exact log density of `y` under `N(m, K + extra_diag·I)`.
pub fn gaussian_logpdf(y: &[f64], fdd: &GaussianFdd, extra_diag: f64) -> Result<f64> {
    let n = fdd.dim();
    if y.len() != n {
        return Err(Error::ShapeMismatch {
            op: "gaussian_logpdf",
            left: vec![y.len()],
            right: vec![n],
        });
    }
    let mut cov = fdd.cov.clone();
    for i in 0..n {
        cov[(i, i)] += extra_diag;
    }
    let chol = cholesky_safe(&cov, 0.0).map_err(|_| Error::NotPositiveDefinite)?;
    let resid = DVector::from_iterator(n, y.iter().zip(fdd.mean.iter()).map(|(a, b)| a - b));
    let quad = resid.dot(&chol.solve(&resid));
    Ok(-0.5 * (quad + chol.log_det() + n as f64 * (2.0 * PI).ln()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn standard_normal_at_zero() {
        let fdd = GaussianFdd::unindexed(DVector::zeros(1), DMatrix::identity(1, 1)).unwrap();
        assert!((fdd.logpdf(&[0.0]).unwrap() + 0.918_938_533_204_672_7).abs() < 1e-12);
    }

    #[test]
    fn at_mean_only_normaliser_remains() {
        let k = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 0.5]);
        let m = DVector::from_vec(vec![0.4, -1.0]);
        let fdd = GaussianFdd::unindexed(m.clone(), k.clone()).unwrap();
        let want = -0.5 * ((2.0 * PI).powi(2) * k.determinant()).ln();
        assert!((fdd.logpdf(m.as_slice()).unwrap() - want).abs() < 1e-12);
    }

    // Explicit inverse and determinant, no factorisation.
    fn logpdf_explicit(y: &[f64], m: &DVector<f64>, k: &DMatrix<f64>) -> f64 {
        let r = DVector::from_column_slice(y) - m;
        let inv = k.clone().try_inverse().unwrap();
        let n = y.len() as f64;
        -0.5 * ((r.transpose() * inv * &r)[(0, 0)] + k.determinant().ln() + n * (2.0 * PI).ln())
    }

    #[test]
    fn matches_explicit_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let b = DMatrix::from_fn(4, 4, |_, _| rng.gen_range(-1.0..1.0));
            let k = &b * b.transpose() + DMatrix::identity(4, 4) * 0.1;
            let m = DVector::from_fn(4, |_, _| rng.gen_range(-1.0..1.0));
            let y: Vec<f64> = (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let fdd = GaussianFdd::unindexed(m.clone(), k.clone()).unwrap();
            assert!((fdd.logpdf(&y).unwrap() - logpdf_explicit(&y, &m, &k)).abs() < 1e-9);
        }
    }

    #[test]
    fn integrates_to_one() {
        let fdd = GaussianFdd::unindexed(
            DVector::from_vec(vec![0.3]),
            DMatrix::from_element(1, 1, 0.7),
        )
        .unwrap();
        let (lo, hi, n) = (-10.0, 10.0, 20_000);
        let h = (hi - lo) / n as f64;
        let total: f64 = (0..n)
            .map(|i| fdd.logpdf(&[lo + (i as f64 + 0.5) * h]).unwrap().exp() * h)
            .sum();
        assert!((total - 1.0).abs() < 1e-3, "{total}");
    }

    #[test]
    fn non_pd_is_an_error() {
        let fdd = GaussianFdd::unindexed(
            DVector::zeros(2),
            DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]),
        )
        .unwrap();
        assert!(matches!(fdd.logpdf(&[0.0, 0.0]), Err(Error::NotPositiveDefinite)));
    }
}
