use nalgebra::{DMatrix, DVector};
use rand::Rng;

use super::fdd::{Dataset, GaussianFdd};
use super::kernel::KernelSpec;
use super::linalg::{cholesky_safe, DEFAULT_MAX_JITTER};
use crate::error::{Error, Result};

/// Draws `y ~ N(0, K(x, x) + noise_var·I)`.
pub fn gp_sample<R: Rng + ?Sized>(
    kernel: &KernelSpec,
    x: &[f64],
    noise_var: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(Error::InvalidParameter("gp_sample needs at least one input".into()));
    }
    if noise_var < 0.0 {
        return Err(Error::InvalidParameter(format!("noise variance {noise_var} < 0")));
    }
    let mut k = kernel.matrix(x, x)?;
    for i in 0..x.len() {
        k[(i, i)] += noise_var;
    }
    let fdd = GaussianFdd::new(x.to_vec(), DVector::zeros(x.len()), k)?;
    let l = cholesky_safe(&fdd.cov, DEFAULT_MAX_JITTER)?.lower();
    Ok(fdd.sample_with(&l, rng).as_slice().to_vec())
}

/// Posterior over the noiseless function values at `targets` given noisy
/// observations `context`. An empty context returns the prior.
pub fn gp_posterior(
    kernel: &KernelSpec,
    context: &Dataset,
    noise_var: f64,
    targets: &[f64],
) -> Result<GaussianFdd> {
    if !(noise_var > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "posterior noise variance must be positive, got {noise_var}"
        )));
    }
    let ktt = kernel.matrix(targets, targets)?;
    if context.is_empty() {
        return GaussianFdd::new(targets.to_vec(), DVector::zeros(targets.len()), ktt);
    }
    let mut kcc = kernel.matrix(&context.x, &context.x)?;
    for i in 0..context.len() {
        kcc[(i, i)] += noise_var;
    }
    let kct = kernel.matrix(&context.x, targets)?;
    let chol = cholesky_safe(&kcc, DEFAULT_MAX_JITTER)?;
    let alpha = chol.solve(&DVector::from_column_slice(&context.y));
    let mean = kct.transpose() * alpha;
    let v = chol.solve_lower(&kct);
    let cov: DMatrix<f64> = ktt - v.transpose() * v;
    let cov = (&cov + cov.transpose()) * 0.5;
    GaussianFdd::new(targets.to_vec(), mean, cov)
}
