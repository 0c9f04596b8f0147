//! Exact Gaussian-process machinery: kernels, sampling, posterior
//! prediction, Gaussian log densities and PSD linear algebra.

mod fdd;
mod kernel;
pub mod linalg;
mod posterior;

pub use fdd::{gaussian_logpdf, Dataset, GaussianFdd};
pub use kernel::KernelSpec;
pub use linalg::{cholesky_safe, nearest_psd, CholeskyFactor, DEFAULT_MAX_JITTER};
pub use posterior::{gp_posterior, gp_sample};
