//! Gaussian KL with its mean/covariance decomposition, moment matching,
//! the Gaussian divergence, Monte-Carlo KL estimation and the finiteness
//! bound for noisy processes.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::gp::{cholesky_safe, CholeskyFactor, Dataset, GaussianFdd, DEFAULT_MAX_JITTER};

/// `KL = ½(d_K + d_m)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KlReport {
    pub value: f64,
    /// `(m₁−m₂)ᵀ K₂⁻¹ (m₁−m₂)`
    pub mean_term: f64,
    /// `log(|K₂|/|K₁|) + tr(K₂⁻¹K₁) − n`
    pub cov_term: f64,
}

fn dims_match(op: &'static str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch {
            op,
            left: vec![a],
            right: vec![b],
        });
    }
    Ok(())
}

/// Closed-form `KL(p ‖ q)` between two non-degenerate Gaussians.
pub fn gaussian_kl(p: &GaussianFdd, q: &GaussianFdd) -> Result<KlReport> {
    let n = p.dim();
    dims_match("gaussian_kl", n, q.dim())?;
    let fp = cholesky_safe(&p.cov, 0.0).map_err(|_| Error::NotPositiveDefinite)?;
    let fq = cholesky_safe(&q.cov, 0.0).map_err(|_| Error::NotPositiveDefinite)?;
    let diff = &p.mean - &q.mean;
    let mean_term = diff.dot(&fq.solve(&diff));
    let trace = fq.solve_matrix(&p.cov).trace();
    let cov_term = fq.log_det() - fp.log_det() + trace - n as f64;
    Ok(KlReport {
        value: 0.5 * (cov_term + mean_term),
        mean_term,
        cov_term,
    })
}

/// Finite Gaussian mixture on ℝⁿ: a tractable non-Gaussian distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureFdd {
    weights: Vec<f64>,
    components: Vec<GaussianFdd>,
}

impl MixtureFdd {
    pub fn new(weights: Vec<f64>, components: Vec<GaussianFdd>) -> Result<Self> {
        if weights.is_empty() || weights.len() != components.len() {
            return Err(Error::InvalidParameter(format!(
                "{} weights for {} components",
                weights.len(),
                components.len()
            )));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 || weights.iter().any(|w| *w < 0.0) {
            return Err(Error::InvalidParameter(format!(
                "mixture weights must lie on the simplex (sum {total})"
            )));
        }
        let d = components[0].dim();
        for c in &components {
            dims_match("MixtureFdd::new", d, c.dim())?;
        }
        Ok(Self {
            weights,
            components,
        })
    }

    /// Equal-weight mixture.
    pub fn uniform(components: Vec<GaussianFdd>) -> Result<Self> {
        let k = components.len();
        Self::new(vec![1.0 / k as f64; k], components)
    }

    pub fn single(component: GaussianFdd) -> Self {
        Self {
            weights: vec![1.0],
            components: vec![component],
        }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn components(&self) -> &[GaussianFdd] {
        &self.components
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }
}

/// The moment-matched Gaussian `N(µ)`.
pub fn moment_match(mu: &MixtureFdd) -> GaussianFdd {
    if mu.components.len() == 1 {
        return mu.components[0].clone();
    }
    let n = mu.dim();
    let mut mean = DVector::zeros(n);
    let mut second = DMatrix::zeros(n, n);
    for (w, c) in mu.weights.iter().zip(&mu.components) {
        mean += &c.mean * *w;
        second += (&c.cov + &c.mean * c.mean.transpose()) * *w;
    }
    let cov = second - &mean * mean.transpose();
    let cov = (&cov + cov.transpose()) * 0.5;
    GaussianFdd {
        x: mu.components[0].x.clone(),
        mean,
        cov,
    }
}

/// `G(µ, ν) = KL(N(µ) ‖ ν)`.
pub fn gaussian_divergence(mu: &MixtureFdd, nu: &GaussianFdd) -> Result<f64> {
    Ok(gaussian_kl(&moment_match(mu), nu)?.value)
}

/// A distribution on ℝⁿ with a computable log density.
pub trait LogDensity {
    fn dim(&self) -> usize;
    fn log_density(&self, y: &DVector<f64>) -> f64;
}

/// A distribution that can also be sampled.
pub trait Sample: LogDensity {
    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64>;
}

/// Gaussian with a cached factorisation.
#[derive(Debug, Clone)]
pub struct GaussianDensity {
    fdd: GaussianFdd,
    factor: CholeskyFactor,
    lower: DMatrix<f64>,
    log_norm: f64,
}

impl GaussianDensity {
    pub fn new(fdd: &GaussianFdd) -> Result<Self> {
        let factor = cholesky_safe(&fdd.cov, DEFAULT_MAX_JITTER)?;
        let lower = factor.lower();
        let log_norm = -0.5 * (factor.log_det() + fdd.dim() as f64 * (2.0 * PI).ln());
        Ok(Self {
            fdd: fdd.clone(),
            factor,
            lower,
            log_norm,
        })
    }
}

impl LogDensity for GaussianDensity {
    fn dim(&self) -> usize {
        self.fdd.dim()
    }

    fn log_density(&self, y: &DVector<f64>) -> f64 {
        let r = y - &self.fdd.mean;
        self.log_norm - 0.5 * r.dot(&self.factor.solve(&r))
    }
}

impl Sample for GaussianDensity {
    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        self.fdd.sample_with(&self.lower, rng)
    }
}

#[derive(Debug, Clone)]
pub struct MixtureDensity {
    log_weights: Vec<f64>,
    cumulative: Vec<f64>,
    parts: Vec<GaussianDensity>,
}

impl MixtureDensity {
    pub fn new(mu: &MixtureFdd) -> Result<Self> {
        let parts = mu
            .components
            .iter()
            .map(GaussianDensity::new)
            .collect::<Result<Vec<_>>>()?;
        let mut acc = 0.0;
        let cumulative = mu
            .weights
            .iter()
            .map(|w| {
                acc += w;
                acc
            })
            .collect();
        Ok(Self {
            log_weights: mu.weights.iter().map(|w| w.ln()).collect(),
            cumulative,
            parts,
        })
    }
}

impl LogDensity for MixtureDensity {
    fn dim(&self) -> usize {
        self.parts[0].dim()
    }

    fn log_density(&self, y: &DVector<f64>) -> f64 {
        let terms: Vec<f64> = self
            .parts
            .iter()
            .zip(&self.log_weights)
            .map(|(p, lw)| lw + p.log_density(y))
            .collect();
        let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
    }
}

impl Sample for MixtureDensity {
    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let u: f64 = rng.gen();
        let k = self
            .cumulative
            .iter()
            .position(|&c| u < c)
            .unwrap_or(self.parts.len() - 1);
        self.parts[k].draw(rng)
    }
}

/// Monte-Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub estimate: f64,
    pub stderr: f64,
}

impl McEstimate {
    pub fn from_samples(samples: &[f64]) -> Self {
        let n = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / n;
        let var = if samples.len() > 1 {
            samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Self {
            estimate: mean,
            stderr: (var / n).sqrt(),
        }
    }
}

/// `(1/N) Σ [log p(yᵢ) − log q(yᵢ)]` with `yᵢ ~ p`.
pub fn mc_kl<P, Q, R>(p: &P, q: &Q, n_samples: usize, rng: &mut R) -> Result<McEstimate>
where
    P: Sample,
    Q: LogDensity,
    R: Rng + ?Sized,
{
    dims_match("mc_kl", p.dim(), q.dim())?;
    if n_samples == 0 {
        return Err(Error::InvalidParameter("mc_kl needs at least one sample".into()));
    }
    let terms: Vec<f64> = (0..n_samples)
        .map(|_| {
            let y = p.draw(rng);
            p.log_density(&y) - q.log_density(&y)
        })
        .collect();
    Ok(McEstimate::from_samples(&terms))
}

/// `4n²(M ∨ 1)² / σ²`, the bound on the KL between n-dimensional marginals
/// of two noisy processes with moments bounded by `M` and noise variance
/// at least `σ²`.
pub fn kl_upper_bound(n: usize, m: f64, sigma2: f64) -> Result<f64> {
    if n < 2 || !(m > 0.0) || !(sigma2 > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "kl_upper_bound needs n ≥ 2, M > 0, σ² > 0 (got {n}, {m}, {sigma2})"
        )));
    }
    let nf = n as f64;
    Ok(4.0 * nf * nf * m.max(1.0).powi(2) / sigma2)
}

/// Largest absolute mean or covariance entry across the given distributions.
pub fn moment_bound(fdds: &[&GaussianFdd]) -> f64 {
    fdds.iter()
        .flat_map(|f| f.mean.iter().chain(f.cov.iter()))
        .fold(0.0, |acc: f64, v| acc.max(v.abs()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AveragedKl {
    pub estimate: McEstimate,
    /// Individual `KL(P_x π_f(D), P_x π(D))` draws.
    pub terms: Vec<f64>,
    /// `M` per draw: bound on the means and covariances of both marginals.
    pub moment_bounds: Vec<f64>,
}

/// MC estimate of `E_{p(D) p(x)} KL(P_x truth(D) ‖ P_x model(D))` over index
/// sets of size `n`, with `noise_var` added to both covariances.
#[allow(clippy::too_many_arguments)]
pub fn averaged_kl<T, M, X, D, R>(
    truth: T,
    model: M,
    mut sample_inputs: X,
    mut sample_dataset: D,
    n_outer: usize,
    n: usize,
    noise_var: f64,
    rng: &mut R,
) -> Result<AveragedKl>
where
    T: Fn(&Dataset, &[f64]) -> Result<GaussianFdd>,
    M: Fn(&Dataset, &[f64]) -> Result<GaussianFdd>,
    X: FnMut(&mut R, usize) -> Vec<f64>,
    D: FnMut(&mut R) -> Result<Dataset>,
    R: Rng + ?Sized,
{
    if n < 2 || n_outer == 0 {
        return Err(Error::InvalidParameter(format!(
            "averaged_kl needs n ≥ 2 and n_outer ≥ 1 (got {n}, {n_outer})"
        )));
    }
    let mut terms = Vec::with_capacity(n_outer);
    let mut bounds = Vec::with_capacity(n_outer);
    for _ in 0..n_outer {
        let data = sample_dataset(rng)?;
        let x = sample_inputs(rng, n);
        let p = truth(&data, &x)?.with_extra_diag(noise_var);
        let q = model(&data, &x)?.with_extra_diag(noise_var);
        terms.push(gaussian_kl(&p, &q)?.value);
        bounds.push(moment_bound(&[&p, &q]));
    }
    Ok(AveragedKl {
        estimate: McEstimate::from_samples(&terms),
        terms,
        moment_bounds: bounds,
    })
}

/// Running maximum of `KL(P_S p ‖ P_S q)` over the nested prefixes
/// `S = {0..k}` for each `k` in `sizes`. A lower envelope of the
/// process-level KL; diagnostic only.
pub fn kl_lower_envelope(p: &GaussianFdd, q: &GaussianFdd, sizes: &[usize]) -> Result<Vec<f64>> {
    dims_match("kl_lower_envelope", p.dim(), q.dim())?;
    let mut best = 0.0f64;
    sizes
        .iter()
        .map(|&k| {
            let idx: Vec<usize> = (0..k.min(p.dim())).collect();
            let kl = gaussian_kl(&p.marginal(&idx), &q.marginal(&idx))?.value;
            best = best.max(kl);
            Ok(best)
        })
        .collect()
}
