use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::cnn::{Cnn, CnnSpec};
use super::encoding::{bumps, encode_kernel_on, encode_mean_on, Encoding2D};
use super::grid::{build_grids, Discretisation, Grid1D};
use crate::error::{Error, Result};
use crate::gp::{Dataset, GaussianFdd};
use crate::tensor::{softplus, Activation, NodeId, ParamId, ParamStore, Tape, Tensor};

/// How the kernel CNN output is turned into a PSD grid covariance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PsdMap {
    /// `K = F·Fᵀ`.
    #[default]
    FactorProduct,
    /// `K = Π_psd(F)` (nearest PSD matrix in Frobenius norm).
    Projection,
}

fn default_mean_cnn() -> CnnSpec {
    CnnSpec {
        layers: 6,
        channels: 16,
        kernel_size: 5,
        bias: true,
    }
}

fn default_kernel_cnn() -> CnnSpec {
    CnnSpec {
        layers: 6,
        channels: 8,
        kernel_size: 5,
        bias: true,
    }
}

fn default_lengthscale() -> f64 {
    0.1
}

fn default_noise() -> f64 {
    0.0025
}

fn default_true() -> bool {
    true
}

fn default_output_scale() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GnpConfig {
    #[serde(default)]
    pub discretisation: Discretisation,
    #[serde(default = "default_mean_cnn")]
    pub mean_cnn: CnnSpec,
    #[serde(default = "default_kernel_cnn")]
    pub kernel_cnn: CnnSpec,
    #[serde(default)]
    pub activation: Activation,
    /// Initial encoder (and decoder) bump lengthscale.
    #[serde(default = "default_lengthscale")]
    pub init_lengthscale: f64,
    #[serde(default = "default_true")]
    pub tie_decoder_lengthscale: bool,
    /// Initial decoder lengthscale when untied; defaults to `init_lengthscale`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_decoder_lengthscale: Option<f64>,
    #[serde(default = "default_noise")]
    pub init_noise_var: f64,
    #[serde(default)]
    pub psd: PsdMap,
    /// Multiplies the initial last-layer weights of both CNNs.
    #[serde(default = "default_output_scale")]
    pub init_output_scale: f64,
}

impl Default for GnpConfig {
    fn default() -> Self {
        Self {
            discretisation: Discretisation::default(),
            mean_cnn: default_mean_cnn(),
            kernel_cnn: default_kernel_cnn(),
            activation: Activation::default(),
            init_lengthscale: default_lengthscale(),
            tie_decoder_lengthscale: true,
            init_decoder_lengthscale: None,
            init_noise_var: default_noise(),
            psd: PsdMap::default(),
            init_output_scale: default_output_scale(),
        }
    }
}

/// Largest allowed CNN receptive field, in input units.
pub const MAX_RECEPTIVE_FIELD: f64 = 8.0;

pub(crate) fn check_receptive_field(spec: &CnnSpec, disc: &Discretisation) -> Result<()> {
    let units = spec.receptive_field() as f64 / disc.points_per_unit;
    if units > MAX_RECEPTIVE_FIELD + 1e-12 {
        return Err(Error::InvalidParameter(format!(
            "receptive field {units:.2} units exceeds {MAX_RECEPTIVE_FIELD}"
        )));
    }
    Ok(())
}

impl GnpConfig {
    pub fn validate(&self) -> Result<()> {
        self.discretisation.validate()?;
        for spec in [&self.mean_cnn, &self.kernel_cnn] {
            spec.validate()?;
            check_receptive_field(spec, &self.discretisation)?;
        }
        if self.tie_decoder_lengthscale && self.init_decoder_lengthscale.is_some() {
            return Err(Error::Config(
                "init_decoder_lengthscale requires tie_decoder_lengthscale = false".into(),
            ));
        }
        if !(self.init_decoder_lengthscale.unwrap_or(1.0) > 0.0) {
            return Err(Error::InvalidParameter("decoder lengthscale must be positive".into()));
        }
        if !(self.init_lengthscale > 0.0) || !(self.init_noise_var > 0.0) || !self.init_output_scale.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "lengthscale, noise variance must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Inverse of softplus.
pub(crate) fn softplus_inv(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

pub(crate) fn scale_last_layer(store: &mut ParamStore, cnn: &Cnn, factor: f64) {
    let (w, _) = cnn.last_layer();
    store.get_mut(w).data_mut().iter_mut().for_each(|v| *v *= factor);
}

#[derive(Debug, Clone, PartialEq)]
struct GnpParams {
    mean_enc_log_ls: ParamId,
    mean_dec_log_ls: ParamId,
    kernel_enc_log_ls: ParamId,
    kernel_dec_log_ls: ParamId,
    noise_raw: ParamId,
    mean_cnn: Cnn,
    kernel_cnn: Cnn,
}

/// Gaussian neural process: ConvDeepSet mean path and a 2D-encoded
/// kernel path.
#[derive(Debug, Clone, PartialEq)]
pub struct GnpModel {
    config: GnpConfig,
    params: ParamStore,
    ids: GnpParams,
}

/// Tape nodes of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct GnpNodes {
    pub mean: NodeId,
    /// Target covariance without observation noise.
    pub kernel: NodeId,
    pub cov: NodeId,
}

impl GnpModel {
    pub fn new(config: GnpConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let log_ls = Tensor::scalar(config.init_lengthscale.ln());
        let dec_ls = Tensor::scalar(config.init_decoder_lengthscale.unwrap_or(config.init_lengthscale).ln());
        let mean_enc_log_ls = store.add("mean.encoder.log_lengthscale", log_ls.clone());
        let mean_dec_log_ls = if config.tie_decoder_lengthscale {
            mean_enc_log_ls
        } else {
            store.add("mean.decoder.log_lengthscale", dec_ls.clone())
        };
        let kernel_enc_log_ls = store.add("kernel.encoder.log_lengthscale", log_ls.clone());
        let kernel_dec_log_ls = if config.tie_decoder_lengthscale {
            kernel_enc_log_ls
        } else {
            store.add("kernel.decoder.log_lengthscale", dec_ls)
        };
        let noise_raw = store.add("noise.raw", Tensor::scalar(softplus_inv(config.init_noise_var)));
        let act = config.activation;
        let mean_cnn = Cnn::new(&mut store, "mean.cnn", &config.mean_cnn, 1, 2, 1, act, &mut rng)?;
        let kernel_cnn = Cnn::new(&mut store, "kernel.cnn", &config.kernel_cnn, 2, 3, 1, act, &mut rng)?;
        scale_last_layer(&mut store, &mean_cnn, config.init_output_scale);
        scale_last_layer(&mut store, &kernel_cnn, config.init_output_scale);
        Ok(Self {
            config,
            params: store,
            ids: GnpParams {
                mean_enc_log_ls,
                mean_dec_log_ls,
                kernel_enc_log_ls,
                kernel_dec_log_ls,
                noise_raw,
                mean_cnn,
                kernel_cnn,
            },
        })
    }

    pub fn config(&self) -> &GnpConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn noise_var(&self) -> f64 {
        softplus(self.params.get(self.ids.noise_raw).data()[0])
    }

    /// Current `(encoder, decoder)` lengthscales of the kernel path.
    pub fn kernel_lengthscales(&self) -> (f64, f64) {
        let get = |id| self.params.get(id).data()[0].exp();
        (get(self.ids.kernel_enc_log_ls), get(self.ids.kernel_dec_log_ls))
    }

    fn lengthscale(&self, tape: &mut Tape, store: &ParamStore, id: ParamId) -> NodeId {
        let p = tape.param(store, id);
        tape.exp(p)
    }

    /// Forward pass recorded on `tape` using parameters from `store`
    /// (which must have this model's layout).
    pub fn forward_on(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        context: &Dataset,
        targets: &[f64],
    ) -> Result<GnpNodes> {
        if targets.is_empty() {
            return Err(Error::InvalidParameter("no target inputs".into()));
        }
        let (g1, g2) = build_grids(&context.x, targets, &self.config.discretisation)?;
        let m = g1.len();

        let ls = self.lengthscale(tape, store, self.ids.mean_enc_log_ls);
        let h = encode_mean_on(tape, context, &g1, ls)?;
        let f = self.ids.mean_cnn.forward(tape, store, h)?;
        let dec = self.lengthscale(tape, store, self.ids.mean_dec_log_ls);
        let psi = bumps(tape, targets, &g1.nodes, dec)?;
        let mean = tape.matmul(psi, f)?;
        let mean = tape.reshape(mean, vec![targets.len()])?;

        let ls = self.lengthscale(tape, store, self.ids.kernel_enc_log_ls);
        let h = encode_kernel_on(tape, context, &g2, ls, true)?;
        let kernel = self.kernel_from_encoding(tape, store, h, m, &g1, targets)?;

        let raw = tape.param(store, self.ids.noise_raw);
        let noise = tape.softplus(raw);
        let cov = tape.add_identity(kernel, noise)?;
        Ok(GnpNodes { mean, kernel, cov })
    }

    fn kernel_from_encoding(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        h: NodeId,
        m: usize,
        grid: &Grid1D,
        targets: &[f64],
    ) -> Result<NodeId> {
        let f = self.ids.kernel_cnn.forward(tape, store, h)?;
        let f = tape.reshape(f, vec![m, m])?;
        let dec = self.lengthscale(tape, store, self.ids.kernel_dec_log_ls);
        let psi = bumps(tape, targets, &grid.nodes, dec)?;
        match self.config.psd {
            PsdMap::FactorProduct => {
                let a = tape.matmul(psi, f)?;
                let at = tape.transpose(a)?;
                tape.matmul(a, at)
            }
            PsdMap::Projection => {
                let k = tape.nearest_psd(f)?;
                let pk = tape.matmul(psi, k)?;
                let pt = tape.transpose(psi)?;
                tape.matmul(pk, pt)
            }
        }
    }

    /// Predictive distribution at `targets` (observation noise included).
    pub fn predict(&self, context: &Dataset, targets: &[f64]) -> Result<GaussianFdd> {
        let mut tape = Tape::new();
        let nodes = self.forward_on(&mut tape, &self.params, context, targets)?;
        let t = targets.len();
        let mean = DVector::from_column_slice(tape.value(nodes.mean).data());
        let cov = DMatrix::from_row_slice(t, t, tape.value(nodes.cov).data());
        GaussianFdd::new(targets.to_vec(), mean, cov)
    }

    /// Kernel-path encoding this model would compute for `context`.
    pub fn encode_kernel(&self, context: &Dataset, targets: &[f64]) -> Result<Encoding2D> {
        let (_, g2) = build_grids(&context.x, targets, &self.config.discretisation)?;
        let l = self.params.get(self.ids.kernel_enc_log_ls).data()[0].exp();
        super::encoding::encode_kernel(context, &g2, l)
    }

    /// Noise-free target covariance from a precomputed encoding.
    pub fn kernel_map(&self, encoding: &Encoding2D, targets: &[f64]) -> Result<DMatrix<f64>> {
        let mut tape = Tape::new();
        let h = tape.constant(encoding.h.clone());
        let m = encoding.side();
        let k = self.kernel_from_encoding(&mut tape, &self.params, h, m, &encoding.grid.axis, targets)?;
        let t = targets.len();
        Ok(DMatrix::from_row_slice(t, t, tape.value(k).data()))
    }

    /// Grid covariance `K_grid` and decoder weights `Ψ′` for an encoding.
    pub fn grid_covariance(&self, encoding: &Encoding2D, targets: &[f64]) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let mut tape = Tape::new();
        let h = tape.constant(encoding.h.clone());
        let m = encoding.side();
        let f = self.ids.kernel_cnn.forward(&mut tape, &self.params, h)?;
        let f = tape.reshape(f, vec![m, m])?;
        let k = match self.config.psd {
            PsdMap::FactorProduct => {
                let ft = tape.transpose(f)?;
                tape.matmul(f, ft)?
            }
            PsdMap::Projection => tape.nearest_psd(f)?,
        };
        let dec = self.lengthscale(&mut tape, &self.params, self.ids.kernel_dec_log_ls);
        let psi = bumps(&mut tape, targets, &encoding.grid.axis.nodes, dec)?;
        Ok((
            DMatrix::from_row_slice(m, m, tape.value(k).data()),
            DMatrix::from_row_slice(targets.len(), m, tape.value(psi).data()),
        ))
    }

    /// Empty-context prior covariance `cov(0, lag)` for each lag; the noise
    /// variance is excluded.
    pub fn extract_prior_covariance(&self, lags: &[f64]) -> Result<Vec<f64>> {
        lags.iter()
            .map(|&lag| {
                let targets = if lag == 0.0 { vec![0.0] } else { vec![0.0, lag] };
                let mut tape = Tape::new();
                let nodes = self.forward_on(&mut tape, &self.params, &Dataset::empty(), &targets)?;
                let k = tape.value(nodes.kernel);
                Ok(k.data()[targets.len() - 1])
            })
            .collect()
    }

    pub(crate) fn replace_params(&mut self, params: ParamStore) -> Result<()> {
        check_layout(&self.params, &params)?;
        self.params = params;
        Ok(())
    }
}

pub(crate) fn check_layout(expected: &ParamStore, found: &ParamStore) -> Result<()> {
    if expected.len() != found.len() {
        return Err(Error::Config(format!(
            "parameter count {} does not match model layout {}",
            found.len(),
            expected.len()
        )));
    }
    for ((_, na, ta), (_, nb, tb)) in expected.iter().zip(found.iter()) {
        if na != nb || ta.shape() != tb.shape() {
            return Err(Error::Config(format!(
                "parameter {nb} {:?} does not match model layout {na} {:?}",
                tb.shape(),
                ta.shape()
            )));
        }
        if !tb.all_finite() {
            return Err(Error::Config(format!("parameter {nb} has non-finite values")));
        }
    }
    Ok(())
}
