use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::cnn::{Cnn, CnnSpec};
use super::encoding::{bumps, encode_mean_on};
use super::gnp::{check_layout, check_receptive_field};
use super::grid::{build_grids, Discretisation};
use crate::error::{Error, Result};
use crate::gp::{Dataset, GaussianFdd};
use crate::tensor::{Activation, NodeId, ParamId, ParamStore, Tape, Tensor};

fn default_cnn() -> CnnSpec {
    CnnSpec {
        layers: 6,
        channels: 16,
        kernel_size: 5,
        bias: true,
    }
}

fn default_lengthscale() -> f64 {
    0.1
}

fn default_floor() -> f64 {
    1e-4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvCnpConfig {
    #[serde(default)]
    pub discretisation: Discretisation,
    #[serde(default = "default_cnn")]
    pub cnn: CnnSpec,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default = "default_lengthscale")]
    pub init_lengthscale: f64,
    /// Added to every predicted variance.
    #[serde(default = "default_floor")]
    pub variance_floor: f64,
}

impl Default for ConvCnpConfig {
    fn default() -> Self {
        Self {
            discretisation: Discretisation::default(),
            cnn: default_cnn(),
            activation: Activation::default(),
            init_lengthscale: default_lengthscale(),
            variance_floor: default_floor(),
        }
    }
}

impl ConvCnpConfig {
    pub fn validate(&self) -> Result<()> {
        self.discretisation.validate()?;
        self.cnn.validate()?;
        check_receptive_field(&self.cnn, &self.discretisation)?;
        if !(self.init_lengthscale > 0.0) || !(self.variance_floor > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "lengthscale and variance floor must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Conditional neural process with a ConvDeepSet encoder and independent
/// Gaussian marginals.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvCnpModel {
    config: ConvCnpConfig,
    params: ParamStore,
    log_ls: ParamId,
    cnn: Cnn,
}

impl ConvCnpModel {
    pub fn new(config: ConvCnpConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let log_ls = params.add("encoder.log_lengthscale", Tensor::scalar(config.init_lengthscale.ln()));
        let cnn = Cnn::new(&mut params, "cnn", &config.cnn, 1, 2, 2, config.activation, &mut rng)?;
        Ok(Self {
            config,
            params,
            log_ls,
            cnn,
        })
    }

    pub fn config(&self) -> &ConvCnpConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Returns `(mean, diagonal covariance)` nodes.
    pub fn forward_on(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        context: &Dataset,
        targets: &[f64],
    ) -> Result<(NodeId, NodeId)> {
        if targets.is_empty() {
            return Err(Error::InvalidParameter("no target inputs".into()));
        }
        let (g1, _) = build_grids(&context.x, targets, &self.config.discretisation)?;
        let p = tape.param(store, self.log_ls);
        let ls = tape.exp(p);
        let h = encode_mean_on(tape, context, &g1, ls)?;
        let f = self.cnn.forward(tape, store, h)?;
        let psi = bumps(tape, targets, &g1.nodes, ls)?;
        let out = tape.matmul(psi, f)?;
        let mean = tape.channel(out, 0)?;
        let pre = tape.channel(out, 1)?;
        let var = tape.softplus(pre);
        let floor = tape.constant(Tensor::scalar(self.config.variance_floor));
        let var = tape.add_scalar(var, floor)?;
        let cov = tape.diag(var)?;
        Ok((mean, cov))
    }

    pub fn predict(&self, context: &Dataset, targets: &[f64]) -> Result<GaussianFdd> {
        let mut tape = Tape::new();
        let (mean, cov) = self.forward_on(&mut tape, &self.params, context, targets)?;
        let t = targets.len();
        GaussianFdd::new(
            targets.to_vec(),
            DVector::from_column_slice(tape.value(mean).data()),
            DMatrix::from_row_slice(t, t, tape.value(cov).data()),
        )
    }

    pub(crate) fn replace_params(&mut self, params: ParamStore) -> Result<()> {
        check_layout(&self.params, &params)?;
        self.params = params;
        Ok(())
    }
}
