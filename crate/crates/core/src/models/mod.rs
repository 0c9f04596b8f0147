//! Prediction maps: the Gaussian neural process and the ConvCNP baseline.

pub mod cnn;
pub mod convcnp;
pub mod encoding;
pub mod gnp;
pub mod grid;

pub use cnn::{Cnn, CnnSpec};
pub use convcnp::{ConvCnpConfig, ConvCnpModel};
pub use encoding::{canonical, encode_kernel, encode_mean, Encoding2D};
pub use gnp::{GnpConfig, GnpModel, GnpNodes, PsdMap, MAX_RECEPTIVE_FIELD};
pub use grid::{build_grids, Discretisation, Grid1D, Grid2D};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::gp::{Dataset, GaussianFdd};
use crate::tensor::{NodeId, ParamStore, Tape};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    Gnp(GnpConfig),
    Convcnp(ConvCnpConfig),
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            ModelSpec::Gnp(c) => c.validate(),
            ModelSpec::Convcnp(c) => c.validate(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ModelSpec::Gnp(_) => "gnp",
            ModelSpec::Convcnp(_) => "convcnp",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Gnp(GnpModel),
    ConvCnp(ConvCnpModel),
}

impl Model {
    pub fn new(spec: &ModelSpec, seed: u64) -> Result<Self> {
        Ok(match spec {
            ModelSpec::Gnp(c) => Model::Gnp(GnpModel::new(c.clone(), seed)?),
            ModelSpec::Convcnp(c) => Model::ConvCnp(ConvCnpModel::new(c.clone(), seed)?),
        })
    }

    /// Rebuilds a model of layout `spec` holding `params`.
    pub fn from_params(spec: &ModelSpec, params: ParamStore) -> Result<Self> {
        let mut model = Self::new(spec, 0)?;
        match &mut model {
            Model::Gnp(m) => m.replace_params(params)?,
            Model::ConvCnp(m) => m.replace_params(params)?,
        }
        Ok(model)
    }

    pub fn spec(&self) -> ModelSpec {
        match self {
            Model::Gnp(m) => ModelSpec::Gnp(m.config().clone()),
            Model::ConvCnp(m) => ModelSpec::Convcnp(m.config().clone()),
        }
    }

    pub fn params(&self) -> &ParamStore {
        match self {
            Model::Gnp(m) => m.params(),
            Model::ConvCnp(m) => m.params(),
        }
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        match self {
            Model::Gnp(m) => m.params_mut(),
            Model::ConvCnp(m) => m.params_mut(),
        }
    }

    /// `(mean, covariance)` nodes with parameters taken from `store`.
    pub fn forward_on(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        context: &Dataset,
        targets: &[f64],
    ) -> Result<(NodeId, NodeId)> {
        match self {
            Model::Gnp(m) => m.forward_on(tape, store, context, targets).map(|n| (n.mean, n.cov)),
            Model::ConvCnp(m) => m.forward_on(tape, store, context, targets),
        }
    }

    pub fn predict(&self, context: &Dataset, targets: &[f64]) -> Result<GaussianFdd> {
        match self {
            Model::Gnp(m) => m.predict(context, targets),
            Model::ConvCnp(m) => m.predict(context, targets),
        }
    }
}
