use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Activation, NodeId, ParamId, ParamStore, Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CnnSpec {
    pub layers: usize,
    pub channels: usize,
    pub kernel_size: usize,
    /// Without biases the map is positively homogeneous: zero in, zero out.
    #[serde(default = "yes")]
    pub bias: bool,
}

fn yes() -> bool {
    true
}

impl CnnSpec {
    /// Receptive field in grid cells.
    pub fn receptive_field(&self) -> usize {
        self.layers * (self.kernel_size - 1) + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.channels == 0 || self.kernel_size % 2 == 0 {
            return Err(Error::InvalidParameter(format!(
                "CNN needs ≥1 layer, ≥1 channel and an odd kernel size: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Plain stack of same-padded convolutions; activation between layers,
/// none after the last.
#[derive(Debug, Clone, PartialEq)]
pub struct Cnn {
    layers: Vec<(ParamId, Option<ParamId>)>,
    activation: Activation,
}

impl Cnn {
    /// Registers parameters under `prefix` with He-style initialisation.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        spec: &CnnSpec,
        dims: usize,
        in_channels: usize,
        out_channels: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        spec.validate()?;
        let k = spec.kernel_size;
        let mut layers = Vec::with_capacity(spec.layers);
        for l in 0..spec.layers {
            let cin = if l == 0 { in_channels } else { spec.channels };
            let last = l + 1 == spec.layers;
            let cout = if last { out_channels } else { spec.channels };
            let spatial = if dims == 1 { vec![k] } else { vec![k, k] };
            let fan_in = spatial.iter().product::<usize>() * cin;
            let gain = if last { 1.0 } else { 2.0 };
            let normal = Normal::new(0.0, (gain / fan_in as f64).sqrt())
                .map_err(|e| Error::InvalidParameter(e.to_string()))?;
            let mut shape = spatial;
            shape.extend([cin, cout]);
            let n = shape.iter().product();
            let w = Tensor::new(shape, (0..n).map(|_| normal.sample(rng)).collect())?;
            let w = store.add(format!("{prefix}.conv{l}.weight"), w);
            let b = spec
                .bias
                .then(|| store.add(format!("{prefix}.conv{l}.bias"), Tensor::zeros(&[cout])));
            layers.push((w, b));
        }
        Ok(Self { layers, activation })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, input: NodeId) -> Result<NodeId> {
        let mut h = input;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let wn = tape.param(store, w);
            let bn = match b {
                Some(b) => tape.param(store, b),
                None => {
                    let cout = *store.get(w).shape().last().expect("conv weight rank");
                    tape.constant(Tensor::zeros(&[cout]))
                }
            };
            h = tape.conv(h, wn, bn)?;
            if i + 1 < self.layers.len() {
                h = tape.pointwise(h, self.activation);
            }
        }
        Ok(h)
    }

    pub fn last_layer(&self) -> (ParamId, Option<ParamId>) {
        *self.layers.last().expect("at least one layer")
    }
}
