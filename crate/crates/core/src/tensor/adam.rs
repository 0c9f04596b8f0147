use serde::{Deserialize, Serialize};

use super::{Gradients, ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }
}

/// First/second moment accumulators, shape-congruent with a [`ParamStore`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|(_, _, p)| Tensor::zeros(p.shape())).collect();
        Self {
            config,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One bias-corrected Adam update. Gradients are validated before any
    /// parameter is touched.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                left: vec![params.len()],
                right: vec![grads.len()],
            });
        }
        for (id, g) in grads.iter() {
            if g.shape() != params.get(id).shape() {
                return Err(Error::ShapeMismatch {
                    op: "adam_step",
                    left: params.get(id).shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
            if !g.all_finite() {
                return Err(Error::NonFiniteGradient(params.name(id).to_string()));
            }
        }
        self.t += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (id, g) in grads.iter() {
            let p = params.get_mut(id).data_mut();
            let m = self.m[id.0].data_mut();
            let v = self.v[id.0].data_mut();
            for i in 0..p.len() {
                let gi = g.data()[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f64) -> (ParamStore, AdamState) {
        let mut store = ParamStore::new();
        store.add("w", Tensor::scalar(value));
        let state = AdamState::new(
            AdamConfig {
                lr: 0.1,
                ..Default::default()
            },
            &store,
        );
        (store, state)
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let (mut store, mut state) = single(1.5);
        let g = store.zeros_like();
        state.step(&mut store, &g).unwrap();
        assert_eq!(store.get(super::super::ParamId(0)).data(), &[1.5]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let (mut store, mut state) = single(0.0);
        let mut g = store.zeros_like();
        g.accumulate(super::super::ParamId(0), &Tensor::scalar(1.0));
        state.step(&mut store, &g).unwrap();
        // m_hat = 1, v_hat = 1: step = lr / (1 + eps)
        let p = store.get(super::super::ParamId(0)).data()[0];
        assert!((p + 0.1 / (1.0 + 1e-8)).abs() < 1e-15, "{p}");
    }

    #[test]
    fn deterministic() {
        let run = || {
            let (mut store, mut state) = single(0.3);
            let mut g = store.zeros_like();
            g.accumulate(super::super::ParamId(0), &Tensor::scalar(0.7));
            for _ in 0..5 {
                state.step(&mut store, &g).unwrap();
            }
            store.get(super::super::ParamId(0)).data()[0].to_bits()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let (mut store, mut state) = single(0.0);
        let mut g = store.zeros_like();
        g.accumulate(super::super::ParamId(0), &Tensor::scalar(f64::NAN));
        let err = state.step(&mut store, &g).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient(ref n) if n == "w"));
        assert_eq!(state.step_count(), 0);
    }
}
