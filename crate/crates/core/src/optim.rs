//! Parameter updates: bias-corrected Adam and plain SGD.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::ParamStore;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config("optimizer.learning_rate must be positive".into()));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("optimizer.{name} must lie in [0,1), got {b}")));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("optimizer.epsilon must be positive".into()));
        }
        Ok(())
    }
}

/// Moment accumulators mirroring the parameter shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, params: &ParamStore) -> Result<Self> {
        config.validate()?;
        let zeros = || params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Ok(Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        })
    }

    /// Applies one update. `grads` follow the parameter order of `params`.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::invalid(
                "optimizer_step",
                format!("{} gradients for {} parameters", grads.len(), params.len()),
            ));
        }
        for ((name, p), g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::shape("optimizer_step", p.shape(), g.shape()));
            }
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient(name.to_string()));
            }
        }
        self.step += 1;
        let c = &self.config;
        let lr = c.learning_rate as Scalar;
        match c.kind {
            OptimizerKind::Sgd => {
                for ((_, p), g) in params.iter_mut().zip(grads) {
                    p.data_mut().iter_mut().zip(g.data()).for_each(|(p, g)| *p -= lr * g);
                }
            }
            OptimizerKind::Adam => {
                let (b1, b2, eps) = (c.beta1 as Scalar, c.beta2 as Scalar, c.epsilon as Scalar);
                let t = self.step as i32;
                let (bc1, bc2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
                for (i, (_, p)) in params.iter_mut().enumerate() {
                    let (m, v, g) = (self.m[i].data_mut(), self.v[i].data_mut(), grads[i].data());
                    for j in 0..g.len() {
                        m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                        v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                        let (mh, vh) = (m[j] / bc1, v[j] / bc2);
                        p.data_mut()[j] -= lr * mh / (vh.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Convenience wrapper matching the update's functional form.
pub fn adam_step(params: &mut ParamStore, grads: &[Tensor], state: &mut OptimizerState) -> Result<()> {
    state.step(params, grads)
}
