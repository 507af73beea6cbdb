//! First-order parameter updates.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{GradMap, ParamSet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerConfig {
    Sgd {
        lr: f64,
    },
    Adamw {
        lr: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
        #[serde(default)]
        weight_decay: f64,
    },
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

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self::Adamw { lr: 0.002, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

impl OptimizerConfig {
    pub fn lr(&self) -> f64 {
        match *self {
            Self::Sgd { lr } | Self::Adamw { lr, .. } => lr,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let lr = self.lr();
        if !(lr.is_finite() && lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
        }
        if let Self::Adamw { beta1, beta2, eps, weight_decay, .. } = *self {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || eps <= 0.0 || weight_decay < 0.0 {
                return Err(Error::Config("invalid AdamW hyper-parameters".into()));
            }
        }
        Ok(())
    }
}

/// Learning-rate multiplier over a run of known length.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Constant,
    /// Half-cosine from 1 at the first step down to 0 after the last.
    #[default]
    Cosine,
}

impl LrSchedule {
    pub fn factor(self, step: usize, total: usize) -> f64 {
        match self {
            Self::Constant => 1.0,
            Self::Cosine => 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total.max(1) as f64).cos()),
        }
    }
}

/// Stateful optimiser. Plain gradient descent keeps no state.
#[derive(Clone, Debug)]
pub struct Optimizer {
    config: OptimizerConfig,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
    t: u64,
    lr_scale: f64,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, moments: BTreeMap::new(), t: 0, lr_scale: 1.0 })
    }

    pub fn sgd(lr: f64) -> Result<Self> {
        Self::new(OptimizerConfig::Sgd { lr })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    /// Multiply the configured learning rate by `scale` from now on.
    pub fn set_lr_scale(&mut self, scale: f64) {
        self.lr_scale = scale;
    }

    /// Descend along `grads`. Every gradient must name a known parameter;
    /// parameters without a gradient are left alone.
    pub fn apply(&mut self, params: &mut ParamSet, grads: &GradMap) -> Result<()> {
        for (name, g) in grads {
            let p = params
                .get(name)
                .ok_or_else(|| Error::UnknownParameter(name.clone()))?;
            if p.shape() != g.shape() {
                return Err(Error::shape(
                    "optimizer",
                    format!("gradient for {name} has shape {:?}, parameter {:?}", g.shape(), p.shape()),
                ));
            }
        }
        self.t += 1;
        let scale = self.lr_scale;
        match self.config {
            OptimizerConfig::Sgd { lr } => {
                let lr = lr * scale;
                for (name, g) in grads {
                    let p = params.get_mut(name).expect("checked above");
                    for (x, d) in p.data_mut().iter_mut().zip(g.data()) {
                        *x -= lr * d;
                    }
                }
            }
            OptimizerConfig::Adamw { lr, beta1, beta2, eps, weight_decay } => {
                let lr = lr * scale;
                let bc1 = 1.0 - beta1.powi(self.t as i32);
                let bc2 = 1.0 - beta2.powi(self.t as i32);
                for (name, g) in grads {
                    let p = params.get_mut(name).expect("checked above");
                    let n = g.len();
                    let (m, v) = self
                        .moments
                        .entry(name.clone())
                        .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
                    for (((x, d), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *mi = beta1 * *mi + (1.0 - beta1) * d;
                        *vi = beta2 * *vi + (1.0 - beta2) * d * d;
                        let step = (*mi / bc1) / ((*vi / bc2).sqrt() + eps);
                        *x -= lr * (step + weight_decay * *x);
                    }
                }
            }
        }
        Ok(())
    }
}
