use serde::{Deserialize, Serialize};

use crate::autodiff::{Parameter, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub momentum: f64,
    /// Cosine decay of the learning rate over the whole run.
    pub cosine_decay: bool,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 0.002,
            momentum: 0.9,
            cosine_decay: true,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Parameter(format!("learning rate {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Parameter(format!("momentum {}", self.momentum)));
        }
        Ok(())
    }
}

/// Gradient descent with heavy-ball momentum: `b = mu * b + g; x -= lr * b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd<S> {
    pub config: OptimConfig,
    /// Velocity buffers keyed by parameter name; frozen parameters have none.
    pub velocity: Vec<(String, Tensor<S>)>,
    pub step: u64,
    pub horizon: u64,
}

impl<S: Scalar> Sgd<S> {
    pub fn new(config: OptimConfig, params: &[&Parameter<S>], horizon: u64) -> Result<Self> {
        config.validate()?;
        let velocity = params
            .iter()
            .filter(|p| !p.frozen)
            .map(|p| (p.name.clone(), Tensor::zeros(p.value.shape())))
            .collect();
        Ok(Self {
            config,
            velocity,
            step: 0,
            horizon: horizon.max(1),
        })
    }

    pub fn current_lr(&self) -> f64 {
        if !self.config.cosine_decay {
            return self.config.lr;
        }
        let t = (self.step.min(self.horizon)) as f64 / self.horizon as f64;
        self.config.lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }

    /// Applies one update; `grads[i]` belongs to `params[i]`.
    pub fn update(&mut self, params: &mut [&mut Parameter<S>], grads: &[Tensor<S>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Contract("one gradient per parameter required".into()));
        }
        let lr = S::lit(self.current_lr());
        let mu = S::lit(self.config.momentum);
        for (p, g) in params.iter_mut().zip(grads) {
            if p.frozen {
                continue;
            }
            if g.shape() != p.value.shape() {
                return Err(Error::dim("sgd", format!("gradient shape for {}", p.name)));
            }
            let buf = self
                .velocity
                .iter_mut()
                .find(|(n, _)| *n == p.name)
                .map(|(_, b)| b)
                .ok_or_else(|| Error::Contract(format!("no velocity for {}", p.name)))?;
            for ((b, &gi), x) in buf
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(p.value.data_mut().iter_mut())
            {
                *b = mu * *b + gi;
                *x -= lr * *b;
            }
        }
        self.step += 1;
        Ok(())
    }
}
