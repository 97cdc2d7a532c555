use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::ghostnet::Layer;
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Tuples per optimiser step.
    pub batch_size: usize,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            momentum: 0.9,
            weight_decay: 1e-3,
            batch_size: 4,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0)
            || !(0.0..1.0).contains(&self.momentum)
            || !(self.weight_decay >= 0.0)
            || self.batch_size == 0
        {
            return Err(Error::Config(format!("invalid optimiser settings {self:?}")));
        }
        Ok(())
    }
}

/// `g = grad + wd·p; v = μ·v + g; p -= lr·v`.
pub fn sgd_step<T: Scalar>(
    param: &mut [T],
    grad: &[T],
    velocity: &mut [T],
    cfg: &SgdConfig,
) -> Result<()> {
    if param.len() != grad.len() || param.len() != velocity.len() {
        return Err(shape_err!(
            "sgd on {} values with {} grads and {} velocities",
            param.len(),
            grad.len(),
            velocity.len()
        ));
    }
    let lr = T::from_f64(cfg.learning_rate);
    let mu = T::from_f64(cfg.momentum);
    let wd = T::from_f64(cfg.weight_decay);
    for ((p, &g), v) in param.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        let g = g + wd * *p;
        *v = mu * *v + g;
        *p = *p - lr * *v;
    }
    Ok(())
}

/// Momentum SGD over every parameter of a [`Layer`], with velocities keyed
/// by parameter name.
pub struct Sgd<T: Scalar = f32> {
    pub config: SgdConfig,
    velocity: BTreeMap<String, Vec<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(config: SgdConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            velocity: BTreeMap::new(),
        })
    }

    /// Applies one update to every parameter; missing gradients count as 0.
    pub fn step<L: Layer<T> + ?Sized>(&mut self, model: &mut L) -> Result<()> {
        let mut ps = Vec::new();
        model.params_mut("", &mut ps);
        for (name, t) in ps {
            let v = self
                .velocity
                .entry(name)
                .or_insert_with(|| vec![T::zero(); t.len()]);
            let (values, grad) = t.value_and_grad_mut();
            sgd_step(values, grad, v, &self.config)?;
        }
        Ok(())
    }
}
