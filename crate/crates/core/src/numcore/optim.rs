use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// AdamW hyperparameters. The learning-rate default is the fine-tuning rate
/// used for both the supervised and the RL stage.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Moments<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
}

/// Per-parameter first/second moments keyed by parameter name.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamWState<T> {
    pub config: AdamWConfig,
    pub step: u64,
    moments: BTreeMap<String, Moments<T>>,
}

impl<T: Scalar> AdamWState<T> {
    pub fn new(config: AdamWConfig) -> Self {
        AdamWState {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn moments(&self) -> impl Iterator<Item = (&str, &Moments<T>)> {
        self.moments.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn insert_moments(&mut self, name: &str, m: Vec<T>, v: Vec<T>) {
        self.moments.insert(name.to_string(), Moments { m, v });
    }

    /// One decoupled-weight-decay Adam update over every parameter that
    /// requires a gradient and has one. Gradients are checked for NaN/Inf
    /// before any parameter is touched; gradients are left in place.
    pub fn step<'a, I>(&mut self, params: I) -> Result<()>
    where
        I: IntoIterator<Item = (&'a str, &'a mut Tensor<T>)>,
    {
        let live: Vec<(&str, &mut Tensor<T>)> = params
            .into_iter()
            .filter(|(_, t)| t.requires_grad && t.grad.is_some())
            .collect();
        for (name, t) in &live {
            let g = t.grad.as_ref().expect("filtered");
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("non-finite gradient for parameter `{name}`")));
            }
        }

        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let (one_b1, one_b2) = (T::from_f64(1.0 - c.beta1), T::from_f64(1.0 - c.beta2));
        let (bc1, bc2) = (T::from_f64(bc1), T::from_f64(bc2));
        let lr = T::from_f64(c.lr);
        let decay = T::from_f64(c.lr * c.weight_decay);
        let eps = T::from_f64(c.eps);

        for (name, tensor) in live {
            let n = tensor.len();
            let mom = self.moments.entry(name.to_string()).or_insert_with(|| Moments {
                m: vec![T::zero(); n],
                v: vec![T::zero(); n],
            });
            if mom.m.len() != n {
                return Err(Error::Dimension(format!(
                    "optimizer state for `{name}` has {} entries, parameter has {n}",
                    mom.m.len()
                )));
            }
            let g = tensor.grad.take().expect("filtered");
            let w = tensor.data_mut();
            for i in 0..n {
                mom.m[i] = b1 * mom.m[i] + one_b1 * g[i];
                mom.v[i] = b2 * mom.v[i] + one_b2 * g[i] * g[i];
                let mhat = mom.m[i] / bc1;
                let vhat = mom.v[i] / bc2;
                let denom = vhat.sqrt() + eps;
                let adam = if denom > T::zero() { mhat / denom } else { T::zero() };
                w[i] = w[i] - decay * w[i] - lr * adam;
            }
            tensor.grad = Some(g);
        }
        Ok(())
    }
}
