use serde::{Deserialize, Serialize};

use super::{Gradient, ParamStore, Real};
use crate::error::{Error, Result};

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam:
///
/// ```text
/// m <- b1 m + (1 - b1) g        v <- b2 v + (1 - b2) g^2
/// p <- p - lr * (m / (1 - b1^k)) / (sqrt(v / (1 - b2^k)) + eps)
/// ```
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    m: Vec<T>,
    v: Vec<T>,
    step: u64,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            m: Vec::new(),
            v: Vec::new(),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut ParamStore<T>, grad: &Gradient<T>) -> Result<()> {
        if grad.store != params.id() || grad.len() != params.num_params() {
            return Err(Error::InvalidArgument(format!(
                "gradient of length {} does not belong to this store ({} parameters)",
                grad.len(),
                params.num_params()
            )));
        }
        let blocks = params.blocks_mut()?;
        if self.m.is_empty() {
            self.m = vec![T::zero(); grad.len()];
            self.v = vec![T::zero(); grad.len()];
        }
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let bc1 = T::from_f64(1.0 - c.beta1.powi(self.step as i32));
        let bc2 = T::from_f64(1.0 - c.beta2.powi(self.step as i32));
        let lr = T::from_f64(c.lr);
        let eps = T::from_f64(c.eps);
        let one = T::one();

        let mut off = 0;
        for block in blocks.iter_mut() {
            for p in block.value.data_mut() {
                let g = grad.data[off];
                let m = b1 * self.m[off] + (one - b1) * g;
                let v = b2 * self.v[off] + (one - b2) * g * g;
                self.m[off] = m;
                self.v[off] = v;
                *p = *p - lr * (m / bc1) / ((v / bc2).sqrt() + eps);
                off += 1;
            }
        }
        Ok(())
    }
}
