//! Adam with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, Real, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { learning_rate: 7e-4, weight_decay: 1e-2, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Optimizer state; moments are kept per parameter slot of one [`ParamStore`].
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    config: AdamWConfig,
    step: u64,
    moments: Vec<Option<(Tensor<T>, Tensor<T>)>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(config: AdamWConfig) -> Self {
        Self { config, step: 0, moments: Vec::new() }
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// First and second moments of a parameter, if it has been updated.
    pub fn moments(&self, id: ParamId) -> Option<(&Tensor<T>, &Tensor<T>)> {
        self.moments.get(id.0).and_then(Option::as_ref).map(|(m, v)| (m, v))
    }

    /// Restores state saved with [`AdamW::moments`] and [`AdamW::steps`].
    pub fn restore(&mut self, step: u64, moments: Vec<(ParamId, Tensor<T>, Tensor<T>)>) {
        self.step = step;
        self.moments.clear();
        for (id, m, v) in moments {
            if self.moments.len() <= id.0 {
                self.moments.resize_with(id.0 + 1, || None);
            }
            self.moments[id.0] = Some((m, v));
        }
    }

    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[(ParamId, Tensor<T>)]) -> Result<()> {
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (lr, b1, b2, eps) = (T::lit(c.learning_rate), T::lit(c.beta1), T::lit(c.beta2), T::lit(c.eps));
        let decay = T::lit(1.0 - c.learning_rate * c.weight_decay);
        let (bc1, bc2) = (T::lit(bc1), T::lit(bc2.sqrt()));
        if self.moments.len() < params.len() {
            self.moments.resize_with(params.len(), || None);
        }
        for (id, g) in grads {
            let p = params.get_mut(*id);
            if p.shape() != g.shape() {
                return Err(Error::Shape(format!("gradient {:?} for parameter {:?}", g.shape(), p.shape())));
            }
            let (m, v) = self.moments[id.0].get_or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
            for (((p, m), v), g) in p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data()) {
                *m = b1 * *m + (T::one() - b1) * *g;
                *v = b2 * *v + (T::one() - b2) * *g * *g;
                let denom = v.sqrt() / bc2 + eps;
                *p = *p * decay - lr * (*m / bc1) / denom;
            }
        }
        Ok(())
    }
}
