use crate::error::{invalid, Result};
use crate::float::Float;
use crate::graph::Gradients;
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moments are stored per parameter in store order.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub first: Vec<Tensor<T>>,
    pub second: Vec<Tensor<T>>,
}

impl<T: Float> Adam<T> {
    pub fn new(config: AdamConfig, params: &ParamStore<T>) -> Self {
        Self {
            config,
            step: 0,
            first: params.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect(),
            second: params.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect(),
        }
    }

    /// Restore from saved moments; shapes must match the store.
    pub fn from_state(
        config: AdamConfig,
        params: &ParamStore<T>,
        step: u64,
        first: Vec<Tensor<T>>,
        second: Vec<Tensor<T>>,
    ) -> Result<Self> {
        if first.len() != params.len() || second.len() != params.len() {
            return Err(invalid("adam", "moment count differs from parameter count"));
        }
        for ((_, _, p), (m, v)) in params.iter().zip(first.iter().zip(&second)) {
            m.expect_shape("adam first moment", p.shape())?;
            v.expect_shape("adam second moment", p.shape())?;
        }
        Ok(Self {
            config,
            step,
            first,
            second,
        })
    }

    /// One update. Parameters without a gradient are left untouched.
    pub fn update(&mut self, params: &mut ParamStore<T>, grads: &Gradients<T>) -> Result<()> {
        self.step += 1;
        let c = self.config;
        let b1 = T::cast(c.beta1);
        let b2 = T::cast(c.beta2);
        let one = T::one();
        let bc1 = T::cast(1.0 - c.beta1.powi(self.step as i32));
        let bc2 = T::cast(1.0 - c.beta2.powi(self.step as i32));
        let lr = T::cast(c.lr);
        let eps = T::cast(c.eps);
        for (id, g) in grads.iter() {
            let p = params.get_mut(id);
            g.expect_shape("adam grad", p.shape())?;
            let m = self.first[id.index()].data_mut();
            let v = self.second[id.index()].data_mut();
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (one - b1) * gi;
                *vi = b2 * *vi + (one - b2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w = *w - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
