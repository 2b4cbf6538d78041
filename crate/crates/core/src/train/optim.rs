use numerics::{ParamStore, Scalar, Tensor};

use crate::{Error, Result};

/// AdamW with bias-corrected moments and decoupled weight decay. Decay is
/// skipped for rank-1 parameters (biases, norm gains, scalars).
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T: Scalar> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(store: &ParamStore<T>, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        let zeros = || store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Self {
            beta1,
            beta2,
            eps,
            weight_decay,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Applies one update from the gradients in `store`. Non-finite
    /// gradients abort the step with nothing modified.
    pub fn update(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::Config(
                "optimizer state does not match the parameter store".into(),
            ));
        }
        for (_, p) in store.iter() {
            if p.trainable && !p.grad.is_finite() {
                return Err(Error::NonFinite(format!("gradient of {}", p.name)));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let i = id.index();
            let p = store.get_mut(id);
            if !p.trainable {
                continue;
            }
            let decay = if p.value.rank() > 1 { self.weight_decay } else { 0.0 };
            let grad = p.grad.data();
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (k, w) in p.value.data_mut().iter_mut().enumerate() {
                let g = grad[k].as_f64();
                let mk = b1 * m[k].as_f64() + (1.0 - b1) * g;
                let vk = b2 * v[k].as_f64() + (1.0 - b2) * g * g;
                m[k] = T::lit(mk);
                v[k] = T::lit(vk);
                let mut x = w.as_f64();
                x -= lr * decay * x;
                x -= lr * (mk / c1) / ((vk / c2).sqrt() + self.eps);
                *w = T::lit(x);
            }
        }
        Ok(())
    }
}
