//! AdamW with decoupled weight decay, plus the cosine learning-rate schedule.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;

/// First/second-moment optimizer state, one pair of buffers per parameter,
/// in registration order.
pub struct AdamW<T: Scalar> {
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    pub weight_decay: T,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamW<T> {
    /// Default hyperparameters: betas (0.9, 0.999), eps 1e-8, decay 1e-4.
    pub fn new(store: &ParamStore<T>) -> Self {
        Self::with_hyper(store, 0.9, 0.999, 1e-8, 1e-4)
    }

    pub fn with_hyper(
        store: &ParamStore<T>,
        beta1: f64,
        beta2: f64,
        eps: f64,
        weight_decay: f64,
    ) -> Self {
        let m = store.iter_ids().map(|p| vec![T::zero(); store.data(p).len()]).collect();
        let v = store.iter_ids().map(|p| vec![T::zero(); store.data(p).len()]).collect();
        AdamW {
            beta1: T::from_f64(beta1),
            beta2: T::from_f64(beta2),
            eps: T::from_f64(eps),
            weight_decay: T::from_f64(weight_decay),
            step: 0,
            m,
            v,
        }
    }

    /// Number of completed update steps.
    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update over every parameter. `grads` must be indexed in
    /// registration order, as produced by `ParamStore::gradients`.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Vec<T>], lr: T) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::contract(format!(
                "gradient count {} != parameter count {}",
                grads.len(),
                store.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let one = T::one();
        let bc1 = one - self.beta1.powi(t);
        let bc2 = one - self.beta2.powi(t);
        let ids: Vec<_> = store.iter_ids().collect();
        for pid in ids {
            let idx = pid.index();
            let g = &grads[idx];
            let data = store.data_mut(pid);
            if g.len() != data.len() {
                return Err(Error::contract(format!(
                    "gradient length {} != parameter length {} at index {idx}",
                    g.len(),
                    data.len()
                )));
            }
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            for i in 0..data.len() {
                m[i] = self.beta1 * m[i] + (one - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (one - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                let update = m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * data[i];
                data[i] = data[i] - lr * update;
            }
        }
        Ok(())
    }
}

/// Cosine annealing from `lr0` at step 0 down to `lr_min` at step `total`.
pub fn cosine_lr(step: u64, total: u64, lr0: f64, lr_min: f64) -> f64 {
    if total == 0 {
        return lr0;
    }
    let frac = (step.min(total) as f64) / (total as f64);
    lr_min + 0.5 * (lr0 - lr_min) * (1.0 + (std::f64::consts::PI * frac).cos())
}
