use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// AdamW hyperparameters (decoupled weight decay).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Applies one AdamW update to every parameter in `store`.
///
/// Fails without touching any parameter if a gradient is non-finite.
pub fn adamw_step(store: &mut ParamStore, grads: &[Tensor], opt: &AdamW) -> Result<()> {
    if grads.len() != store.len() {
        return Err(Error::Invalid(format!(
            "{} gradients for {} parameters",
            grads.len(),
            store.len()
        )));
    }
    for (p, g) in store.iter().zip(grads) {
        if g.shape() != p.value.shape() {
            return Err(Error::Shape {
                op: "adamw_step",
                lhs: p.value.shape(),
                rhs: g.shape(),
            });
        }
        if !g.all_finite() {
            return Err(Error::NonFiniteGradient(p.name.clone()));
        }
    }
    store.step += 1;
    let t = store.step as i32;
    let bc1 = 1.0 - opt.beta1.powi(t);
    let bc2 = 1.0 - opt.beta2.powi(t);
    for (p, g) in store.params_mut().iter_mut().zip(grads) {
        let decay = 1.0 - opt.lr * opt.weight_decay;
        let n = g.len();
        let (val, m, v) = (p.value.data_mut(), p.m.data_mut(), p.v.data_mut());
        for i in 0..n {
            let gi = g.data()[i];
            val[i] *= decay;
            m[i] = opt.beta1 * m[i] + (1.0 - opt.beta1) * gi;
            v[i] = opt.beta2 * v[i] + (1.0 - opt.beta2) * gi * gi;
            let mh = m[i] / bc1;
            let vh = v[i] / bc2;
            val[i] -= opt.lr * mh / (vh.sqrt() + opt.eps);
        }
    }
    Ok(())
}

/// Scales gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let k = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= k);
        }
    }
    norm
}

/// Step decay: the learning rate is multiplied by `factor` every `every`
/// epochs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepDecay {
    pub initial: f64,
    pub factor: f64,
    pub every: usize,
}

impl StepDecay {
    pub fn lr(&self, epoch: usize) -> f64 {
        self.initial * self.factor.powi((epoch / self.every.max(1)) as i32)
    }
}
