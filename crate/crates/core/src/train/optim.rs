//! AdamW with decoupled weight decay, and global gradient-norm clipping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-4,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment buffers for each parameter slot, created on first use.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub cfg: AdamWConfig,
    step: u64,
    moments: Vec<Option<(Vec<T>, Vec<T>)>>,
}

impl<T: Element> AdamW<T> {
    pub fn new(cfg: AdamWConfig) -> Self {
        AdamW {
            cfg,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every slot that holds a gradient, at learning rate `lr`.
    /// Slots without a gradient are left untouched, decay included.
    pub fn step(&mut self, slots: &mut [(String, &mut Tensor<T>)], lr: f64) -> Result<()> {
        for (name, p) in slots.iter() {
            let finite = p.with_grad(|g| g.is_none_or(|g| g.iter().all(|v| v.is_finite())));
            if !finite {
                return Err(Error::NonFinite(format!("gradient of {name}")));
            }
        }
        if self.moments.len() < slots.len() {
            self.moments.resize(slots.len(), None);
        }
        self.step += 1;
        let c = &self.cfg;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let bc1 = T::lit(1.0 - c.beta1.powi(self.step as i32));
        let bc2 = T::lit(1.0 - c.beta2.powi(self.step as i32));
        let (lr, wd, eps) = (T::lit(lr), T::lit(c.weight_decay), T::lit(c.eps));
        for ((_, p), state) in slots.iter_mut().zip(self.moments.iter_mut()) {
            let Some(g) = p.grad() else { continue };
            let (m, v) = state.get_or_insert_with(|| (vec![T::zero(); g.len()], vec![T::zero(); g.len()]));
            let w: Vec<T> = p
                .data()
                .iter()
                .zip(&g)
                .zip(m.iter_mut().zip(v.iter_mut()))
                .map(|((&w, &g), (m, v))| {
                    *m = b1 * *m + (T::one() - b1) * g;
                    *v = b2 * *v + (T::one() - b2) * g * g;
                    let (mh, vh) = (*m / bc1, *v / bc2);
                    w - lr * (mh / (vh.sqrt() + eps) + wd * w)
                })
                .collect();
            **p = Tensor::parameter(w, p.shape())?;
        }
        Ok(())
    }
}

/// Euclidean norm over every gradient, accumulated in f64.
pub fn global_grad_norm<T: Element>(params: &[(String, Tensor<T>)]) -> f64 {
    params
        .iter()
        .map(|(_, p)| p.with_grad(|g| g.map_or(0.0, |g| g.iter().map(|v| v.as_f64().powi(2)).sum::<f64>())))
        .sum::<f64>()
        .sqrt()
}

/// Scale all gradients by `min(1, max_norm / ‖g‖₂)`. Returns `(norm, scale)`.
pub fn clip_grad_norm<T: Element>(params: &[(String, Tensor<T>)], max_norm: f64) -> Result<(f64, f64)> {
    let norm = global_grad_norm(params);
    if !norm.is_finite() {
        return Err(Error::NonFinite(format!("gradient norm {norm}")));
    }
    let scale = if norm > max_norm { max_norm / norm } else { 1.0 };
    if scale < 1.0 {
        for (_, p) in params {
            p.scale_grad(T::lit(scale));
        }
    }
    Ok((norm, scale))
}
