use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::Tensor;

use crate::error::Result;
use crate::nn::ParamStore;

/// SGD with momentum and L2 weight decay, PyTorch update order:
/// `g += wd·p; buf = μ·buf + g; p -= lr·buf`.
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    buffers: BTreeMap<String, Tensor>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            buffers: BTreeMap::new(),
        }
    }

    /// Updates every trainable parameter of `store` that received a gradient.
    pub fn step(&mut self, store: &ParamStore, grads: &GradStore, lr: f64) -> Result<()> {
        for (name, var) in store.trainable() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            // parameter gradients still reference the forward graph
            let g = g.detach();
            let p = var.as_tensor().detach();
            let g = if self.weight_decay != 0.0 {
                g.add(&p.affine(self.weight_decay, 0.0)?)?
            } else {
                g
            };
            let buf = match self.buffers.get(name) {
                Some(b) if self.momentum != 0.0 => b.affine(self.momentum, 0.0)?.add(&g)?,
                _ => g,
            };
            var.set(&p.sub(&buf.affine(lr, 0.0)?)?)?;
            self.buffers.insert(name.clone(), buf);
        }
        Ok(())
    }
}

/// `base·(1 - step/total)^power`.
pub fn poly_lr(base: f64, step: usize, total: usize, power: f64) -> f64 {
    if total == 0 {
        return base;
    }
    base * (1.0 - step.min(total) as f64 / total as f64).powf(power)
}
