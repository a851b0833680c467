use std::collections::HashMap;

use crate::graph::Gradients;
use crate::param::{Param, ParamId};
use crate::Tensor;

/// Stochastic gradient descent with heavy-ball momentum.
///
/// Velocity follows `v <- momentum * v + g`, then `p <- p - lr * v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    velocity: HashMap<ParamId, Tensor>,
}

impl Sgd {
    pub fn new(momentum: f64) -> Self {
        Self {
            momentum,
            velocity: HashMap::new(),
        }
    }

    /// Applies one update to every parameter that has a gradient. Returns how
    /// many parameters were touched.
    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Param>, grads: &Gradients, lr: f64) -> usize {
        self.step_scaled(params, grads, lr, 1.0)
    }

    /// Like [`Sgd::step`] with every gradient multiplied by `scale` before it
    /// enters the velocity.
    pub fn step_scaled<'a>(
        &mut self,
        params: impl IntoIterator<Item = &'a mut Param>,
        grads: &Gradients,
        lr: f64,
        scale: f64,
    ) -> usize {
        let mut touched = 0;
        for p in params {
            let Some(g) = grads.param(p.id()) else { continue };
            let v = self
                .velocity
                .entry(p.id())
                .or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
            v.scale(self.momentum);
            v.axpy(scale, g);
            if lr != 0.0 {
                p.value.axpy(-lr, v);
            }
            touched += 1;
        }
        touched
    }
}

/// Global l2 norm of the gradients of `params`; parameters without a
/// gradient contribute nothing.
pub fn grad_norm<'a>(params: impl IntoIterator<Item = &'a Param>, grads: &Gradients) -> f64 {
    params
        .into_iter()
        .filter_map(|p| grads.param(p.id()))
        .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Factor that brings a gradient of norm `norm` down to at most `max_norm`.
pub fn clip_scale(norm: f64, max_norm: Option<f64>) -> f64 {
    match max_norm {
        Some(m) if norm > m => m / norm,
        _ => 1.0,
    }
}

/// Learning rate decaying linearly from `base` to zero over `total` steps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearDecay {
    pub base: f64,
    pub total: usize,
}

impl LinearDecay {
    pub fn new(base: f64, total: usize) -> Self {
        Self { base, total }
    }

    /// Zero from `total` on.
    pub fn at(&self, step: usize) -> f64 {
        if self.total == 0 {
            return self.base;
        }
        self.base * (1.0 - step as f64 / self.total as f64).max(0.0)
    }
}
