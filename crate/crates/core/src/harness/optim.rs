//! SGD with momentum and a milestone step schedule.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct SgdState {
    pub base_lr: f64,
    pub momentum: f64,
    pub milestones: Vec<usize>,
    pub decay: f64,
    pub velocity: Vec<Tensor>,
    pub current_lr: f64,
}

impl SgdState {
    pub fn new(base_lr: f64, momentum: f64, milestones: Vec<usize>, decay: f64) -> Self {
        SgdState {
            base_lr,
            momentum,
            milestones,
            decay,
            velocity: Vec::new(),
            current_lr: base_lr,
        }
    }

    /// Constant learning rate, no schedule.
    pub fn constant(lr: f64, momentum: f64) -> Self {
        Self::new(lr, momentum, Vec::new(), 1.0)
    }

    /// `lr₀ · decay^(#milestones ≤ epoch)`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let k = self.milestones.iter().filter(|&&m| m <= epoch).count();
        self.base_lr * self.decay.powi(k as i32)
    }

    /// `v ← μ·v + g`, `p ← p − lr·v` for every tensor.
    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor], epoch: usize) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Consistency(format!("{} parameters but {} gradients", params.len(), grads.len())));
        }
        if self.velocity.is_empty() {
            self.velocity = grads.iter().map(|g| Tensor::zeros(g.shape())).collect();
        }
        if self.velocity.len() != params.len() {
            return Err(Error::Consistency(format!(
                "optimizer tracks {} tensors, got {}",
                self.velocity.len(),
                params.len()
            )));
        }
        self.current_lr = self.lr_at(epoch);
        for ((p, g), v) in params.into_iter().zip(grads).zip(&mut self.velocity) {
            if p.shape() != g.shape() || v.shape() != g.shape() {
                return Err(Error::shape("sgd_update", p.shape(), g.shape()));
            }
            for (vi, gi) in v.data_mut().iter_mut().zip(g.data()) {
                *vi = self.momentum * *vi + gi;
            }
            p.axpy(-self.current_lr, v)?;
        }
        Ok(())
    }
}
