//! SGD with heavy-ball momentum and coupled L2 weight decay.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdMomentum {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl SgdMomentum {
    /// One in-place step:
    /// `g' = g + wd·θ;  v ← μ·v + g';  θ ← θ − lr·v`.
    pub fn step(&self, params: &mut [f64], grads: &[f64], velocity: &mut [f64]) -> Result<()> {
        if grads.len() != params.len() || velocity.len() != params.len() {
            return Err(Error::shape(
                "sgd_momentum_step",
                (params.len(), grads.len()),
                (velocity.len(), 1),
            ));
        }
        if !(self.lr >= 0.0) {
            return Err(Error::Param(format!("learning rate must be >= 0, got {}", self.lr)));
        }
        if self.lr == 0.0 {
            return Ok(());
        }
        for ((p, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
            let g = g + self.weight_decay * *p;
            *v = self.momentum * *v + g;
            *p -= self.lr * *v;
        }
        Ok(())
    }
}
