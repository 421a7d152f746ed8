//! Outer-loop optimizers and learning-rate schedules.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::real::Real;
use crate::tensor::Tensor;

/// Linear warmup to `base`, then cosine decay to zero at `total` steps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CosineSchedule {
    pub base: f64,
    pub warmup: u64,
    pub total: u64,
}

impl CosineSchedule {
    pub fn lr(&self, step: u64) -> f64 {
        if step < self.warmup {
            return self.base * (step + 1) as f64 / self.warmup as f64;
        }
        let span = self.total.saturating_sub(self.warmup).max(1);
        let progress = ((step - self.warmup) as f64 / span as f64).min(1.0);
        0.5 * self.base * (1.0 + libm::cos(core::f64::consts::PI * progress))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    /// Decoupled weight decay, applied to matrices only.
    AdamW { beta1: f64, beta2: f64, eps: f64 },
    SgdMomentum { momentum: f64 },
}

impl OptimizerKind {
    pub fn adamw() -> Self {
        OptimizerKind::AdamW { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Optimizer state; one slot per parameter, in parameter order.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer<S: Real = f64> {
    pub kind: OptimizerKind,
    pub weight_decay: f64,
    pub step: u64,
    /// First moments (AdamW) or velocities (SGD).
    pub m: Vec<Tensor<S>>,
    /// Second moments (AdamW only; empty for SGD).
    pub v: Vec<Tensor<S>>,
}

impl<S: Real> Optimizer<S> {
    pub fn new(kind: OptimizerKind, weight_decay: f64, params: &ParamSet<S>) -> Self {
        let zeros: Vec<Tensor<S>> = params.iter().map(|p| Tensor::zeros(p.value.rows(), p.value.cols())).collect();
        let v = match kind {
            OptimizerKind::AdamW { .. } => zeros.clone(),
            OptimizerKind::SgdMomentum { .. } => Vec::new(),
        };
        Optimizer { kind, weight_decay, step: 0, m: zeros, v }
    }

    /// Applies one update with learning rate `lr`; frozen parameters are left
    /// untouched.
    pub fn update(&mut self, params: &mut ParamSet<S>, grads: &[Tensor<S>], lr: f64) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::Shape(alloc::format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        self.step += 1;
        let t = self.step as f64;
        for (i, (p, gr)) in params.iter_mut().zip(grads).enumerate() {
            if !p.trainable {
                continue;
            }
            let decay = if p.value.rows() > 1 && p.value.cols() > 1 { self.weight_decay } else { 0.0 };
            let w = p.value.data_mut();
            let g = gr.data();
            match self.kind {
                OptimizerKind::AdamW { beta1, beta2, eps } => {
                    let c1 = 1.0 - libm::pow(beta1, t);
                    let c2 = 1.0 - libm::pow(beta2, t);
                    let m = self.m[i].data_mut();
                    let v = self.v[i].data_mut();
                    for j in 0..w.len() {
                        let gj = g[j].to_f64();
                        let mj = beta1 * m[j].to_f64() + (1.0 - beta1) * gj;
                        let vj = beta2 * v[j].to_f64() + (1.0 - beta2) * gj * gj;
                        m[j] = S::from_f64(mj);
                        v[j] = S::from_f64(vj);
                        let upd = (mj / c1) / (libm::sqrt(vj / c2) + eps);
                        let wj = w[j].to_f64();
                        w[j] = S::from_f64(wj - lr * (upd + decay * wj));
                    }
                }
                OptimizerKind::SgdMomentum { momentum } => {
                    let m = self.m[i].data_mut();
                    for j in 0..w.len() {
                        let wj = w[j].to_f64();
                        let mj = momentum * m[j].to_f64() + g[j].to_f64() + decay * wj;
                        m[j] = S::from_f64(mj);
                        w[j] = S::from_f64(wj - lr * mj);
                    }
                }
            }
        }
        Ok(())
    }
}
