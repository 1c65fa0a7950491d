//! RMSProp, global-norm clipping and the linear exploration schedule.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::nn::ParamStore;

#[derive(Clone, Debug)]
pub struct RmsProp {
    pub lr: f64,
    pub alpha: f64,
    pub eps: f64,
    square_avg: Vec<Tensor>,
}

impl RmsProp {
    pub fn new(params: &ParamStore, lr: f64, alpha: f64, eps: f64) -> Self {
        RmsProp {
            lr,
            alpha,
            eps,
            square_avg: params
                .blocks()
                .iter()
                .map(|b| Tensor::zeros(b.value.rows(), b.value.cols()))
                .collect(),
        }
    }

    pub fn square_avg(&self) -> &[Tensor] {
        &self.square_avg
    }

    /// `v ← αv + (1−α)g²; p ← p − lr·g/(√v + eps)`. Nothing is modified when
    /// any gradient is non-finite.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        check_finite(params, grads)?;
        for (i, g) in grads.iter().enumerate() {
            let v = &mut self.square_avg[i];
            let p = &mut params.block_mut(i).value;
            for ((pv, vv), &gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *vv = self.alpha * *vv + (1.0 - self.alpha) * gv * gv;
                *pv -= self.lr * gv / (vv.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

fn check_finite(params: &ParamStore, grads: &[Tensor]) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::Contract(format!(
            "{} gradient blocks for {} parameter blocks",
            grads.len(),
            params.len()
        )));
    }
    for (b, g) in params.blocks().iter().zip(grads) {
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient(b.name.clone()));
        }
    }
    Ok(())
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / (norm + 1e-6);
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

/// Linear anneal from `start` to `end` over `horizon` environment steps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpsilonSchedule {
    pub start: f64,
    pub end: f64,
    pub horizon: u64,
}

impl Default for EpsilonSchedule {
    fn default() -> Self {
        EpsilonSchedule {
            start: 1.0,
            end: 0.05,
            horizon: 50_000,
        }
    }
}

impl EpsilonSchedule {
    pub fn epsilon(&self, t: u64) -> f64 {
        if self.horizon == 0 {
            return self.end;
        }
        let frac = (t as f64 / self.horizon as f64).min(1.0);
        self.start - (self.start - self.end) * frac
    }
}
