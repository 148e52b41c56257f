//! RAdam with the inverse-square-root warmup schedule.
//!
//! ```text
//! lr(step) = scale · d_model^-0.5 · min(step^-0.5, step · warmup^-1.5)
//!
//! m = β1·m + (1−β1)·g          v = β2·v + (1−β2)·g²
//! m̂ = m / (1−β1^t)             ρ∞ = 2/(1−β2) − 1
//! ρt = ρ∞ − 2t·β2^t / (1−β2^t)
//! ρt > 4:  r = √((ρt−4)(ρt−2)ρ∞ / ((ρ∞−4)(ρ∞−2)ρt))
//!          θ −= lr · r · m̂ / (√(v/(1−β2^t)) + ε)
//! else:    θ −= lr · m̂
//! ```

use crate::numerics::Tensor;
use crate::params::{ParamGrads, ParamStore};

/// Threshold on the SMA length above which the adaptive step is used.
const RHO_THRESHOLD: f64 = 4.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoamSchedule {
    pub model_dim: usize,
    pub warmup: u64,
    pub scale: f64,
}

impl NoamSchedule {
    pub fn lr(&self, step: u64) -> f64 {
        let step = step.max(1) as f64;
        let warmup = self.warmup as f64;
        self.scale * (self.model_dim as f64).powf(-0.5) * step.powf(-0.5).min(step * warmup.powf(-1.5))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RadamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for RadamHyper {
    fn default() -> Self {
        RadamHyper { beta1: 0.9, beta2: 0.98, eps: 1e-9 }
    }
}

/// First and second moment buffers, one per parameter, plus the number of
/// updates applied so far.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros = || params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        OptimizerState { step: 0, m: zeros(), v: zeros() }
    }
}

/// Rectification term `r_t`, or `None` while the variance is intractable.
pub fn rectification(step: u64, beta2: f64) -> Option<f64> {
    let rho_inf = 2.0 / (1.0 - beta2) - 1.0;
    let b2t = beta2.powi(step as i32);
    let rho = rho_inf - 2.0 * step as f64 * b2t / (1.0 - b2t);
    (rho > RHO_THRESHOLD).then(|| {
        (((rho - 4.0) * (rho - 2.0) * rho_inf) / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho)).sqrt()
    })
}

/// Applies one RAdam update at `state.step + 1` and returns the learning
/// rate used.
pub fn radam_noam_update(
    params: &mut ParamStore,
    grads: &ParamGrads,
    state: &mut OptimizerState,
    hyper: &RadamHyper,
    schedule: &NoamSchedule,
) -> f64 {
    state.step += 1;
    let t = state.step;
    let lr = schedule.lr(t);
    let bias1 = 1.0 - hyper.beta1.powi(t as i32);
    let bias2 = 1.0 - hyper.beta2.powi(t as i32);
    let rect = rectification(t, hyper.beta2);
    let ids: Vec<_> = params.ids().collect();
    for (i, id) in ids.into_iter().enumerate() {
        let g = grads.get(id).data();
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        let theta = params.get_mut(id).data_mut();
        for j in 0..theta.len() {
            m[j] = hyper.beta1 * m[j] + (1.0 - hyper.beta1) * g[j];
            v[j] = hyper.beta2 * v[j] + (1.0 - hyper.beta2) * g[j] * g[j];
            let m_hat = m[j] / bias1;
            theta[j] -= match rect {
                Some(r) => lr * r * m_hat / ((v[j] / bias2).sqrt() + hyper.eps),
                None => lr * m_hat,
            };
        }
    }
    lr
}
