//! Adam with decoupled weight decay, plus the multistep learning-rate rule.
//!
//! Conventions are fixed so results are reproducible to the bit:
//! beta1 = 0.9, beta2 = 0.999, eps = 1e-8, bias correction on both moments,
//! and weight decay applied to the value BEFORE the Adam delta
//! (`value -= lr * wd * value`), not mixed into the gradient.

use crate::error::{ensure, Result};
use crate::numcore::matrix::DenseMatrix;
use crate::numcore::param::ParamSet;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First/second moment estimates, one pair per parameter, aligned with the
/// owning [`ParamSet`]'s order.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<DenseMatrix>,
    v: Vec<DenseMatrix>,
    step: u64,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        let m = params
            .iter()
            .map(|p| DenseMatrix::zeros(p.value.rows(), p.value.cols()))
            .collect::<Vec<_>>();
        let v = m.clone();
        AdamState { m, v, step: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update over every parameter in the set, consuming the gradients
/// currently stored there. Gradients are left untouched; callers zero them
/// before the next backward pass.
pub fn adam_step(
    params: &mut ParamSet,
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    ensure!(
        state.m.len() == params.len(),
        "adam_step: state tracks {} parameters, set has {}",
        state.m.len(),
        params.len()
    );
    ensure!(lr >= 0.0, "adam_step: negative learning rate {lr}");
    ensure!(
        weight_decay >= 0.0,
        "adam_step: negative weight decay {weight_decay}"
    );
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - ADAM_BETA1.powf(t);
    let bc2 = 1.0 - ADAM_BETA2.powf(t);
    for (i, p) in params.iter_mut().enumerate() {
        ensure!(
            state.m[i].shape() == p.value.shape() && p.gradient.shape() == p.value.shape(),
            "adam_step: shape mismatch on parameter {}",
            p.name
        );
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let g = p.gradient.data();
        let x = p.value.data_mut();
        for j in 0..g.len() {
            x[j] -= lr * weight_decay * x[j];
            m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * g[j];
            v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            x[j] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// Piecewise-constant decay: `base * gamma^k` where `k` counts milestones
/// less than or equal to `epoch`. Milestones must be strictly increasing.
pub fn multistep_lr(base: f64, milestones: &[u32], gamma: f64, epoch: u32) -> Result<f64> {
    ensure!(base > 0.0, "multistep_lr: base {base} must be positive");
    ensure!(gamma > 0.0, "multistep_lr: gamma {gamma} must be positive");
    ensure!(
        milestones.windows(2).all(|w| w[0] < w[1]),
        "multistep_lr: milestones must be strictly increasing, got {milestones:?}"
    );
    let k = milestones.iter().filter(|&&m| m <= epoch).count() as i32;
    Ok(base * gamma.powi(k))
}
