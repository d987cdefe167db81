//! AdamW and the warmup + cosine learning-rate schedule.

use std::f64::consts::PI;

use crate::diffkit::Tensor;
use crate::error::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// First and second moment estimates, one tensor per parameter.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    /// Updates applied so far; drives bias correction.
    pub t: u64,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One decoupled-weight-decay Adam update. `step` only labels errors.
///
/// Gradients are checked before anything is touched, so a failed step leaves
/// parameters and moments as they were.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
    step: u64,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::Config(format!(
            "{} parameters but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(Error::Config(format!(
                "gradient {i} has shape {:?}, parameter has {:?}",
                g.shape(),
                p.shape()
            )));
        }
        if !g.is_finite() {
            return Err(Error::Diverged {
                step,
                what: format!("non-finite gradient for parameter {i}"),
            });
        }
    }
    if state.m.is_empty() {
        state.m = grads.iter().map(|g| Tensor::zeros(g.rows(), g.cols())).collect();
        state.v = state.m.clone();
    }
    state.t += 1;
    let c1 = 1.0 - BETA1.powi(state.t as i32);
    let c2 = 1.0 - BETA2.powi(state.t as i32);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        let pd = p.data_mut();
        let (md, vd) = (m.data_mut(), v.data_mut());
        for k in 0..pd.len() {
            let gk = g.data()[k];
            md[k] = BETA1 * md[k] + (1.0 - BETA1) * gk;
            vd[k] = BETA2 * vd[k] + (1.0 - BETA2) * gk * gk;
            let update = (md[k] / c1) / ((vd[k] / c2).sqrt() + EPS);
            pd[k] -= lr * (update + weight_decay * pd[k]);
        }
    }
    Ok(())
}

/// Linear ramp from 0 to `lr_max` over `warmup_steps`, then cosine decay to
/// 0 at `total_steps`.
pub fn lr_schedule(step: u64, warmup_steps: u64, total_steps: u64, lr_max: f64) -> f64 {
    let step = step.min(total_steps);
    if step < warmup_steps {
        return lr_max * step as f64 / warmup_steps as f64;
    }
    let span = total_steps.saturating_sub(warmup_steps);
    if span == 0 {
        return lr_max;
    }
    let progress = (step - warmup_steps) as f64 / span as f64;
    0.5 * lr_max * (1.0 + (PI * progress).cos())
}
