//! Bias-corrected Adam.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct AdamParams {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams { lr: 0.01, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second-moment buffers, one pair per parameter tensor, allocated on
/// the first step from the gradient shapes.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn new() -> AdamState {
        AdamState::default()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update over a flat parameter list. Each tensor is updated
/// element-wise and independently, so the result does not depend on the order
/// in which parameters are listed.
pub fn adam_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    opts: &AdamParams,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::contract(
            "adam_step",
            format!("{} params but {} grads", params.len(), grads.len()),
        ));
    }
    if state.m.is_empty() {
        state.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
        state.v = params.iter().map(|p| vec![0.0; p.len()]).collect();
    }
    if state.m.len() != params.len() {
        return Err(Error::contract(
            "adam_step",
            format!("state tracks {} tensors, got {}", state.m.len(), params.len()),
        ));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - (opts.beta1 as f64).powi(t);
    let bc2 = 1.0 - (opts.beta2 as f64).powi(t);
    for ((p, g), (m, v)) in
        params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        if p.shape() != g.shape() {
            return Err(Error::contract(
                "adam_step",
                format!("param shape {:?} vs grad shape {:?}", p.shape(), g.shape()),
            ));
        }
        if p.len() != m.len() {
            return Err(Error::contract(
                "adam_step",
                format!("param has {} elements, state tracks {}", p.len(), m.len()),
            ));
        }
        let gd = g.data();
        for (i, x) in p.data_mut().iter_mut().enumerate() {
            let gi = gd[i] as f64;
            let mi = opts.beta1 as f64 * m[i] as f64 + (1.0 - opts.beta1 as f64) * gi;
            let vi = opts.beta2 as f64 * v[i] as f64 + (1.0 - opts.beta2 as f64) * gi * gi;
            m[i] = mi as f32;
            v[i] = vi as f32;
            let update = opts.lr as f64 * (mi / bc1) / ((vi / bc2).sqrt() + opts.eps as f64);
            *x = (*x as f64 - update) as f32;
        }
    }
    Ok(())
}
