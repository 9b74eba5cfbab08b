//! Bias-corrected Adam over the flat parameter vector of a network.

use super::{NetParams, NnError, ParamGrads};

/// Optimizer state: first/second moment estimates aligned with the
/// network's flat parameter layout.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub t: u64,
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl AdamState {
    pub fn new(param_count: usize, lr: f32) -> Self {
        Self {
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
            t: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One Adam update. Rejects the whole update (no mutation at all) when any
/// gradient value is non-finite or the gradients do not line up with the
/// parameters. On success the step count and the parameter version both
/// advance by one.
pub fn adam_step(
    params: &mut NetParams,
    grads: &ParamGrads<f32>,
    state: &mut AdamState,
) -> Result<(), NnError> {
    if !grads.aligned_with(params) {
        return Err(super::shape_err("adam_step", "gradients not aligned with parameters"));
    }
    if state.m.len() != params.param_count() {
        return Err(super::shape_err(
            "adam_step",
            format!("state sized for {} params, network has {}", state.m.len(), params.param_count()),
        ));
    }
    if !grads.all_finite() {
        return Err(NnError::NonFiniteGradient);
    }

    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);

    let mut off = 0;
    for (layer, (gw, gb)) in params.layers.iter_mut().zip(&grads.layers) {
        for (dst, gsrc) in [(&mut layer.weights, gw), (&mut layer.bias, gb)] {
            let vals = dst.data_mut();
            let g = gsrc.data();
            for i in 0..vals.len() {
                let gi = g[i];
                let mi = state.beta1 * state.m[off + i] + (1.0 - state.beta1) * gi;
                let vi = state.beta2 * state.v[off + i] + (1.0 - state.beta2) * gi * gi;
                state.m[off + i] = mi;
                state.v[off + i] = vi;
                let m_hat = mi / bc1;
                let v_hat = vi / bc2;
                vals[i] -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
            }
            off += vals.len();
        }
    }
    params.version += 1;
    Ok(())
}
