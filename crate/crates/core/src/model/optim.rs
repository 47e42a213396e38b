use crate::error::{Error, Result};

/// AdamW moments and step counter for one client's trainable tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn first_moments(&self) -> &[Vec<f64>] {
        &self.first
    }
}

/// One AdamW update with decoupled weight decay:
/// `p ← p − lr·(m̂/(√v̂ + ε) + wd·p)`.
///
/// Moment buffers are shaped on the first call and must match afterwards.
pub fn adamw_step(
    state: &mut OptimizerState,
    params: Vec<&mut [f64]>,
    grads: Vec<&[f64]>,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::shape(format!(
            "{} parameter tensors but {} gradient tensors",
            params.len(),
            grads.len()
        )));
    }
    if state.first.is_empty() {
        state.first = params.iter().map(|p| vec![0.0; p.len()]).collect();
        state.second = state.first.clone();
    }
    if state.first.len() != params.len() {
        return Err(Error::shape("optimizer state tensor count changed"));
    }
    for ((p, g), m) in params.iter().zip(&grads).zip(&state.first) {
        if p.len() != g.len() || p.len() != m.len() {
            return Err(Error::shape("optimizer tensor length mismatch"));
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, eps, wd) = (state.beta1, state.beta2, state.eps, state.weight_decay);

    for (((p, g), m), v) in params
        .into_iter()
        .zip(grads)
        .zip(state.first.iter_mut())
        .zip(state.second.iter_mut())
    {
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= lr * (m_hat / (v_hat.sqrt() + eps) + wd * p[i]);
        }
    }
    Ok(())
}

/// Linear warmup from 0 to `base_lr` over the first `warmup_frac` of the
/// steps, then linear decay to 0 at `total_steps`.
pub fn lr_at(global_step: usize, total_steps: usize, base_lr: f64, warmup_frac: f64) -> f64 {
    if total_steps == 0 {
        return 0.0;
    }
    let step = global_step.min(total_steps) as f64;
    let total = total_steps as f64;
    let warmup = warmup_frac.clamp(0.0, 1.0) * total;
    if step < warmup {
        base_lr * (step / warmup)
    } else if warmup >= total {
        base_lr
    } else {
        base_lr * ((total - step) / (total - warmup))
    }
}
