//! AdamW with decoupled weight decay, global-norm clipping and cosine decay.

use std::f64::consts::PI;

use crate::params::{ParamId, ParamStore};
use crate::tensor::{invalid, Real, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub weight_decay: Real,
    pub beta1: Real,
    pub beta2: Real,
    pub eps: Real,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            weight_decay: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter moments and step counts.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub steps: Vec<u64>,
    pub first: Vec<Vec<Real>>,
    pub second: Vec<Vec<Real>>,
}

impl AdamState {
    pub fn for_store(store: &ParamStore) -> Self {
        let sizes: Vec<usize> = store.ids().map(|id| store.get(id).numel()).collect();
        AdamState {
            steps: vec![0; sizes.len()],
            first: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            second: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }
}

/// One AdamW update of a single parameter buffer.
#[allow(clippy::too_many_arguments)]
pub fn adamw_step(
    param: &mut [Real],
    grad: &[Real],
    lr: Real,
    weight_decay: Real,
    betas: (Real, Real),
    eps: Real,
    first: &mut [Real],
    second: &mut [Real],
    step: &mut u64,
) -> Result<()> {
    if !(lr > 0.0) {
        return Err(invalid("adamw_step", format!("learning rate must be positive, got {lr}")));
    }
    *step += 1;
    let (b1, b2) = betas;
    let bc1 = 1.0 - b1.powi(*step as i32);
    let bc2 = 1.0 - b2.powi(*step as i32);
    for i in 0..param.len() {
        let g = grad[i];
        first[i] = b1 * first[i] + (1.0 - b1) * g;
        second[i] = b2 * second[i] + (1.0 - b2) * g * g;
        let mhat = first[i] / bc1;
        let vhat = second[i] / bc2;
        param[i] -= lr * weight_decay * param[i];
        param[i] -= lr * mhat / (vhat.sqrt() + eps);
    }
    Ok(())
}

/// Applies AdamW to every parameter for which `lr_of` yields a rate, using
/// the gradients accumulated in the store. Weight decay applies to matrices
/// only; vectors (biases, norms) are left undecayed.
pub fn step_store(
    store: &mut ParamStore,
    state: &mut AdamState,
    cfg: &AdamWConfig,
    lr_of: impl Fn(ParamId) -> Option<Real>,
) -> Result<()> {
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let Some(lr) = lr_of(id) else { continue };
        let i = id.index();
        let t = store.get_mut(id);
        let wd = if t.rank() >= 2 { cfg.weight_decay } else { 0.0 };
        let grad = t.grad().map(<[Real]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]);
        adamw_step(
            t.data_mut(),
            &grad,
            lr,
            wd,
            (cfg.beta1, cfg.beta2),
            cfg.eps,
            &mut state.first[i],
            &mut state.second[i],
            &mut state.steps[i],
        )?;
    }
    Ok(())
}

/// Global L2 norm of the accumulated gradients over `ids`.
pub fn grad_norm(store: &ParamStore, ids: &[ParamId]) -> Real {
    ids.iter()
        .filter_map(|id| store.get(*id).grad())
        .flat_map(|g| g.iter())
        .map(|x| x * x)
        .sum::<Real>()
        .sqrt()
}

/// Rescales gradients over `ids` so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore, ids: &[ParamId], max_norm: Real) -> Real {
    let norm = grad_norm(store, ids);
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for id in ids {
            let t = store.get_mut(*id);
            if let Some(g) = t.grad() {
                let scaled: Vec<Real> = g.iter().map(|x| x * s).collect();
                t.zero_grad();
                t.accumulate_grad(&scaled).expect("same shape");
            }
        }
    }
    norm
}

/// Cosine decay from `init` to `floor` over `total` steps; flat at `floor` afterwards.
pub fn cosine_lr(init: Real, floor: Real, step: usize, total: usize) -> Real {
    if total == 0 || step >= total {
        return floor;
    }
    let frac = step as f64 / total as f64;
    floor + 0.5 * (init - floor) * (1.0 + (PI * frac).cos()) as Real
}
