use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::ParamStore;

/// Adaptive-moment optimizer with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }
}

/// Per-parameter first and second moments plus the step count.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptState {
    pub step: u64,
    pub first: BTreeMap<String, Vec<f64>>,
    pub second: BTreeMap<String, Vec<f64>>,
}

/// Applies one update from `grads` (matched by name) to `params`.
/// Parameters without a gradient only receive weight decay.
pub fn optimizer_update(
    params: &mut ParamStore,
    grads: &BTreeMap<String, Vec<f64>>,
    state: &mut OptState,
    opt: &AdamW,
) -> Result<()> {
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - opt.beta1.powi(t);
    let c2 = 1.0 - opt.beta2.powi(t);
    for (name, p) in params.iter_mut() {
        let decay = 1.0 - opt.lr * opt.weight_decay;
        let data = p.data_mut();
        let Some(g) = grads.get(name) else {
            data.iter_mut().for_each(|v| *v *= decay);
            continue;
        };
        if g.len() != data.len() {
            return Err(Error::shape(
                "optimizer_update",
                format!("gradient for {name} has {} values, parameter has {}", g.len(), data.len()),
            ));
        }
        let m = state.first.entry(name.to_owned()).or_insert_with(|| vec![0.0; g.len()]);
        let v = state.second.entry(name.to_owned()).or_insert_with(|| vec![0.0; g.len()]);
        for i in 0..data.len() {
            m[i] = opt.beta1 * m[i] + (1.0 - opt.beta1) * g[i];
            v[i] = opt.beta2 * v[i] + (1.0 - opt.beta2) * g[i] * g[i];
            let step = (m[i] / c1) / ((v[i] / c2).sqrt() + opt.eps);
            data[i] = data[i] * decay - opt.lr * step;
        }
    }
    Ok(())
}

/// Scales every gradient so the global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut BTreeMap<String, Vec<f64>>, max_norm: f64) -> f64 {
    let norm = grads.values().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let k = max_norm / norm;
        grads.values_mut().flatten().for_each(|g| *g *= k);
    }
    norm
}
