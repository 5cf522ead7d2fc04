//! AdamW with decoupled weight decay and the warmup + cosine schedule.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{DType, Gradients, Tensor, Var};

pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub betas: (f64, f64),
    pub weight_decay: f64,
    pub eps: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            betas: (0.9, 0.999),
            weight_decay: 0.01,
            eps: ADAM_EPS,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// First and second moments keyed by parameter name, created on a
/// parameter's first gradient.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub moments: BTreeMap<String, Moments>,
}

impl OptimizerState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Container records `opt.m.<name>` / `opt.v.<name>` in float64.
    pub fn records(&self, store_shapes: &BTreeMap<String, Vec<usize>>) -> Result<Vec<(String, Tensor)>> {
        let mut out = Vec::new();
        for (name, mo) in &self.moments {
            let shape = store_shapes
                .get(name)
                .cloned()
                .unwrap_or_else(|| vec![mo.m.len()]);
            out.push((format!("opt.m.{name}"), Tensor::new(shape.clone(), DType::Float64, mo.m.clone())?));
            out.push((format!("opt.v.{name}"), Tensor::new(shape, DType::Float64, mo.v.clone())?));
        }
        Ok(out)
    }

    pub fn from_records(step: u64, records: &[(String, Tensor)]) -> Result<Self> {
        let mut moments: BTreeMap<String, Moments> = BTreeMap::new();
        for (name, t) in records {
            if let Some(p) = name.strip_prefix("opt.m.") {
                moments.entry(p.to_string()).or_default().m = t.data().to_vec();
            } else if let Some(p) = name.strip_prefix("opt.v.") {
                moments.entry(p.to_string()).or_default().v = t.data().to_vec();
            }
        }
        if moments.values().any(|m| m.m.len() != m.v.len()) {
            return Err(Error::Format("optimizer moments are incomplete".into()));
        }
        Ok(OptimizerState { step, moments })
    }
}

/// Gradients of `store`'s parameters from a graph where `vars[i]` is the leaf
/// bound for `ParamId(i)`.
pub fn collect_grads(store: &ParamStore, vars: &[Var], grads: &Gradients) -> Vec<Option<Vec<f64>>> {
    store
        .ids()
        .map(|id| {
            if store.is_trainable(id) {
                grads.get(vars[id.0]).map(<[f64]>::to_vec)
            } else {
                None
            }
        })
        .collect()
}

/// Scales all gradients so their joint Euclidean norm is at most `max_norm`.
pub fn clip_grad_norm(groups: &mut [&mut Vec<Option<Vec<f64>>>], max_norm: f64) -> f64 {
    let total: f64 = groups
        .iter()
        .flat_map(|g| g.iter().flatten())
        .flat_map(|v| v.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if total > max_norm && total > 0.0 {
        let c = max_norm / total;
        for g in groups.iter_mut() {
            for v in g.iter_mut().flatten() {
                v.iter_mut().for_each(|x| *x *= c);
            }
        }
    }
    total
}

/// Applies one AdamW update to every parameter with a gradient, using the
/// already-advanced `state.step` for bias correction. Parameters without a
/// gradient (frozen or unused) are left untouched, decay included.
pub fn adamw_update(
    store: &mut ParamStore,
    grads: &[Option<Vec<f64>>],
    state: &mut OptimizerState,
    lr: f64,
    hp: &AdamW,
) -> Result<()> {
    if state.step == 0 {
        return Err(Error::invalid("advance the optimizer step before updating"));
    }
    if grads.len() != store.len() {
        return Err(Error::shape("adamw", "one gradient slot per parameter expected"));
    }
    for (i, g) in grads.iter().enumerate() {
        if let Some(g) = g {
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient of {}",
                    store.name(ParamId(i))
                )));
            }
        }
    }
    let (b1, b2) = hp.betas;
    let t = state.step as i32;
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (i, g) in grads.iter().enumerate() {
        let Some(g) = g else { continue };
        let id = ParamId(i);
        let name = store.name(id).to_string();
        let p = store.get_mut(id);
        if g.len() != p.len() {
            return Err(Error::shape("adamw", format!("{name}: gradient length")));
        }
        let mo = state.moments.entry(name).or_insert_with(|| Moments {
            m: vec![0.0; g.len()],
            v: vec![0.0; g.len()],
        });
        for k in 0..g.len() {
            mo.m[k] = b1 * mo.m[k] + (1.0 - b1) * g[k];
            mo.v[k] = b2 * mo.v[k] + (1.0 - b2) * g[k] * g[k];
        }
        p.update(|k, theta| {
            let decayed = theta - lr * hp.weight_decay * theta;
            let mhat = mo.m[k] / c1;
            let vhat = mo.v[k] / c2;
            decayed - lr * mhat / (vhat.sqrt() + hp.eps)
        });
    }
    Ok(())
}

/// Advances the step counter and updates `store`.
pub fn adamw_step(
    store: &mut ParamStore,
    grads: &[Option<Vec<f64>>],
    state: &mut OptimizerState,
    lr: f64,
    hp: &AdamW,
) -> Result<()> {
    state.step += 1;
    adamw_update(store, grads, state, lr, hp)
}

/// Linear warmup from 0 to `peak_lr`, then cosine decay to 0 at `total_steps`.
pub fn lr_at(step: u64, warmup_steps: u64, total_steps: u64, peak_lr: f64) -> f64 {
    if step < warmup_steps {
        return peak_lr * step as f64 / warmup_steps as f64;
    }
    if total_steps <= warmup_steps {
        return peak_lr;
    }
    let progress = ((step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64).min(1.0);
    peak_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}
