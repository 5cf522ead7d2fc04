//! Optimization and the two training stages.

pub mod checkpoint;
pub mod generate;
pub mod lm;
pub mod optim;
pub mod stage1;
pub mod stage2;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, CheckpointHeader};
pub use generate::{generate_report, Strategy};
pub use lm::{LmConfig, StubLm};
pub use optim::{adamw_step, lr_at, AdamW, OptimizerState};
pub use stage1::{stage1_loss_graph, train_stage1, Negatives, Stage1Example, Stage1Losses};
pub use stage2::{pretrain_stub_lm, train_stage2, LmTrainConfig, Stage2Model};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::rng::{Rng, RngState};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub stage: u8,
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub betas: [f64; 2],
    pub weight_decay: f64,
    pub smoothing: f64,
    pub n_queries: usize,
    pub seed: u64,
    pub max_tiles_per_case: usize,
    /// Weights of the contrastive, matching and generation losses.
    pub loss_weights: [f64; 3],
    /// Global gradient-norm bound; 0 disables clipping.
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::stage1()
    }
}

impl TrainConfig {
    pub fn stage1() -> Self {
        TrainConfig {
            stage: 1,
            epochs: 25,
            batch_size: 20,
            peak_lr: 1e-4,
            warmup_steps: 1000,
            betas: [0.9, 0.999],
            weight_decay: 0.01,
            smoothing: 0.9,
            n_queries: 16,
            seed: 0,
            max_tiles_per_case: 256,
            loss_weights: [1.0, 1.0, 1.0],
            grad_clip: 0.0,
        }
    }

    pub fn stage2() -> Self {
        TrainConfig {
            stage: 2,
            epochs: 21,
            batch_size: 36,
            peak_lr: 1e-3,
            n_queries: 64,
            ..Self::stage1()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.stage == 1 || self.stage == 2) {
            return Err(Error::config(format!("stage must be 1 or 2, got {}", self.stage)));
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return Err(Error::config("peak_lr must be positive"));
        }
        if self.stage == 1 && self.batch_size < 2 {
            return Err(Error::config("stage-1 batch_size must be at least 2"));
        }
        if self.batch_size == 0 || self.n_queries == 0 || self.max_tiles_per_case == 0 {
            return Err(Error::config("batch_size, n_queries and max_tiles_per_case must be positive"));
        }
        if !(self.smoothing > 0.0 && self.smoothing <= 1.0) {
            return Err(Error::config("smoothing must lie in (0, 1]"));
        }
        if self.betas.iter().any(|b| !(0.0..1.0).contains(b)) || self.weight_decay < 0.0 {
            return Err(Error::config("betas must lie in [0, 1) and weight_decay be non-negative"));
        }
        if self.grad_clip < 0.0 {
            return Err(Error::config("grad_clip must be non-negative"));
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamW {
        AdamW {
            betas: (self.betas[0], self.betas[1]),
            weight_decay: self.weight_decay,
            eps: optim::ADAM_EPS,
        }
    }
}

/// Index ranges of the batches of an `n`-item epoch. A trailing batch of one
/// item is merged into its predecessor so every batch has in-batch negatives.
pub fn batch_ranges(n: usize, batch_size: usize) -> Vec<std::ops::Range<usize>> {
    let mut out: Vec<std::ops::Range<usize>> = (0..n)
        .step_by(batch_size.max(1))
        .map(|s| s..(s + batch_size).min(n))
        .collect();
    if out.len() >= 2 && out.last().is_some_and(|r| r.len() == 1) {
        let last = out.pop().expect("two batches");
        out.last_mut().expect("one batch").end = last.end;
    }
    out
}

/// First `max` rows of a tile bag (evaluation rule) or a uniformly drawn
/// subset of `max` rows in bag order (training rule).
pub fn select_tiles(tiles: &Tensor, max: usize, rng: Option<&mut Rng>) -> Result<Tensor> {
    let n = tiles.rows();
    if n <= max {
        return Ok(tiles.clone());
    }
    let mut rows: Vec<usize> = match rng {
        None => (0..max).collect(),
        Some(r) => rand::seq::index::sample(r, n, max).into_vec(),
    };
    rows.sort_unstable();
    tiles.select_rows(&rows)
}

/// Per-epoch record of a training run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub lr_trace: Vec<f64>,
    pub best_epoch: usize,
}

/// Index of the smallest value, earliest on ties.
pub fn argmin_earliest(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, v) in values.iter().enumerate() {
        if best.is_none_or(|b| *v < values[b]) {
            best = Some(i);
        }
    }
    best
}

/// What a training loop needs from a model.
pub(crate) trait Trainable {
    fn stores(&self) -> Vec<&ParamStore>;
    fn stores_mut(&mut self) -> Vec<&mut ParamStore>;
    /// Scalar loss of one batch of dataset indices.
    fn batch_loss(&self, g: &mut Graph, vars: &[Vec<Var>], batch: &[usize], rng: Option<&mut Rng>) -> Result<Var>;
}

pub(crate) struct LoopOutcome {
    pub log: TrainLog,
    pub optimizer: OptimizerState,
    pub rng_state: RngState,
}

fn bind_all<M: Trainable>(model: &M, g: &mut Graph) -> Vec<Vec<Var>> {
    model.stores().iter().map(|s| s.bind(g)).collect()
}

/// Mean batch loss over `items` with deterministic batches and no gradients.
pub(crate) fn evaluate_loss<M: Trainable>(model: &M, items: &[usize], batch_size: usize) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::invalid("empty evaluation split"));
    }
    let mut frozen: Vec<ParamStore> = model.stores().into_iter().cloned().collect();
    frozen.iter_mut().for_each(|s| s.set_all_trainable(false));
    let mut total = 0.0;
    for r in batch_ranges(items.len(), batch_size) {
        let mut g = Graph::new();
        let vars: Vec<Vec<Var>> = frozen.iter().map(|s| s.bind(&mut g)).collect();
        let loss = model.batch_loss(&mut g, &vars, &items[r.clone()], None)?;
        total += g.scalar_value(loss) * r.len() as f64;
    }
    Ok(total / items.len() as f64)
}

/// Shared epoch loop: shuffle, batch, AdamW with warmup + cosine, validation
/// after every epoch, and restoration of the best-validation parameters.
pub(crate) fn run_loop<M: Trainable>(
    model: &mut M,
    cfg: &TrainConfig,
    train: &[usize],
    val: &[usize],
    rng: &mut Rng,
) -> Result<LoopOutcome> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::invalid("training and validation splits must be non-empty"));
    }
    let per_epoch = batch_ranges(train.len(), cfg.batch_size).len() as u64;
    let total = per_epoch * cfg.epochs as u64;
    if total > 0 && cfg.warmup_steps >= total {
        return Err(Error::config(format!(
            "warmup_steps {} must be smaller than the {total} total steps",
            cfg.warmup_steps
        )));
    }
    let hp = cfg.adamw();
    let mut state = OptimizerState::new();
    let mut log = TrainLog::default();
    let mut best: Option<(f64, Vec<ParamStore>, OptimizerState)> = None;
    let mut order = train.to_vec();
    for epoch in 1..=cfg.epochs {
        order.shuffle(rng);
        let mut epoch_loss = 0.0;
        for r in batch_ranges(order.len(), cfg.batch_size) {
            let mut g = Graph::new();
            let vars = bind_all(model, &mut g);
            let loss = model.batch_loss(&mut g, &vars, &order[r.clone()], Some(rng))?;
            let value = g.scalar_value(loss);
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("training loss {value} in epoch {epoch}")));
            }
            epoch_loss += value * r.len() as f64;
            let grads = g.backward(loss)?;
            let mut per_store: Vec<Vec<Option<Vec<f64>>>> = model
                .stores()
                .iter()
                .zip(&vars)
                .map(|(s, v)| optim::collect_grads(s, v, &grads))
                .collect();
            drop(g);
            if cfg.grad_clip > 0.0 {
                let mut refs: Vec<&mut Vec<Option<Vec<f64>>>> = per_store.iter_mut().collect();
                optim::clip_grad_norm(&mut refs, cfg.grad_clip);
            }
            let lr = lr_at(state.step, cfg.warmup_steps, total, cfg.peak_lr);
            state.step += 1;
            for (store, grads) in model.stores_mut().into_iter().zip(&per_store) {
                optim::adamw_update(store, grads, &mut state, lr, &hp)?;
            }
            log.lr_trace.push(lr);
        }
        log.train_loss.push(epoch_loss / order.len() as f64);
        let v = evaluate_loss(model, val, cfg.batch_size)?;
        log.val_loss.push(v);
        if best.as_ref().is_none_or(|(b, _, _)| v < *b) {
            best = Some((v, model.stores().into_iter().cloned().collect(), state.clone()));
            log.best_epoch = epoch;
        }
    }
    let rng_state = RngState::capture(rng);
    let optimizer = match best {
        Some((_, stores, opt)) => {
            for (dst, src) in model.stores_mut().into_iter().zip(stores) {
                *dst = src;
            }
            opt
        }
        None => state,
    };
    Ok(LoopOutcome {
        log,
        optimizer,
        rng_state,
    })
}
