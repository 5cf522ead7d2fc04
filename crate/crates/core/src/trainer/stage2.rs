//! Language-model pretraining and image-conditioned generation training.

use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, CheckpointHeader};
use super::lm::{LmConfig, StubLm};
use super::{run_loop, select_tiles, TrainConfig, TrainLog, Trainable};
use crate::corpus::{Dataset, Variant};
use crate::error::{Error, Result};
use crate::objectives::{itg_loss_graph, ItgTarget};
use crate::params::ParamStore;
use crate::qformer::{MaskMode, QFormer};
use crate::rng::{self, Rng};
use crate::tensor::{DType, Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for LmTrainConfig {
    fn default() -> Self {
        LmTrainConfig {
            epochs: 10,
            batch_size: 16,
            peak_lr: 3e-3,
            warmup_steps: 20,
            weight_decay: 0.01,
            seed: 0,
        }
    }
}

impl LmTrainConfig {
    fn as_train_config(&self) -> TrainConfig {
        TrainConfig {
            stage: 2,
            epochs: self.epochs,
            batch_size: self.batch_size,
            peak_lr: self.peak_lr,
            warmup_steps: self.warmup_steps,
            weight_decay: self.weight_decay,
            seed: self.seed,
            ..TrainConfig::stage2()
        }
    }
}

/// Mean per-sequence teacher-forced loss over `batch`.
fn mean_itg(g: &mut Graph, terms: Vec<Var>) -> Result<Var> {
    let n = terms.len();
    let sum = terms
        .iter()
        .skip(1)
        .try_fold(terms[0], |acc, &t| g.add(acc, t))?;
    Ok(g.scale(sum, 1.0 / n as f64))
}

struct LmTask {
    lm: StubLm,
    targets: Vec<ItgTarget>,
}

impl Trainable for LmTask {
    fn stores(&self) -> Vec<&ParamStore> {
        vec![&self.lm.store]
    }

    fn stores_mut(&mut self) -> Vec<&mut ParamStore> {
        vec![&mut self.lm.store]
    }

    fn batch_loss(&self, g: &mut Graph, vars: &[Vec<Var>], batch: &[usize], _rng: Option<&mut Rng>) -> Result<Var> {
        let mut terms = Vec::with_capacity(batch.len());
        for &i in batch {
            let t = &self.targets[i];
            let logits = self.lm.forward(g, &vars[0], None, t.inputs())?;
            terms.push(itg_loss_graph(g, logits, t.targets(), &t.mask())?);
        }
        mean_itg(g, terms)
    }
}

/// Mean next-token loss of `lm` on word sequences (no image prefix).
pub fn lm_loss(lm: &StubLm, texts: &[Vec<usize>]) -> Result<f64> {
    let task = LmTask {
        lm: lm.clone(),
        targets: texts.iter().map(|w| ItgTarget::new(w, None)).collect(),
    };
    let idx: Vec<usize> = (0..texts.len()).collect();
    super::evaluate_loss(&task, &idx, 16)
}

/// Next-token training of a fresh language model on report word sequences.
/// `held_out` selects the returned epoch; it falls back to `train`.
pub fn pretrain_stub_lm(
    train: &[Vec<usize>],
    held_out: &[Vec<usize>],
    lm_config: &LmConfig,
    cfg: &LmTrainConfig,
) -> Result<(Checkpoint, TrainLog)> {
    if train.is_empty() || train.iter().any(Vec::is_empty) {
        return Err(Error::invalid("language-model pretraining needs non-empty texts"));
    }
    let tc = cfg.as_train_config();
    let lm = StubLm::new(lm_config.clone(), DType::Float32, &mut rng::rng_for(cfg.seed, "lm/init"))?;
    let held = if held_out.is_empty() { train } else { held_out };
    let targets: Vec<ItgTarget> = train
        .iter()
        .chain(held)
        .map(|w| ItgTarget::new(w, None))
        .collect();
    let train_idx: Vec<usize> = (0..train.len()).collect();
    let val_idx: Vec<usize> = (train.len()..train.len() + held.len()).collect();
    let mut task = LmTask { lm, targets };
    let mut r = rng::rng_for(cfg.seed, "lm/train");
    let out = run_loop(&mut task, &tc, &train_idx, &val_idx, &mut r)?;
    let header = CheckpointHeader {
        kind: "lm".into(),
        variant: None,
        train_config: serde_json::to_value(cfg)?,
        qformer_config: None,
        lm_config: Some(task.lm.config.clone()),
        epoch: out.log.best_epoch,
        epochs_run: cfg.epochs,
        train_loss_history: out.log.train_loss.clone(),
        val_loss_history: out.log.val_loss.clone(),
        lr_trace: out.log.lr_trace.clone(),
        optimizer_step: out.optimizer.step,
        rng_state: out.rng_state,
    };
    Ok((
        Checkpoint {
            header,
            params: Checkpoint::params_of(&[&task.lm.store]),
            optimizer: out.optimizer,
        },
        out.log,
    ))
}

/// Q-Former with its decoder projection plus the language model.
#[derive(Clone, Debug, PartialEq)]
pub struct Stage2Model {
    pub qformer: QFormer,
    pub lm: StubLm,
}

impl Stage2Model {
    pub fn new(qformer: QFormer, lm: StubLm) -> Result<Self> {
        let proj = qformer
            .stage2_projection
            .ok_or_else(|| Error::invalid("Q-Former has no decoder projection"))?;
        let out_dim = qformer.store.get(proj.w).shape()[1];
        if out_dim != lm.config.dim {
            return Err(Error::shape(
                "stage2",
                format!("projection width {out_dim} vs language-model width {}", lm.config.dim),
            ));
        }
        if qformer.config.vocab_size != lm.config.vocab_size {
            return Err(Error::invalid("Q-Former and language model vocabularies differ"));
        }
        Ok(Stage2Model { qformer, lm })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        Self::new(ckpt.qformer()?, ckpt.lm()?)
    }

    /// Projected query outputs `[n_queries, lm_dim]`.
    pub fn prefix(&self, g: &mut Graph, qvars: &[Var], tiles: Var) -> Result<Var> {
        let out = self.qformer.forward(g, qvars, Some(tiles), None, MaskMode::Unimodal)?;
        let proj = self.qformer.stage2_projection.expect("checked at construction");
        proj.apply(g, qvars, out.queries.expect("image stream"))
    }

    /// Teacher-forced generation loss for one case.
    pub fn case_loss(&self, g: &mut Graph, vars: &[Vec<Var>], tiles: &Tensor, target: &ItgTarget) -> Result<Var> {
        let t = g.constant(tiles.clone());
        let prefix = self.prefix(g, &vars[0], t)?;
        let logits = self.lm.forward(g, &vars[1], Some(prefix), target.inputs())?;
        itg_loss_graph(g, logits, target.targets(), &target.mask())
    }
}

struct Stage2Task<'a> {
    model: Stage2Model,
    dataset: &'a Dataset,
    targets: Vec<ItgTarget>,
    max_tiles: usize,
}

impl Trainable for Stage2Task<'_> {
    fn stores(&self) -> Vec<&ParamStore> {
        vec![&self.model.qformer.store, &self.model.lm.store]
    }

    fn stores_mut(&mut self) -> Vec<&mut ParamStore> {
        vec![&mut self.model.qformer.store, &mut self.model.lm.store]
    }

    fn batch_loss(&self, g: &mut Graph, vars: &[Vec<Var>], batch: &[usize], mut rng: Option<&mut Rng>) -> Result<Var> {
        let mut terms = Vec::with_capacity(batch.len());
        for &i in batch {
            let tiles = select_tiles(&self.dataset.cases[i].tiles, self.max_tiles, rng.as_deref_mut())?;
            terms.push(self.model.case_loss(g, vars, &tiles, &self.targets[i])?);
        }
        mean_itg(g, terms)
    }
}

/// Loads the stage-1 Q-Former, replaces its queries with `cfg.n_queries`
/// fresh ones, attaches the decoder projection and freezes the LM body.
pub fn init_stage2(cfg: &TrainConfig, stage1: &Checkpoint, lm: &StubLm) -> Result<Stage2Model> {
    let mut q = stage1.qformer()?;
    q.reinit_queries(cfg.n_queries, &mut rng::rng_for(cfg.seed, "stage2/queries"))?;
    q.attach_projection(lm.config.dim, &mut rng::rng_for(cfg.seed, "stage2/projection"));
    q.store.set_trainable(q.token_embeddings, false);
    let mut lm = lm.clone();
    lm.freeze_body();
    Stage2Model::new(q, lm)
}

pub fn stage2_targets(dataset: &Dataset, variant: Variant) -> Vec<ItgTarget> {
    dataset
        .cases
        .iter()
        .map(|c| ItgTarget::new(&dataset.report_words(c, variant), None))
        .collect()
}

/// Mean validation generation loss of a stage-2 model.
pub fn stage2_loss(model: &Stage2Model, dataset: &Dataset, variant: Variant, items: &[usize], cfg: &TrainConfig) -> Result<f64> {
    let task = Stage2Task {
        model: model.clone(),
        dataset,
        targets: stage2_targets(dataset, variant),
        max_tiles: cfg.max_tiles_per_case,
    };
    super::evaluate_loss(&task, items, cfg.batch_size)
}

pub fn train_stage2(
    cfg: &TrainConfig,
    dataset: &Dataset,
    variant: Variant,
    stage1: &Checkpoint,
    lm: &StubLm,
) -> Result<(Checkpoint, TrainLog)> {
    cfg.validate()?;
    if cfg.stage != 2 {
        return Err(Error::config("train_stage2 needs a stage-2 config"));
    }
    let model = init_stage2(cfg, stage1, lm)?;
    let longest = dataset.max_report_len() + 1;
    if longest > model.lm.config.max_len {
        return Err(Error::config(format!(
            "reports of {longest} tokens exceed the language model's max_len {}",
            model.lm.config.max_len
        )));
    }
    let mut task = Stage2Task {
        model,
        dataset,
        targets: stage2_targets(dataset, variant),
        max_tiles: cfg.max_tiles_per_case,
    };
    let mut r = rng::rng_for(cfg.seed, &format!("stage2/{variant}/train"));
    let out = run_loop(&mut task, cfg, &dataset.split.train, &dataset.split.val, &mut r)?;
    let header = CheckpointHeader {
        kind: "stage2".into(),
        variant: Some(variant),
        train_config: serde_json::to_value(cfg)?,
        qformer_config: Some(task.model.qformer.config.clone()),
        lm_config: Some(task.model.lm.config.clone()),
        epoch: out.log.best_epoch,
        epochs_run: cfg.epochs,
        train_loss_history: out.log.train_loss.clone(),
        val_loss_history: out.log.val_loss.clone(),
        lr_trace: out.log.lr_trace.clone(),
        optimizer_step: out.optimizer.step,
        rng_state: out.rng_state,
    };
    Ok((
        Checkpoint {
            header,
            params: Checkpoint::params_of(&[&task.model.qformer.store, &task.model.lm.store]),
            optimizer: out.optimizer,
        },
        out.log,
    ))
}
