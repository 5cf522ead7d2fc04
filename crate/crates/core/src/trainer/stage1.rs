//! Representation learning: contrastive + matching + generation losses on the
//! Q-Former.

use super::checkpoint::{Checkpoint, CheckpointHeader};
use super::{run_loop, select_tiles, TrainConfig, TrainLog, Trainable};
use crate::corpus::{Dataset, Variant};
use crate::error::{Error, Result};
use crate::objectives::{
    hardest_negatives, itc_loss_graph, itg_loss_graph, itm_loss_graph, mine_hard_negatives,
    pairwise_similarity_graph, ItgTarget, MiningDirection,
};
use crate::params::ParamStore;
use crate::qformer::{MaskMode, QFormer, QFormerConfig};
use crate::rng::{self, Rng};
use crate::tensor::{Graph, Tensor, Var};

/// One image-report pair prepared for the stage-1 losses.
#[derive(Clone, Debug)]
pub struct Stage1Example {
    pub tiles: Tensor,
    /// `CLS` + report words.
    pub text_ids: Vec<usize>,
    pub itg: ItgTarget,
}

/// How the matching loss picks its negative pairs.
pub enum Negatives<'a> {
    /// Similarity-weighted sampling with temperature τ.
    Sample(&'a mut Rng),
    /// Most similar non-matching item (validation).
    Hardest,
    /// Given indices (gradient checks).
    Fixed {
        text_for_image: Vec<usize>,
        image_for_text: Vec<usize>,
    },
}

#[derive(Clone, Copy, Debug)]
pub struct Stage1Losses {
    pub total: Var,
    pub itc: Var,
    pub itm: Var,
    pub itg: Var,
}

/// Weighted sum of the three losses over one batch. `vars` binds `model.store`.
pub fn stage1_loss_graph(
    model: &QFormer,
    g: &mut Graph,
    vars: &[Var],
    examples: &[Stage1Example],
    negatives: Negatives<'_>,
    smoothing: f64,
    weights: [f64; 3],
) -> Result<Stage1Losses> {
    let n = examples.len();
    if n < 2 {
        return Err(Error::invalid("stage-1 batches need at least two pairs"));
    }
    let nq = model.config.n_queries;
    let tiles: Vec<Var> = examples.iter().map(|e| g.constant(e.tiles.clone())).collect();

    // The causal pass yields the image-only query states (queries never see
    // text under this mask) together with teacher-forced text states.
    let mut query_norm = Vec::with_capacity(n);
    let mut itg_terms = Vec::with_capacity(n);
    for (e, &t) in examples.iter().zip(&tiles) {
        let out = model.forward(g, vars, Some(t), Some(e.itg.inputs()), MaskMode::MultimodalCausal)?;
        let q = out.queries.expect("image stream");
        query_norm.push(g.l2_normalize(q)?);
        let logits = model.text_logits(g, vars, out.text.expect("text stream"))?;
        itg_terms.push(itg_loss_graph(g, logits, e.itg.targets(), &e.itg.mask())?);
    }
    let mut cls = Vec::with_capacity(n);
    for e in examples {
        let out = model.forward(g, vars, None, Some(&e.text_ids), MaskMode::Unimodal)?;
        let first = g.slice_rows(out.text.expect("text stream"), 0, 1)?;
        cls.push(g.l2_normalize(first)?);
    }
    let q_all = g.concat_rows(&query_norm)?;
    let t_all = g.concat_rows(&cls)?;
    let sim = pairwise_similarity_graph(g, q_all, nq, t_all)?;
    let itc = itc_loss_graph(g, sim, vars[model.log_temperature.0], smoothing)?;

    let sim_t = g.tensor(sim);
    let (neg_text, neg_image) = match negatives {
        Negatives::Sample(r) => {
            let tau = g.scalar_value(vars[model.log_temperature.0]).exp();
            (
                mine_hard_negatives(&sim_t, MiningDirection::TextForImage, tau, r)?,
                mine_hard_negatives(&sim_t, MiningDirection::ImageForText, tau, r)?,
            )
        }
        Negatives::Hardest => (
            hardest_negatives(&sim_t, MiningDirection::TextForImage)?,
            hardest_negatives(&sim_t, MiningDirection::ImageForText)?,
        ),
        Negatives::Fixed {
            text_for_image,
            image_for_text,
        } => {
            if text_for_image.len() != n || image_for_text.len() != n {
                return Err(Error::invalid("one fixed negative per pair expected"));
            }
            (text_for_image, image_for_text)
        }
    };
    let mut pairs = Vec::with_capacity(3 * n);
    let mut labels = Vec::with_capacity(3 * n);
    for i in 0..n {
        pairs.push((i, i));
        labels.push(true);
    }
    for i in 0..n {
        pairs.push((i, neg_text[i]));
        labels.push(false);
    }
    for i in 0..n {
        pairs.push((neg_image[i], i));
        labels.push(false);
    }
    let mut states = Vec::with_capacity(3 * n);
    for &(img, txt) in &pairs {
        let out = model.forward(
            g,
            vars,
            Some(tiles[img]),
            Some(&examples[txt].text_ids),
            MaskMode::Bidirectional,
        )?;
        states.push(out.queries.expect("image stream"));
    }
    let states = g.concat_rows(&states)?;
    let itm = itm_loss_graph(
        g,
        states,
        nq,
        &labels,
        vars[model.itm_head.w.0],
        vars[model.itm_head.b.0],
    )?;

    let itg_sum = itg_terms
        .iter()
        .skip(1)
        .try_fold(itg_terms[0], |acc, &t| g.add(acc, t))?;
    let itg = g.scale(itg_sum, 1.0 / n as f64);

    let a = g.scale(itc, weights[0]);
    let b = g.scale(itm, weights[1]);
    let c = g.scale(itg, weights[2]);
    let ab = g.add(a, b)?;
    let total = g.add(ab, c)?;
    Ok(Stage1Losses {
        total,
        itc,
        itm,
        itg,
    })
}

/// Q-Former configuration for a dataset under a training config.
pub fn qformer_config_for(base: &QFormerConfig, dataset: &Dataset, cfg: &TrainConfig) -> QFormerConfig {
    QFormerConfig {
        n_queries: cfg.n_queries,
        image_feature_dim: dataset.feature_dim(),
        vocab_size: dataset.tokenizer.vocab_size(),
        max_text_len: base.max_text_len.max(dataset.max_report_len() + 1),
        ..base.clone()
    }
}

pub(crate) struct Stage1Task<'a> {
    pub model: QFormer,
    pub dataset: &'a Dataset,
    pub text_ids: Vec<Vec<usize>>,
    pub itg: Vec<ItgTarget>,
    pub cfg: &'a TrainConfig,
}

impl<'a> Stage1Task<'a> {
    pub fn new(model: QFormer, dataset: &'a Dataset, variant: Variant, cfg: &'a TrainConfig) -> Result<Self> {
        let text_ids: Vec<Vec<usize>> = dataset
            .cases
            .iter()
            .map(|c| dataset.filter_report(c, variant))
            .collect();
        let itg = dataset
            .cases
            .iter()
            .map(|c| ItgTarget::new(&dataset.report_words(c, variant), None))
            .collect();
        Ok(Stage1Task {
            model,
            dataset,
            text_ids,
            itg,
            cfg,
        })
    }

    pub fn examples(&self, batch: &[usize], mut rng: Option<&mut Rng>) -> Result<Vec<Stage1Example>> {
        batch
            .iter()
            .map(|&i| {
                Ok(Stage1Example {
                    tiles: select_tiles(
                        &self.dataset.cases[i].tiles,
                        self.cfg.max_tiles_per_case,
                        rng.as_deref_mut(),
                    )?,
                    text_ids: self.text_ids[i].clone(),
                    itg: self.itg[i].clone(),
                })
            })
            .collect()
    }
}

impl Trainable for Stage1Task<'_> {
    fn stores(&self) -> Vec<&ParamStore> {
        vec![&self.model.store]
    }

    fn stores_mut(&mut self) -> Vec<&mut ParamStore> {
        vec![&mut self.model.store]
    }

    fn batch_loss(&self, g: &mut Graph, vars: &[Vec<Var>], batch: &[usize], mut rng: Option<&mut Rng>) -> Result<Var> {
        let examples = self.examples(batch, rng.as_deref_mut())?;
        let negatives = match rng {
            Some(r) => Negatives::Sample(r),
            None => Negatives::Hardest,
        };
        let l = stage1_loss_graph(
            &self.model,
            g,
            &vars[0],
            &examples,
            negatives,
            self.cfg.smoothing,
            self.cfg.loss_weights,
        )?;
        Ok(l.total)
    }
}

/// The freshly initialized stage-1 model for a dataset. Initialization does
/// not depend on the report variant.
pub fn init_stage1(base: &QFormerConfig, dataset: &Dataset, cfg: &TrainConfig) -> Result<QFormer> {
    let qcfg = qformer_config_for(base, dataset, cfg);
    let mut model = QFormer::new(qcfg, crate::tensor::DType::Float32, &mut rng::rng_for(cfg.seed, "stage1/init"))?;
    model.store.set_trainable(model.token_embeddings, false);
    Ok(model)
}

/// Trains on the train split and returns the best-validation checkpoint.
pub fn train_stage1(
    base: &QFormerConfig,
    cfg: &TrainConfig,
    dataset: &Dataset,
    variant: Variant,
) -> Result<(Checkpoint, TrainLog)> {
    cfg.validate()?;
    if cfg.stage != 1 {
        return Err(Error::config("train_stage1 needs a stage-1 config"));
    }
    let model = init_stage1(base, dataset, cfg)?;
    let mut task = Stage1Task::new(model, dataset, variant, cfg)?;
    let mut rng = rng::rng_for(cfg.seed, &format!("stage1/{variant}/train"));
    let out = run_loop(&mut task, cfg, &dataset.split.train, &dataset.split.val, &mut rng)?;
    let header = CheckpointHeader {
        kind: "stage1".into(),
        variant: Some(variant),
        train_config: serde_json::to_value(cfg)?,
        qformer_config: Some(task.model.config.clone()),
        lm_config: None,
        epoch: out.log.best_epoch,
        epochs_run: cfg.epochs,
        train_loss_history: out.log.train_loss.clone(),
        val_loss_history: out.log.val_loss.clone(),
        lr_trace: out.log.lr_trace.clone(),
        optimizer_step: out.optimizer.step,
        rng_state: out.rng_state,
    };
    let ckpt = Checkpoint {
        header,
        params: Checkpoint::params_of(&[&task.model.store]),
        optimizer: out.optimizer,
    };
    Ok((ckpt, out.log))
}
