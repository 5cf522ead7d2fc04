//! One function per subcommand. Every command writes a resolved-config
//! snapshot into the run directory next to its outputs.

use std::fs;
use std::path::{Path, PathBuf};

use qfl_core::container::canonical_json_pretty;
use qfl_core::corpus::{Dataset, Variant};
use qfl_core::eval::{cross_eval, hallucination_report, HallucinationReport, RetrievalTable};
use qfl_core::trainer::{
    generate_report, pretrain_stub_lm, select_tiles, train_stage1, train_stage2, Checkpoint, Stage2Model, Strategy,
    TrainConfig, TrainLog,
};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::CliError;

pub const RETRIEVAL_CSV: &str = "retrieval.csv";
pub const RETRIEVAL_JSON: &str = "retrieval.json";
pub const HALLUCINATION_JSON: &str = "hallucination.json";
pub const LM_FILE: &str = "lm.qfl";

/// A resolved configuration bound to its run directory.
#[derive(Clone, Debug)]
pub struct Run {
    pub config: RunConfig,
    pub dir: PathBuf,
}

impl Run {
    /// Uses `dir` when given; otherwise the newest `<timestamp>-<hash8>`
    /// directory under `paths.runs_dir` whose hash matches the config, or a
    /// fresh one stamped now.
    pub fn open(config: RunConfig, dir: Option<PathBuf>) -> Result<Run, CliError> {
        let dir = match dir {
            Some(d) => d,
            None => {
                let hash = config.hash8();
                let root = &config.paths.runs_dir;
                let suffix = format!("-{hash}");
                let mut existing: Vec<PathBuf> = match fs::read_dir(root) {
                    Ok(rd) => rd
                        .filter_map(|e| e.ok())
                        .map(|e| e.path())
                        .filter(|p| p.is_dir() && p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.ends_with(&suffix)))
                        .collect(),
                    Err(_) => Vec::new(),
                };
                existing.sort();
                match existing.pop() {
                    Some(p) => p,
                    None => root.join(format!("{}{suffix}", chrono::Utc::now().format("%Y%m%dT%H%M%SZ"))),
                }
            }
        };
        fs::create_dir_all(&dir).map_err(|e| CliError::Io { path: dir.clone(), source: e })?;
        Ok(Run { config, dir })
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.dir.join("dataset")
    }

    pub fn checkpoint_path(&self, stage: u8, variant: Variant) -> PathBuf {
        self.dir.join(format!("stage{stage}_{variant}.qfl"))
    }

    pub fn lm_path(&self) -> PathBuf {
        self.dir.join(LM_FILE)
    }

    fn snapshot(&self, tag: &str) -> Result<(), CliError> {
        write(&self.dir.join(format!("{tag}.config.toml")), &self.config.to_toml())
    }

    pub fn dataset(&self) -> Result<Dataset, CliError> {
        let d = self.dataset_dir();
        if !Dataset::exists(&d) {
            return Err(CliError::Missing(format!(
                "no dataset in {}; run `qfl prepare` with this run directory first",
                d.display()
            )));
        }
        Ok(Dataset::load(&d)?)
    }

    fn checkpoint(&self, path: &Path, hint: &str) -> Result<Checkpoint, CliError> {
        if !path.exists() {
            return Err(CliError::Missing(format!("{} not found; run `{hint}` first", path.display())));
        }
        Ok(Checkpoint::load(path)?)
    }

    pub fn stage_checkpoint(&self, stage: u8, variant: Variant) -> Result<Checkpoint, CliError> {
        self.checkpoint(
            &self.checkpoint_path(stage, variant),
            &format!("qfl train --stage {stage} --variant {variant}"),
        )
    }
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::Io { path: path.to_path_buf(), source: e })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut s = canonical_json_pretty(value)?;
    s.push('\n');
    write(path, &s)
}

/// Evaluation tile budget recorded in a checkpoint's training config.
fn eval_tiles(ckpt: &Checkpoint) -> Result<usize, CliError> {
    let cfg: TrainConfig = serde_json::from_value(ckpt.header.train_config.clone())
        .map_err(|e| CliError::Core(qfl_core::Error::Format(format!("checkpoint training config: {e}"))))?;
    Ok(cfg.max_tiles_per_case)
}

pub fn cmd_prepare(run: &Run, force: bool) -> Result<String, CliError> {
    let dir = run.dataset_dir();
    if Dataset::exists(&dir) && !force {
        return Err(CliError::usage(format!(
            "a dataset already exists in {}; pass --force to overwrite it",
            dir.display()
        )));
    }
    run.snapshot("prepare")?;
    let ds = Dataset::generate(&run.config.corpus, run.config.seed)?;
    ds.save(&dir)?;
    let patients: std::collections::BTreeSet<&str> = ds.cases.iter().map(|c| c.patient_id.as_str()).collect();
    Ok(format!(
        "prepared {} cases from {} patients in {}: train {} / val {} / test {}, vocabulary {}",
        ds.cases.len(),
        patients.len(),
        dir.display(),
        ds.split.train.len(),
        ds.split.val.len(),
        ds.split.test.len(),
        ds.tokenizer.vocab_size()
    ))
}

fn report_words(ds: &Dataset, items: &[usize]) -> Vec<Vec<usize>> {
    items
        .iter()
        .map(|&i| ds.report_words(&ds.cases[i], Variant::Full))
        .collect()
}

fn save_trained(path: &Path, ckpt: &Checkpoint, log: &TrainLog) -> Result<(), CliError> {
    ckpt.save(path)?;
    write_json(&path.with_extension("log.json"), log)
}

fn last(v: &[f64]) -> String {
    v.last().map_or("n/a".into(), |x| format!("{x:.4}"))
}

pub fn cmd_pretrain_lm(run: &Run) -> Result<String, CliError> {
    let ds = run.dataset()?;
    run.snapshot("pretrain-lm")?;
    let lm_cfg = run.config.lm.lm_config(ds.tokenizer.vocab_size());
    let (ckpt, log) = pretrain_stub_lm(
        &report_words(&ds, &ds.split.train),
        &report_words(&ds, &ds.split.val),
        &lm_cfg,
        &run.config.lm_train,
    )?;
    save_trained(&run.lm_path(), &ckpt, &log)?;
    Ok(format!(
        "language model: {} epochs, validation loss {} per token (uniform baseline {:.4}), saved to {}",
        log.val_loss.len(),
        last(&log.val_loss),
        (lm_cfg.vocab_size as f64).ln(),
        run.lm_path().display()
    ))
}

pub fn cmd_train(run: &Run, stage: u8, variant: Variant) -> Result<String, CliError> {
    let ds = run.dataset()?;
    let (ckpt, log) = match stage {
        1 => {
            run.snapshot(&format!("train-stage1-{variant}"))?;
            train_stage1(&run.config.model.qformer_base(), &run.config.stage1, &ds, variant)?
        }
        2 => {
            let s1 = run.stage_checkpoint(1, variant)?;
            let lm = run.checkpoint(&run.lm_path(), "qfl pretrain-lm")?.lm()?;
            run.snapshot(&format!("train-stage2-{variant}"))?;
            train_stage2(&run.config.stage2, &ds, variant, &s1, &lm)?
        }
        s => return Err(CliError::usage(format!("--stage must be 1 or 2, got {s}"))),
    };
    let path = run.checkpoint_path(stage, variant);
    save_trained(&path, &ckpt, &log)?;
    Ok(format!(
        "stage {stage} ({variant}): {} epochs, best epoch {} with validation loss {}, saved to {}",
        log.val_loss.len(),
        log.best_epoch,
        log.val_loss
            .get(log.best_epoch.wrapping_sub(1))
            .map_or("n/a".into(), |x| format!("{x:.4}")),
        path.display()
    ))
}

pub fn cmd_evaluate(run: &Run) -> Result<RetrievalTable, CliError> {
    let ds = run.dataset()?;
    let he = run.stage_checkpoint(1, Variant::HeOnly)?;
    let full = run.stage_checkpoint(1, Variant::Full)?;
    run.snapshot("evaluate")?;
    let tiles = eval_tiles(&he)?;
    if eval_tiles(&full)? != tiles {
        return Err(CliError::usage("the two stage-1 checkpoints use different tile budgets"));
    }
    let table = cross_eval(
        &he.qformer()?,
        &full.qformer()?,
        &ds,
        &ds.split.test,
        tiles,
        &run.config.eval.bootstrap(run.config.seed),
    )?;
    write(&run.dir.join(RETRIEVAL_CSV), &table.to_csv())?;
    write_json(&run.dir.join(RETRIEVAL_JSON), &table)?;
    Ok(table)
}

pub fn format_table(t: &RetrievalTable) -> String {
    let mut out = String::from("direction      training retrieval  R@1    R@5    R@10   mean rank  median rank\n");
    for r in &t.rows {
        out.push_str(&format!(
            "{:<14} {:<8} {:<9} {:.3}  {:.3}  {:.3}  {:>9.2}  {:>11.1}\n",
            r.direction.to_string(),
            r.training.to_string(),
            r.retrieval.to_string(),
            r.recall[0].value,
            r.recall[1].value,
            r.recall[2].value,
            r.mean_rank.value,
            r.median_rank.value
        ));
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HallucinationFile {
    pub he_only: HallucinationReport,
    pub full: HallucinationReport,
}

fn stage2_model(run: &Run, variant: Variant) -> Result<(Stage2Model, usize), CliError> {
    let ck = run.stage_checkpoint(2, variant)?;
    Ok((Stage2Model::from_checkpoint(&ck)?, eval_tiles(&ck)?))
}

pub fn cmd_hallucination(run: &Run) -> Result<HallucinationFile, CliError> {
    let ds = run.dataset()?;
    let (he, he_tiles) = stage2_model(run, Variant::HeOnly)?;
    let (full, full_tiles) = stage2_model(run, Variant::Full)?;
    run.snapshot("hallucination")?;
    let e = &run.config.eval;
    let strategy = e.strategy()?;
    let items = &ds.split.test;
    let file = HallucinationFile {
        he_only: hallucination_report(&he, Variant::HeOnly, &ds, items, he_tiles, e.max_len, strategy)?,
        full: hallucination_report(&full, Variant::Full, &ds, items, full_tiles, e.max_len, strategy)?,
    };
    write_json(&run.dir.join(HALLUCINATION_JSON), &file)?;
    Ok(file)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratedCase {
    pub case_id: String,
    pub training: Variant,
    pub strategy: Strategy,
    pub tokens: Vec<usize>,
    pub text: String,
    pub reference_he_only: String,
    pub reference_full: String,
}

pub fn cmd_generate(run: &Run, case_id: &str, variant: Variant, strategy: Option<Strategy>) -> Result<GeneratedCase, CliError> {
    let ds = run.dataset()?;
    let case = ds
        .case_by_id(case_id)
        .ok_or_else(|| CliError::usage(format!("no case {case_id:?} in the dataset")))?;
    let (model, tiles) = stage2_model(run, variant)?;
    run.snapshot(&format!("generate-{case_id}-{variant}"))?;
    let strategy = match strategy {
        Some(s) => s,
        None => run.config.eval.strategy()?,
    };
    let bag = select_tiles(&case.tiles, tiles, None)?;
    let tokens = generate_report(&model, &bag, run.config.eval.max_len, strategy)?;
    let out = GeneratedCase {
        case_id: case_id.to_string(),
        training: variant,
        strategy,
        text: ds.tokenizer.detokenize(&tokens),
        tokens,
        reference_he_only: case.report_text(Variant::HeOnly),
        reference_full: case.report_text(Variant::Full),
    };
    write_json(&run.dir.join(format!("generated-{case_id}-{variant}.json")), &out)?;
    Ok(out)
}
