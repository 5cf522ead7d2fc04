//! Sectioned TOML run configuration with flag and environment overrides.

use std::path::{Path, PathBuf};

use qfl_core::corpus::CorpusConfig;
use qfl_core::eval::BootstrapConfig;
use qfl_core::qformer::QFormerConfig;
use qfl_core::trainer::{LmConfig, LmTrainConfig, Strategy, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

pub const SEED_ENV: &str = "QFL_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// Parent of the timestamped run directories.
    pub runs_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            runs_dir: PathBuf::from("runs"),
        }
    }
}

/// Q-Former sizes; query count, feature width and vocabulary come from the
/// stage config and the dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_blocks: usize,
    pub hidden_dim: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub max_text_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_blocks: 2,
            hidden_dim: 64,
            n_heads: 4,
            ffn_dim: 128,
            max_text_len: 64,
        }
    }
}

impl ModelConfig {
    pub fn qformer_base(&self) -> QFormerConfig {
        QFormerConfig {
            n_blocks: self.n_blocks,
            hidden_dim: self.hidden_dim,
            n_heads: self.n_heads,
            ffn_dim: self.ffn_dim,
            max_text_len: self.max_text_len,
            ..QFormerConfig::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmSection {
    pub n_layers: usize,
    pub dim: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub max_len: usize,
}

impl Default for LmSection {
    fn default() -> Self {
        let d = LmConfig::default();
        LmSection {
            n_layers: d.n_layers,
            dim: d.dim,
            n_heads: d.n_heads,
            ffn_dim: d.ffn_dim,
            max_len: d.max_len,
        }
    }
}

impl LmSection {
    pub fn lm_config(&self, vocab_size: usize) -> LmConfig {
        LmConfig {
            n_layers: self.n_layers,
            dim: self.dim,
            n_heads: self.n_heads,
            ffn_dim: self.ffn_dim,
            vocab_size,
            max_len: self.max_len,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub bootstrap_replicates: usize,
    pub level: f64,
    /// Longest generated report, in tokens.
    pub max_len: usize,
    /// `greedy`, `beam` or `beam:<width>`.
    pub strategy: String,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            bootstrap_replicates: 1000,
            level: 0.95,
            max_len: 60,
            strategy: "greedy".into(),
        }
    }
}

impl EvalConfig {
    pub fn strategy(&self) -> Result<Strategy, CliError> {
        Ok(Strategy::parse(&self.strategy)?)
    }

    pub fn bootstrap(&self, seed: u64) -> BootstrapConfig {
        BootstrapConfig {
            replicates: self.bootstrap_replicates,
            level: self.level,
            seed: qfl_core::rng::derive_seed(seed, "eval/bootstrap"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: PathsConfig,
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub lm: LmSection,
    pub lm_train: LmTrainConfig,
    pub stage1: TrainConfig,
    pub stage2: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            paths: PathsConfig::default(),
            corpus: CorpusConfig::default(),
            model: ModelConfig::default(),
            lm: LmSection::default(),
            lm_train: LmTrainConfig::default(),
            stage1: TrainConfig {
                epochs: 20,
                peak_lr: 1e-3,
                warmup_steps: 50,
                max_tiles_per_case: 64,
                ..TrainConfig::stage1()
            },
            stage2: TrainConfig {
                epochs: 10,
                warmup_steps: 20,
                max_tiles_per_case: 64,
                ..TrainConfig::stage2()
            },
            eval: EvalConfig::default(),
        }
    }
}

const SEEDED_SECTIONS: [&str; 3] = ["lm_train", "stage1", "stage2"];

fn parse_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Overlays `top` onto `base`, recursing into sections present in both.
fn merge(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Sets `path` (dot-separated) in a TOML table, creating sections as needed.
pub fn set_path(table: &mut toml::Table, path: &str, value: toml::Value) -> Result<(), CliError> {
    let mut parts: Vec<&str> = path.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| CliError::usage(format!("bad key {path:?}")))?;
    let mut t = table;
    for p in parts {
        let entry = t
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        t = entry
            .as_table_mut()
            .ok_or_else(|| CliError::usage(format!("{p:?} in {path:?} is not a section")))?;
    }
    t.insert(last.to_string(), value);
    Ok(())
}

impl RunConfig {
    /// Built-in defaults < file < `QFL_SEED` < `--set key=value` flags.
    /// The global `seed` drives every section; a section-level seed that
    /// differs from it is rejected.
    pub fn resolve(file: Option<&Path>, sets: &[String], env_seed: Option<&str>) -> Result<RunConfig, CliError> {
        let user: toml::Table = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", p.display())))?;
                toml::from_str(&text).map_err(|e| CliError::usage(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        let mut table = match toml::Value::try_from(RunConfig::default()).expect("defaults serialize") {
            toml::Value::Table(t) => t,
            _ => unreachable!("struct serializes to a table"),
        };
        for sec in SEEDED_SECTIONS {
            if let Some(t) = table.get_mut(sec).and_then(toml::Value::as_table_mut) {
                t.remove("seed");
            }
        }
        merge(&mut table, user);
        if let Some(s) = env_seed {
            let seed: u64 = s
                .trim()
                .parse()
                .map_err(|_| CliError::usage(format!("{SEED_ENV}={s:?} is not an unsigned integer")))?;
            table.insert("seed".into(), toml::Value::Integer(seed as i64));
        }
        for s in sets {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| CliError::usage(format!("--set expects key=value, got {s:?}")))?;
            set_path(&mut table, k.trim(), parse_value(v.trim()))?;
        }
        let global = table.get("seed").cloned().unwrap_or(toml::Value::Integer(0));
        for sec in SEEDED_SECTIONS {
            if table.get(sec).and_then(|t| t.get("seed")).is_some_and(|s| *s != global) {
                return Err(CliError::usage(format!("{sec}.seed must match the top-level seed")));
            }
        }
        let mut cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::usage(format!("config: {e}")))?;
        cfg.lm_train.seed = cfg.seed;
        cfg.stage1.seed = cfg.seed;
        cfg.stage2.seed = cfg.seed;
        cfg.stage1.stage = 1;
        cfg.stage2.stage = 2;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.corpus.validate()?;
        self.model.qformer_base().validate()?;
        self.lm.lm_config(8).validate()?;
        self.stage1.validate()?;
        self.stage2.validate()?;
        self.eval.strategy()?;
        if self.eval.max_len == 0 || self.eval.bootstrap_replicates == 0 {
            return Err(CliError::usage("eval.max_len and eval.bootstrap_replicates must be positive"));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// First 8 hex digits of the SHA-256 of the resolved config.
    pub fn hash8(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))[..8].to_string()
    }
}
