//! Checkpoints: parameters, optimizer moments and a JSON header in one
//! `QFL1` container.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::lm::{LmConfig, StubLm};
use super::optim::OptimizerState;
use crate::container::{read_container, write_container, Records};
use crate::corpus::Variant;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::qformer::{QFormer, QFormerConfig};
use crate::rng::{self, RngState};
use crate::tensor::{DType, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    /// `"stage1"`, `"stage2"` or `"lm"`.
    pub kind: String,
    pub variant: Option<Variant>,
    pub train_config: serde_json::Value,
    pub qformer_config: Option<QFormerConfig>,
    pub lm_config: Option<LmConfig>,
    /// Epoch whose parameters are stored (0 = initialization).
    pub epoch: usize,
    pub epochs_run: usize,
    pub train_loss_history: Vec<f64>,
    pub val_loss_history: Vec<f64>,
    pub lr_trace: Vec<f64>,
    pub optimizer_step: u64,
    pub rng_state: RngState,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: Records,
    pub optimizer: OptimizerState,
}

fn shapes_of(params: &Records) -> BTreeMap<String, Vec<usize>> {
    params
        .iter()
        .map(|(n, t)| (n.clone(), t.shape().to_vec()))
        .collect()
}

impl Checkpoint {
    pub fn params_of(stores: &[&ParamStore]) -> Records {
        stores
            .iter()
            .flat_map(|s| s.records())
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let header = serde_json::to_value(&self.header)?;
        let opt = self.optimizer.records(&shapes_of(&self.params))?;
        let records: Vec<(&str, &Tensor)> = self
            .params
            .iter()
            .chain(opt.iter())
            .map(|(n, t)| (n.as_str(), t))
            .collect();
        let w = BufWriter::new(fs::File::create(path)?);
        write_container(w, &header, &records)
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let f = fs::File::open(path).map_err(|e| {
            Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
        })?;
        let (header, records) = read_container(BufReader::new(f))?;
        let header: CheckpointHeader = serde_json::from_value(header)?;
        let (opt, params): (Records, Records) = records
            .into_iter()
            .partition(|(n, _)| n.starts_with("opt."));
        let optimizer = OptimizerState::from_records(header.optimizer_step, &opt)?;
        Ok(Checkpoint {
            header,
            params,
            optimizer,
        })
    }

    pub fn rng(&self) -> Result<rng::Rng> {
        self.header
            .rng_state
            .restore()
            .ok_or_else(|| Error::Format("unreadable rng state".into()))
    }

    fn has(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Rebuilds the Q-Former stored in this checkpoint.
    pub fn qformer(&self) -> Result<QFormer> {
        let cfg = self
            .header
            .qformer_config
            .clone()
            .ok_or_else(|| Error::Format("checkpoint has no Q-Former".into()))?;
        let mut scratch = rng::rng_from(0);
        let mut q = QFormer::new(cfg, DType::Float32, &mut scratch)?;
        if let Some(w) = self.has("qformer.stage2_projection.w") {
            q.attach_projection(w.shape()[1], &mut scratch);
        }
        let loaded = q.store.load_records(&self.params)?;
        if loaded != q.store.len() {
            return Err(Error::Format(format!(
                "checkpoint provides {loaded} of {} Q-Former arrays",
                q.store.len()
            )));
        }
        Ok(q)
    }

    /// Rebuilds the language model stored in this checkpoint.
    pub fn lm(&self) -> Result<StubLm> {
        let cfg = self
            .header
            .lm_config
            .clone()
            .ok_or_else(|| Error::Format("checkpoint has no language model".into()))?;
        let mut lm = StubLm::new(cfg, DType::Float32, &mut rng::rng_from(0))?;
        let loaded = lm.store.load_records(&self.params)?;
        if loaded != lm.store.len() {
            return Err(Error::Format(format!(
                "checkpoint provides {loaded} of {} language-model arrays",
                lm.store.len()
            )));
        }
        Ok(lm)
    }
}
