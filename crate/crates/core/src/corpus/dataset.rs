//! Splits, tokenized views and the on-disk dataset layout.
//!
//! ```text
//! <dir>/dataset.json   counts, config, seed, marker ids
//! <dir>/vocab.json     id-ordered token list
//! <dir>/{train,val,test}.jsonl
//! <dir>/features.qfl   one float32 record [total_tiles, feature_dim]
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::templates;
use super::tokenizer::{self, Tokenizer};
use super::{class_name, generate_corpus, parse_class_name, Case, CorpusConfig, Sentence, Variant};
use crate::container::{canonical_json, read_container, write_container};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{DType, Tensor};

/// Case indices per split, each ascending.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    pub fn parts(&self) -> [(&'static str, &[usize]); 3] {
        [("train", &self.train), ("val", &self.val), ("test", &self.test)]
    }
}

/// Shuffles the distinct patients and cuts the list at the cumulative ratios
/// (rounded patient counts). Every split receives at least one patient.
pub fn split_patients(cases: &[Case], ratios: [f64; 3], seed: u64) -> Result<Split> {
    if ratios.iter().any(|r| *r < 0.0) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::config("split ratios must be non-negative and sum to 1"));
    }
    let patients: Vec<&str> = cases
        .iter()
        .map(|c| c.patient_id.as_str())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let p = patients.len();
    if p < 3 {
        return Err(Error::invalid(format!("{p} patients cannot fill three splits")));
    }
    let mut order = patients.clone();
    order.shuffle(&mut rng::rng_for(seed, "split"));
    let cut1 = ((p as f64 * ratios[0]).round() as usize).clamp(1, p - 2);
    let cut2 = ((p as f64 * (ratios[0] + ratios[1])).round() as usize).clamp(cut1 + 1, p - 1);
    let which: BTreeMap<&str, usize> = order
        .iter()
        .enumerate()
        .map(|(i, pid)| (*pid, usize::from(i >= cut1) + usize::from(i >= cut2)))
        .collect();
    let mut split = Split::default();
    for (i, c) in cases.iter().enumerate() {
        match which[c.patient_id.as_str()] {
            0 => split.train.push(i),
            1 => split.val.push(i),
            _ => split.test.push(i),
        }
    }
    Ok(split)
}

/// A generated corpus together with its split and tokenizer.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: CorpusConfig,
    pub seed: u64,
    pub cases: Vec<Case>,
    pub split: Split,
    pub tokenizer: Tokenizer,
    pub marker_ids: BTreeSet<usize>,
}

#[derive(Serialize, Deserialize)]
struct CaseRecord {
    index: usize,
    patient_id: String,
    case_id: String,
    lesion_class: String,
    visible_attributes: Vec<usize>,
    hidden_attributes: Vec<usize>,
    sentences: Vec<Sentence>,
    tokens_full: Vec<usize>,
    tokens_he_only: Vec<usize>,
    slide_tile_counts: Vec<usize>,
    tile_count: usize,
    feature_offset: usize,
}

impl Dataset {
    pub fn generate(config: &CorpusConfig, seed: u64) -> Result<Dataset> {
        let cases = generate_corpus(config, seed)?;
        let split = split_patients(&cases, config.split_ratios, seed)?;
        let tokenizer = Tokenizer::build(
            split
                .train
                .iter()
                .flat_map(|&i| cases[i].sentences.iter().map(|s| s.text.as_str())),
        );
        let marker_ids = tokenizer.marker_ids(&templates::marker_words());
        Ok(Dataset {
            config: config.clone(),
            seed,
            cases,
            split,
            tokenizer,
            marker_ids,
        })
    }

    /// `CLS` followed by the variant's sentences separated by `SEP`.
    pub fn filter_report(&self, case: &Case, variant: Variant) -> Vec<usize> {
        let mut ids = vec![tokenizer::CLS];
        ids.extend(self.tokenizer.tokenize(&case.report_text(variant)));
        ids
    }

    /// Report words without `CLS`, used as generation targets.
    pub fn report_words(&self, case: &Case, variant: Variant) -> Vec<usize> {
        self.tokenizer.tokenize(&case.report_text(variant))
    }

    pub fn cases_in(&self, indices: &[usize]) -> Vec<&Case> {
        indices.iter().map(|&i| &self.cases[i]).collect()
    }

    pub fn case_by_id(&self, case_id: &str) -> Option<&Case> {
        self.cases.iter().find(|c| c.case_id == case_id)
    }

    /// Longest `filter_report` output over all cases and variants.
    pub fn max_report_len(&self) -> usize {
        self.cases
            .iter()
            .map(|c| self.filter_report(c, Variant::Full).len())
            .max()
            .unwrap_or(1)
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut offsets = Vec::with_capacity(self.cases.len());
        let mut off = 0;
        for c in &self.cases {
            offsets.push(off);
            off += c.n_tiles();
        }
        let total = off;
        for (name, idx) in self.split.parts() {
            let mut w = BufWriter::new(fs::File::create(dir.join(format!("{name}.jsonl")))?);
            for &i in idx {
                let c = &self.cases[i];
                let rec = CaseRecord {
                    index: i,
                    patient_id: c.patient_id.clone(),
                    case_id: c.case_id.clone(),
                    lesion_class: class_name(c.lesion_class),
                    visible_attributes: c.visible_attributes.clone(),
                    hidden_attributes: c.hidden_attributes.clone(),
                    sentences: c.sentences.clone(),
                    tokens_full: self.filter_report(c, Variant::Full),
                    tokens_he_only: self.filter_report(c, Variant::HeOnly),
                    slide_tile_counts: c.slide_tile_counts.clone(),
                    tile_count: c.n_tiles(),
                    feature_offset: offsets[i],
                };
                writeln!(w, "{}", canonical_json(&rec)?)?;
            }
            w.flush()?;
        }
        fs::write(
            dir.join("vocab.json"),
            canonical_json(&self.tokenizer.tokens())? + "\n",
        )?;
        let meta = json!({
            "config": self.config,
            "seed": self.seed,
            "n_cases": self.cases.len(),
            "n_patients": self.cases.iter().map(|c| &c.patient_id).collect::<BTreeSet<_>>().len(),
            "split_cases": {
                "train": self.split.train.len(),
                "val": self.split.val.len(),
                "test": self.split.test.len(),
            },
            "feature_dim": self.config.feature_dim,
            "total_tiles": total,
            "vocab_size": self.tokenizer.vocab_size(),
            "marker_ids": self.marker_ids,
        });
        fs::write(dir.join("dataset.json"), canonical_json(&meta)? + "\n")?;

        let mut data = Vec::with_capacity(total * self.config.feature_dim);
        for c in &self.cases {
            data.extend_from_slice(c.tiles.data());
        }
        let features = Tensor::new(vec![total, self.config.feature_dim], DType::Float32, data)?;
        let header = json!({"kind": "tile_features", "total_tiles": total, "feature_dim": self.config.feature_dim});
        let w = BufWriter::new(fs::File::create(dir.join("features.qfl"))?);
        write_container(w, &header, &[("features", &features)])
    }

    pub fn exists(dir: &Path) -> bool {
        dir.join("dataset.json").exists()
    }

    pub fn load(dir: &Path) -> Result<Dataset> {
        let meta: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("dataset.json"))?)?;
        let config: CorpusConfig = serde_json::from_value(meta["config"].clone())?;
        let seed = meta["seed"]
            .as_u64()
            .ok_or_else(|| Error::Format("dataset.json: seed".into()))?;
        let tokens: Vec<String> = serde_json::from_str(&fs::read_to_string(dir.join("vocab.json"))?)?;
        let tokenizer = Tokenizer::from_tokens(tokens)?;
        let (_, records) = read_container(BufReader::new(fs::File::open(dir.join("features.qfl"))?))?;
        let features = records
            .into_iter()
            .find(|(n, _)| n == "features")
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Format("features.qfl lacks a features record".into()))?;
        let dim = features.cols();

        let mut slots: Vec<Option<Case>> = Vec::new();
        let mut split = Split::default();
        for (name, target) in [("train", 0), ("val", 1), ("test", 2)] {
            let f = BufReader::new(fs::File::open(dir.join(format!("{name}.jsonl")))?);
            for line in f.lines() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let r: CaseRecord = serde_json::from_str(&line)?;
                if r.feature_offset + r.tile_count > features.rows() || r.tile_count == 0 {
                    return Err(Error::Format(format!("{}: feature rows out of range", r.case_id)));
                }
                let start = r.feature_offset * dim;
                let tiles = Tensor::new(
                    vec![r.tile_count, dim],
                    DType::Float32,
                    features.data()[start..start + r.tile_count * dim].to_vec(),
                )?;
                if slots.len() <= r.index {
                    slots.resize(r.index + 1, None);
                }
                [&mut split.train, &mut split.val, &mut split.test][target].push(r.index);
                slots[r.index] = Some(Case {
                    patient_id: r.patient_id,
                    case_id: r.case_id,
                    lesion_class: parse_class_name(&r.lesion_class)?,
                    visible_attributes: r.visible_attributes,
                    hidden_attributes: r.hidden_attributes,
                    slide_tile_counts: r.slide_tile_counts,
                    tiles,
                    sentences: r.sentences,
                });
            }
        }
        let cases = slots
            .into_iter()
            .enumerate()
            .map(|(i, c)| c.ok_or_else(|| Error::Format(format!("case index {i} missing"))))
            .collect::<Result<Vec<_>>>()?;
        let marker_ids = tokenizer.marker_ids(&templates::marker_words());
        Ok(Dataset {
            config,
            seed,
            cases,
            split,
            tokenizer,
            marker_ids,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ten_single_case_patients_split_8_1_1() {
        let cfg = CorpusConfig {
            n_cases: 10,
            patient_reuse: 0.0,
            ..CorpusConfig::default()
        };
        let cases = generate_corpus(&cfg, 4).unwrap();
        let s = split_patients(&cases, [0.8, 0.1, 0.1], 4).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (8, 1, 1));
    }

    #[test]
    fn too_few_patients() {
        let cfg = CorpusConfig {
            n_cases: 2,
            patient_reuse: 0.0,
            ..CorpusConfig::default()
        };
        let cases = generate_corpus(&cfg, 4).unwrap();
        assert!(split_patients(&cases, [0.8, 0.1, 0.1], 4).is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let cfg = CorpusConfig {
            n_cases: 12,
            ..CorpusConfig::default()
        };
        let d = Dataset::generate(&cfg, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        d.save(dir.path()).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back, d);
    }
}
