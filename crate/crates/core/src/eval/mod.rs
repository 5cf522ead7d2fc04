//! Cross-modal retrieval evaluation and the marker-token hallucination proxy.

pub mod bootstrap;
pub mod hallucination;
pub mod retrieval;

use serde::{Deserialize, Serialize};

pub use bootstrap::{bootstrap_ci, BootstrapConfig};
pub use hallucination::{count_marker_tokens, hallucination_report, HallucinationReport};
pub use retrieval::{rank_stats, ranks, recall_at_k, Direction, SimilarityMatrix};

use crate::corpus::{Dataset, Variant};
use crate::error::{Error, Result};
use crate::objectives::pairwise_similarity;
use crate::qformer::QFormer;
use crate::tensor::{l2_normalize, Tensor};
use crate::trainer::select_tiles;

pub const RECALL_KS: [usize; 3] = [1, 5, 10];

/// L2-normalized image query embeddings `[N, n_queries, d]` and text CLS
/// embeddings `[N, d]` for a list of cases.
#[derive(Clone, Debug, PartialEq)]
pub struct Embeddings {
    pub images: Tensor,
    pub texts: Tensor,
    pub case_ids: Vec<String>,
}

/// Image side only; it does not depend on the report variant.
pub fn embed_images(model: &QFormer, dataset: &Dataset, items: &[usize], max_tiles: usize) -> Result<Tensor> {
    let (nq, d) = (model.config.n_queries, model.config.hidden_dim);
    let mut data = Vec::with_capacity(items.len() * nq * d);
    for &i in items {
        let tiles = select_tiles(&dataset.cases[i].tiles, max_tiles, None)?;
        data.extend_from_slice(l2_normalize(&model.encode_image(&tiles)?)?.data());
    }
    Tensor::from_f64(&[items.len(), nq, d], data)
}

pub fn embed_texts(model: &QFormer, dataset: &Dataset, items: &[usize], variant: Variant) -> Result<Tensor> {
    let d = model.config.hidden_dim;
    let mut data = Vec::with_capacity(items.len() * d);
    for &i in items {
        let ids = dataset.filter_report(&dataset.cases[i], variant);
        if ids.len() < 2 {
            return Err(Error::invalid(format!(
                "case {} has an empty {variant} report",
                dataset.cases[i].case_id
            )));
        }
        let cls = model.encode_text(&ids)?.reshape(&[1, d])?;
        data.extend_from_slice(l2_normalize(&cls)?.data());
    }
    Tensor::from_f64(&[items.len(), d], data)
}

pub fn embed_test_set(
    model: &QFormer,
    dataset: &Dataset,
    items: &[usize],
    variant: Variant,
    max_tiles: usize,
) -> Result<Embeddings> {
    if items.is_empty() {
        return Err(Error::invalid("empty evaluation split"));
    }
    Ok(Embeddings {
        images: embed_images(model, dataset, items, max_tiles)?,
        texts: embed_texts(model, dataset, items, variant)?,
        case_ids: items.iter().map(|&i| dataset.cases[i].case_id.clone()).collect(),
    })
}

pub fn similarity(e: &Embeddings) -> Result<SimilarityMatrix> {
    SimilarityMatrix::new(pairwise_similarity(&e.images, &e.texts)?, e.case_ids.clone())
}

/// Point estimate with its bootstrap interval.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub lo: f64,
    pub hi: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalRow {
    pub direction: Direction,
    pub training: Variant,
    pub retrieval: Variant,
    pub n: usize,
    /// Recall at each of [`RECALL_KS`], with `k` clamped to `n`.
    pub recall: Vec<Estimate>,
    pub mean_rank: Estimate,
    pub median_rank: Estimate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalTable {
    pub bootstrap: BootstrapConfig,
    pub rows: Vec<RetrievalRow>,
}

/// Metrics and intervals for one matrix and direction.
pub fn retrieval_row(
    sim: &SimilarityMatrix,
    dir: Direction,
    training: Variant,
    retrieval: Variant,
    boot: &BootstrapConfig,
) -> Result<RetrievalRow> {
    let n = sim.len();
    if n == 0 {
        return Err(Error::invalid("empty similarity matrix"));
    }
    let r = ranks(sim, dir);
    let all: Vec<usize> = (0..n).collect();
    let est = |f: &dyn Fn(&[usize]) -> f64| -> Result<Estimate> {
        let (lo, hi) = bootstrap_ci(n, f, boot)?;
        Ok(Estimate { value: f(&all), lo, hi })
    };
    let recall = RECALL_KS
        .iter()
        .map(|&k| est(&|s: &[usize]| retrieval::recall_of(&r, s, k.min(n))))
        .collect::<Result<Vec<_>>>()?;
    Ok(RetrievalRow {
        direction: dir,
        training,
        retrieval,
        n,
        recall,
        mean_rank: est(&|s: &[usize]| retrieval::mean_of(&r, s))?,
        median_rank: est(&|s: &[usize]| retrieval::median_of(&r, s))?,
    })
}

/// Both directions × (training variant, retrieval variant) for the two
/// models, in the order he/he, he/full, full/he, full/full per direction.
pub fn cross_eval(
    he_only: &QFormer,
    full: &QFormer,
    dataset: &Dataset,
    items: &[usize],
    max_tiles: usize,
    boot: &BootstrapConfig,
) -> Result<RetrievalTable> {
    let mut sims = Vec::new();
    for (training, model) in [(Variant::HeOnly, he_only), (Variant::Full, full)] {
        let images = embed_images(model, dataset, items, max_tiles)?;
        for retrieval in Variant::BOTH {
            let e = Embeddings {
                images: images.clone(),
                texts: embed_texts(model, dataset, items, retrieval)?,
                case_ids: items.iter().map(|&i| dataset.cases[i].case_id.clone()).collect(),
            };
            sims.push((training, retrieval, similarity(&e)?));
        }
    }
    let mut rows = Vec::new();
    for dir in Direction::BOTH {
        for (training, retrieval, sim) in &sims {
            rows.push(retrieval_row(sim, dir, *training, *retrieval, boot)?);
        }
    }
    Ok(RetrievalTable { bootstrap: *boot, rows })
}

fn csv_header() -> String {
    let mut cols: Vec<String> = ["direction", "training", "retrieval", "n"].map(String::from).to_vec();
    let mut trio = |name: &str| {
        cols.push(name.to_string());
        cols.push(format!("{name}_lo"));
        cols.push(format!("{name}_hi"));
    };
    for k in RECALL_KS {
        trio(&format!("recall_at_{k}"));
    }
    trio("mean_rank");
    trio("median_rank");
    cols.join(",")
}

impl RetrievalTable {
    pub fn to_csv(&self) -> String {
        let mut out = csv_header();
        out.push('\n');
        for r in &self.rows {
            let mut f = vec![
                r.direction.to_string(),
                r.training.to_string(),
                r.retrieval.to_string(),
                r.n.to_string(),
            ];
            for e in r.recall.iter().chain([&r.mean_rank, &r.median_rank]) {
                f.extend([e.value, e.lo, e.hi].map(|x| x.to_string()));
            }
            out.push_str(&f.join(","));
            out.push('\n');
        }
        out
    }

    /// Parses the rows written by [`RetrievalTable::to_csv`]; the bootstrap
    /// settings are not part of the CSV and are taken from `bootstrap`.
    pub fn from_csv(text: &str, bootstrap: BootstrapConfig) -> Result<RetrievalTable> {
        let mut lines = text.lines();
        if lines.next() != Some(csv_header().as_str()) {
            return Err(Error::Format("unexpected retrieval CSV header".into()));
        }
        let width = 4 + 3 * (RECALL_KS.len() + 2);
        let mut rows = Vec::new();
        for line in lines.filter(|l| !l.is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != width {
                return Err(Error::Format(format!("retrieval CSV row has {} fields", f.len())));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| Error::Format(format!("{s:?}: {e}")));
            let mut est = f[4..]
                .chunks(3)
                .map(|c| Ok(Estimate { value: num(c[0])?, lo: num(c[1])?, hi: num(c[2])? }))
                .collect::<Result<Vec<_>>>()?;
            let median_rank = est.pop().expect("width checked");
            let mean_rank = est.pop().expect("width checked");
            rows.push(RetrievalRow {
                direction: Direction::parse(f[0])?,
                training: Variant::parse(f[1])?,
                retrieval: Variant::parse(f[2])?,
                n: f[3].parse().map_err(|e| Error::Format(format!("n: {e}")))?,
                recall: est,
                mean_rank,
                median_rank,
            });
        }
        Ok(RetrievalTable { bootstrap, rows })
    }

    pub fn row(&self, dir: Direction, training: Variant, retrieval: Variant) -> Option<&RetrievalRow> {
        self.rows
            .iter()
            .find(|r| r.direction == dir && r.training == training && r.retrieval == retrieval)
    }
}
