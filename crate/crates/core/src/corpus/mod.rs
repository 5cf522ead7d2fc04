//! Synthetic lesion corpus: slides, tile features, tagged reports and
//! patient-level splits.

pub mod dataset;
pub mod encoder;
pub mod templates;
pub mod tessellate;
pub mod tokenizer;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, derive_index_seed, derive_seed, Rng};
use crate::tensor::Tensor;

pub use dataset::{split_patients, Dataset, Split};
pub use encoder::StubEncoder;
pub use templates::{SentenceTag, HIDDEN_SLOTS, VISIBLE_SLOTS};
pub use tessellate::{tessellate, TessellationSpec, TileCoord};
pub use tokenizer::Tokenizer;

/// Which sentences of a report feed the text side.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    HeOnly,
}

impl Variant {
    pub const BOTH: [Variant; 2] = [Variant::HeOnly, Variant::Full];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::HeOnly => "he_only",
        }
    }

    pub fn parse(s: &str) -> Result<Variant> {
        match s {
            "full" => Ok(Variant::Full),
            "he_only" | "he-only" => Ok(Variant::HeOnly),
            other => Err(Error::invalid(format!("unknown report variant {other:?}"))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    pub tag: SentenceTag,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Case {
    pub patient_id: String,
    pub case_id: String,
    /// 0 is the common nevus; `k > 0` is `other_k`.
    pub lesion_class: usize,
    pub visible_attributes: Vec<usize>,
    pub hidden_attributes: Vec<usize>,
    pub slide_tile_counts: Vec<usize>,
    pub tiles: Tensor,
    /// The full report; H&E sentences precede the others.
    pub sentences: Vec<Sentence>,
}

pub fn class_name(class: usize) -> String {
    if class == 0 {
        "common_nevus".into()
    } else {
        format!("other_{class}")
    }
}

pub fn parse_class_name(s: &str) -> Result<usize> {
    if s == "common_nevus" {
        return Ok(0);
    }
    s.strip_prefix("other_")
        .and_then(|k| k.parse::<usize>().ok())
        .filter(|&k| k > 0)
        .ok_or_else(|| Error::Format(format!("unknown lesion class {s:?}")))
}

impl Case {
    pub fn n_tiles(&self) -> usize {
        self.tiles.rows()
    }

    pub fn report(&self, variant: Variant) -> impl Iterator<Item = &Sentence> {
        self.sentences
            .iter()
            .filter(move |s| variant == Variant::Full || s.tag == SentenceTag::He)
    }

    /// Sentences joined by the separator word.
    pub fn report_text(&self, variant: Variant) -> String {
        self.report(variant)
            .map(|s| s.text.as_str())
            .collect::<Vec<_>>()
            .join(&format!(" {} ", tokenizer::SEP_WORD))
    }

    pub fn is_usable(&self) -> bool {
        self.report(Variant::HeOnly).next().is_some() && self.n_tiles() > 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub n_cases: usize,
    /// Probability of each lesion class; index 0 is the common nevus.
    pub class_mix: Vec<f64>,
    pub feature_dim: usize,
    pub tiles_per_side: usize,
    pub tile_px: usize,
    pub coverage_threshold: f64,
    pub max_slides: usize,
    pub patient_reuse: f64,
    pub he_mention_prob: f64,
    pub noise_std: f64,
    pub split_ratios: [f64; 3],
}

impl Default for CorpusConfig {
    fn default() -> Self {
        let other = (1.0 - 0.819) / 3.0;
        CorpusConfig {
            n_cases: 600,
            class_mix: vec![0.819, other, other, other],
            feature_dim: 64,
            tiles_per_side: 8,
            tile_px: 8,
            coverage_threshold: 0.05,
            max_slides: 3,
            patient_reuse: 0.2,
            he_mention_prob: 0.55,
            noise_std: encoder::NOISE_STD,
            split_ratios: [0.8, 0.1, 0.1],
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_cases == 0 {
            return Err(Error::config("n_cases must be at least 1"));
        }
        if self.class_mix.len() < 2
            || self.class_mix.iter().any(|p| !(p.is_finite() && *p >= 0.0))
            || (self.class_mix.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return Err(Error::config(
                "class_mix needs at least two non-negative entries summing to 1",
            ));
        }
        if !(0.0..=1.0).contains(&self.patient_reuse) || !(0.0..=1.0).contains(&self.he_mention_prob)
        {
            return Err(Error::config("probabilities must lie in [0, 1]"));
        }
        if self.max_slides == 0 || self.tiles_per_side == 0 || self.tile_px == 0 {
            return Err(Error::config("slide geometry must be positive"));
        }
        if !(self.coverage_threshold > 0.0 && self.coverage_threshold <= 1.0) {
            return Err(Error::config("coverage_threshold must lie in (0, 1]"));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::config("noise_std must be non-negative"));
        }
        let r = &self.split_ratios;
        if r.iter().any(|x| *x < 0.0) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::config("split_ratios must be non-negative and sum to 1"));
        }
        Ok(())
    }
}

/// Per-class weights over each visible slot's values: nevi lean towards
/// regular, mature, low-atypia morphology; the other classes the reverse.
fn visible_weights(class: usize, slot: usize) -> &'static [f64] {
    const NEVUS: [&[f64]; 6] = [
        &[0.35, 0.3, 0.3, 0.05],
        &[0.6, 0.15, 0.15, 0.1],
        &[0.5, 0.35, 0.1, 0.05],
        &[0.4, 0.35, 0.25],
        &[0.8, 0.2],
        &[0.85, 0.15],
    ];
    const OTHER: [&[f64]; 6] = [
        &[0.3, 0.25, 0.15, 0.3],
        &[0.15, 0.35, 0.3, 0.2],
        &[0.1, 0.2, 0.4, 0.3],
        &[0.3, 0.35, 0.35],
        &[0.55, 0.45],
        &[0.35, 0.65],
    ];
    if class == 0 {
        NEVUS[slot]
    } else {
        OTHER[slot]
    }
}

/// Distribution of the number of hidden-attribute sentences per report.
fn hidden_count_weights(class: usize) -> &'static [f64] {
    if class == 0 {
        &[0.1, 0.5, 0.3, 0.1]
    } else {
        &[0.0, 0.1, 0.3, 0.4, 0.2]
    }
}

fn draw(rng: &mut Rng, weights: &[f64]) -> usize {
    WeightedIndex::new(weights)
        .expect("static weights are valid")
        .sample(rng)
}

/// Everything about one case except its identifiers.
struct Draft {
    lesion_class: usize,
    visible: Vec<usize>,
    hidden: Vec<usize>,
    slide_tile_counts: Vec<usize>,
    sentences: Vec<Sentence>,
}

fn draft_case(config: &CorpusConfig, class_dist: &WeightedIndex<f64>, rng: &mut Rng) -> Draft {
    let lesion_class = class_dist.sample(rng);
    let visible: Vec<usize> = (0..VISIBLE_SLOTS.len())
        .map(|s| draw(rng, visible_weights(lesion_class, s)))
        .collect();
    let hidden: Vec<usize> = HIDDEN_SLOTS
        .iter()
        .map(|s| rng.random_range(0..s.values.len()))
        .collect();

    let mut sentences = Vec::new();
    for (slot, &v) in VISIBLE_SLOTS.iter().zip(&visible) {
        if rng.random_bool(config.he_mention_prob) {
            sentences.push(Sentence {
                tag: SentenceTag::He,
                text: slot.render(v),
            });
        }
    }
    let n_hidden = draw(rng, hidden_count_weights(lesion_class)).min(HIDDEN_SLOTS.len());
    let mut chosen = rand::seq::index::sample(rng, HIDDEN_SLOTS.len(), n_hidden).into_vec();
    chosen.sort_unstable();
    for s in chosen {
        sentences.push(Sentence {
            tag: SentenceTag::NonHe,
            text: HIDDEN_SLOTS[s].render(hidden[s]),
        });
    }

    let n_slides = rng.random_range(1..=config.max_slides);
    let slide_tile_counts = (0..n_slides)
        .map(|_| {
            let spec = tessellate::synthetic_slide(
                rng,
                config.tiles_per_side,
                config.tile_px,
                config.coverage_threshold,
            );
            tessellate(&spec).expect("synthetic slides are well-formed").len()
        })
        .collect();
    Draft {
        lesion_class,
        visible,
        hidden,
        slide_tile_counts,
        sentences,
    }
}

/// Generates `config.n_cases` usable cases. Candidates whose H&E-only report
/// or tile bag would be empty are discarded and generation continues.
pub fn generate_corpus(config: &CorpusConfig, seed: u64) -> Result<Vec<Case>> {
    config.validate()?;
    let class_dist = WeightedIndex::new(&config.class_mix)
        .map_err(|e| Error::config(format!("class_mix: {e}")))?;
    let encoder = StubEncoder::with_noise(
        config.feature_dim,
        derive_seed(seed, "corpus/encoder"),
        config.noise_std,
    )?;
    let case_root = derive_seed(seed, "corpus/case");
    let mut drafts = Vec::with_capacity(config.n_cases);
    let max_attempts = config.n_cases * 4 + 100;
    let mut attempt = 0u64;
    while drafts.len() < config.n_cases {
        if attempt as usize >= max_attempts {
            return Err(Error::invalid(
                "too many candidate cases had an empty report or tile bag",
            ));
        }
        let mut rng = rng::rng_from(derive_index_seed(case_root, attempt));
        attempt += 1;
        let d = draft_case(config, &class_dist, &mut rng);
        let has_he = d.sentences.iter().any(|s| s.tag == SentenceTag::He);
        if has_he && d.slide_tile_counts.iter().sum::<usize>() > 0 {
            drafts.push(d);
        }
    }

    let patients = assign_patients(drafts.len(), config.patient_reuse, seed);
    drafts
        .into_iter()
        .zip(patients)
        .enumerate()
        .map(|(i, (d, p))| {
            let case_id = format!("case-{i:05}");
            let n_tiles: usize = d.slide_tile_counts.iter().sum();
            let tiles = encoder.encode_bag(&d.visible, &case_id, n_tiles)?;
            Ok(Case {
                patient_id: format!("patient-{p:05}"),
                case_id,
                lesion_class: d.lesion_class,
                visible_attributes: d.visible,
                hidden_attributes: d.hidden,
                slide_tile_counts: d.slide_tile_counts,
                tiles,
                sentences: d.sentences,
            })
        })
        .collect()
}

/// Sequential patient assignment: each case reuses a uniformly chosen earlier
/// patient with probability `reuse`, otherwise opens a new one.
fn assign_patients(n: usize, reuse: f64, seed: u64) -> Vec<usize> {
    let mut rng = rng::rng_for(seed, "corpus/patients");
    let mut next = 0;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        if next > 0 && rng.random_bool(reuse) {
            out.push(rng.random_range(0..next));
        } else {
            out.push(next);
            next += 1;
        }
    }
    out
}
