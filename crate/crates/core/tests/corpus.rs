use std::collections::{BTreeMap, BTreeSet};

use qfl_core::corpus::tokenizer::SEP;
use qfl_core::corpus::{generate_corpus, split_patients, CorpusConfig, Dataset, SentenceTag, StubEncoder, Variant, VISIBLE_SLOTS};
use qfl_core::rng;
use rand::Rng as _;

fn thousand() -> Dataset {
    Dataset::generate(&CorpusConfig { n_cases: 1000, ..CorpusConfig::default() }, 11).unwrap()
}

#[test]
fn class_mix_hidden_attributes_and_splits() {
    let d = thousand();
    let n = d.cases.len() as f64;
    let nevi = d.cases.iter().filter(|c| c.lesion_class == 0).count() as f64 / n;
    assert!((nevi - 0.819).abs() < 0.03, "{nevi}");

    // hidden values are drawn independently of the class
    let classes = |nevus: bool| d.cases.iter().filter(move |c| (c.lesion_class == 0) == nevus);
    for slot in 0..d.cases[0].hidden_attributes.len() {
        let freq = |nevus: bool| {
            let mut m = BTreeMap::new();
            let total = classes(nevus).count() as f64;
            for c in classes(nevus) {
                *m.entry(c.hidden_attributes[slot]).or_insert(0.0) += 1.0 / total;
            }
            m
        };
        let (a, b) = (freq(true), freq(false));
        for (k, p) in &a {
            assert!((p - b.get(k).unwrap_or(&0.0)).abs() < 0.12, "slot {slot} value {k}");
        }
    }

    let mut owner = BTreeMap::new();
    for (name, items) in d.split.parts() {
        let frac = items.len() as f64 / n;
        let want = match name { "train" => 0.8, _ => 0.1 };
        assert!((frac - want).abs() <= 0.05, "{name} {frac}");
        for &i in items {
            assert_eq!(*owner.entry(d.cases[i].patient_id.clone()).or_insert(name), name);
        }
    }
    assert!(d.cases.iter().map(|c| &c.patient_id).collect::<BTreeSet<_>>().len() < d.cases.len());
}

#[test]
fn default_corpus_split_is_near_480_60_60() {
    let d = Dataset::generate(&CorpusConfig::default(), 0).unwrap();
    assert_eq!(d.cases.len(), 600);
    for (items, want) in [(&d.split.train, 480.0), (&d.split.val, 60.0), (&d.split.test, 60.0)] {
        assert!((items.len() as f64 - want).abs() <= 0.05 * 600.0, "{} vs {want}", items.len());
    }
}

#[test]
fn tokenizer_round_trips_corpus_sentences() {
    let d = thousand();
    let sentences: Vec<&str> = d.cases.iter().flat_map(|c| c.sentences.iter().map(|s| s.text.as_str())).take(1000).collect();
    assert_eq!(sentences.len(), 1000);
    for s in sentences {
        let ids = d.tokenizer.tokenize(s);
        assert!(ids.iter().all(|&i| i != qfl_core::corpus::tokenizer::UNK), "{s}");
        assert_eq!(d.tokenizer.detokenize(&ids), s);
    }
    assert!(d.tokenizer.tokenize("").is_empty());
}

#[test]
fn report_variants_and_markers() {
    let d = thousand();
    let mut mixed = 0;
    for c in &d.cases {
        let he = d.filter_report(c, Variant::HeOnly);
        let full = d.filter_report(c, Variant::Full);
        assert!(he.iter().all(|i| !d.marker_ids.contains(i)));
        if c.sentences.iter().all(|s| s.tag == SentenceTag::He) {
            assert_eq!(he, full);
        } else {
            mixed += 1;
            assert!(he.len() < full.len());
            assert!(full.iter().any(|i| d.marker_ids.contains(i)));
        }
        assert_eq!(he.iter().filter(|&&i| i == SEP).count() + 1, c.report(Variant::HeOnly).count());
    }
    assert!(mixed > 0);
}

#[test]
fn visible_attributes_separate_features() {
    let enc = StubEncoder::new(64, 9).unwrap();
    let mut r = rng::rng_for(1, "separation");
    for p in 0..100 {
        let a: Vec<usize> = VISIBLE_SLOTS.iter().map(|s| r.random_range(0..s.values.len())).collect();
        let slot = r.random_range(0..VISIBLE_SLOTS.len());
        let mut b = a.clone();
        b[slot] = (a[slot] + 1 + r.random_range(0..VISIBLE_SLOTS[slot].values.len() - 1)) % VISIBLE_SLOTS[slot].values.len();
        let key = format!("case{p}");
        let (x, y) = (enc.encode(&a, &key, 0).unwrap(), enc.encode(&b, &key, 0).unwrap());
        let dist = x.iter().zip(&y).map(|(u, v)| (u - v).powi(2)).sum::<f64>().sqrt();
        assert!(dist > 5.0 * qfl_core::corpus::encoder::NOISE_STD, "pair {p}: {dist}");
        assert_eq!(x, enc.encode(&a, &key, 0).unwrap());
    }
}

#[test]
fn generation_is_seeded() {
    let cfg = CorpusConfig { n_cases: 1, ..CorpusConfig::default() };
    assert_eq!(generate_corpus(&cfg, 4).unwrap(), generate_corpus(&cfg, 4).unwrap());
    let cases = generate_corpus(&CorpusConfig { n_cases: 30, ..CorpusConfig::default() }, 4).unwrap();
    assert_eq!(split_patients(&cases, [0.8, 0.1, 0.1], 2).unwrap(), split_patients(&cases, [0.8, 0.1, 0.1], 2).unwrap());
}
