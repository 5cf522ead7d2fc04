//! Report decoding from a stage-2 model.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use super::stage2::Stage2Model;
use crate::corpus::tokenizer::{BOS, EOS};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Graph, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Greedy,
    Beam(usize),
}

impl Strategy {
    /// `greedy`, `beam` (width 4) or `beam:<width>`.
    pub fn parse(s: &str) -> Result<Strategy> {
        match s {
            "greedy" => Ok(Strategy::Greedy),
            "beam" => Ok(Strategy::Beam(4)),
            _ => match s.strip_prefix("beam:").map(str::parse::<usize>) {
                Some(Ok(w)) if w >= 1 => Ok(Strategy::Beam(w)),
                _ => Err(Error::config(format!("unknown decoding strategy {s:?}"))),
            },
        }
    }
}

struct Decoder<'a> {
    model: &'a Stage2Model,
    lm_store: ParamStore,
    prefix: Tensor,
}

impl<'a> Decoder<'a> {
    fn new(model: &'a Stage2Model, tiles: &Tensor) -> Result<Self> {
        let mut q_store = model.qformer.store.clone();
        q_store.set_all_trainable(false);
        let mut lm_store = model.lm.store.clone();
        lm_store.set_all_trainable(false);
        let mut g = Graph::new();
        let qvars = q_store.bind(&mut g);
        let t = g.constant(tiles.clone());
        let p = model.prefix(&mut g, &qvars, t)?;
        let prefix = g.tensor(p);
        Ok(Decoder {
            model,
            lm_store,
            prefix,
        })
    }

    /// Log-probabilities of the token following `ids`.
    fn next_logp(&self, ids: &[usize]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let vars = self.lm_store.bind(&mut g);
        let p = g.constant(self.prefix.clone());
        let logits = self.model.lm.forward(&mut g, &vars, Some(p), ids)?;
        let lp = g.log_softmax_rows(logits);
        let t = g.tensor(lp);
        Ok(t.row(ids.len() - 1).to_vec())
    }
}

/// Highest value, lowest index on ties.
fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug)]
struct Hyp {
    tokens: Vec<usize>,
    score: f64,
    done: bool,
}

/// Decodes up to `max_len` tokens after `BOS`, conditioned on the projected
/// query outputs for `tiles`. The returned sequence ends with `EOS` when the
/// model emitted it.
pub fn generate_report(model: &Stage2Model, tiles: &Tensor, max_len: usize, strategy: Strategy) -> Result<Vec<usize>> {
    if max_len == 0 {
        return Err(Error::invalid("max_len must be at least 1"));
    }
    let max_len = max_len.min(model.lm.config.max_len);
    let dec = Decoder::new(model, tiles)?;
    match strategy {
        Strategy::Greedy => {
            let mut ids = vec![BOS];
            while ids.len() <= max_len {
                let next = argmax(&dec.next_logp(&ids)?);
                ids.push(next);
                if next == EOS {
                    break;
                }
            }
            Ok(ids.split_off(1))
        }
        Strategy::Beam(width) => beam(&dec, max_len, width.max(1)),
    }
}

fn beam(dec: &Decoder<'_>, max_len: usize, width: usize) -> Result<Vec<usize>> {
    let mut beams = vec![Hyp {
        tokens: vec![BOS],
        score: 0.0,
        done: false,
    }];
    for _ in 0..max_len {
        if beams.iter().all(|b| b.done) {
            break;
        }
        // (score, parent rank, token logp, token, hypothesis)
        let mut cands: Vec<(f64, usize, f64, usize, Hyp)> = Vec::new();
        for (rank, b) in beams.iter().enumerate() {
            if b.done {
                cands.push((b.score, rank, 0.0, 0, b.clone()));
                continue;
            }
            let lp = dec.next_logp(&b.tokens)?;
            for (tok, &l) in lp.iter().enumerate() {
                let mut tokens = b.tokens.clone();
                tokens.push(tok);
                let score = b.score + l;
                cands.push((score, rank, l, tok, Hyp { tokens, score, done: tok == EOS }));
            }
        }
        cands.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(Ordering::Equal)
                .then(a.1.cmp(&b.1))
                .then(b.2.partial_cmp(&a.2).unwrap_or(Ordering::Equal))
                .then(a.3.cmp(&b.3))
        });
        beams = cands.into_iter().take(width).map(|c| c.4).collect();
    }
    let mut best = beams.swap_remove(0);
    Ok(best.tokens.split_off(1))
}
