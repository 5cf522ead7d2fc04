//! Contrastive, matching and generation losses.
//!
//! The graph builders (`*_graph`) are what training differentiates; the eager
//! functions evaluate the same graphs on plain tensors.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::corpus::tokenizer::{BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Graph, Tensor, Var};

/// Contrastive batch: `query_embs[N, n_queries, d]` and `text_cls[N, d]`,
/// both unit-norm along `d`.
#[derive(Clone, Debug)]
pub struct ItcBatch {
    pub query_embs: Tensor,
    pub text_cls: Tensor,
    pub temperature: f64,
    pub smoothing: f64,
}

impl ItcBatch {
    pub fn new(query_embs: Tensor, text_cls: Tensor, temperature: f64, smoothing: f64) -> Result<Self> {
        let b = ItcBatch {
            query_embs,
            text_cls,
            temperature,
            smoothing,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let [n, _, d] = *self.query_embs.shape() else {
            return Err(Error::shape("itc", "query_embs must be [N, n_queries, d]"));
        };
        if self.text_cls.shape() != [n, d] {
            return Err(Error::shape(
                "itc",
                format!("text_cls {:?} for {n} images of width {d}", self.text_cls.shape()),
            ));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::invalid("temperature must be positive"));
        }
        if !(self.smoothing > 0.0 && self.smoothing <= 1.0) {
            return Err(Error::invalid("smoothing must lie in (0, 1]"));
        }
        for (what, t) in [("query", &self.query_embs), ("text", &self.text_cls)] {
            for row in t.data().chunks(d) {
                let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                if (norm - 1.0).abs() > 1e-6 {
                    return Err(Error::invalid(format!("{what} vector with norm {norm}")));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.query_embs.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Teacher-forcing target: `BOS y_1 .. y_T EOS`, optionally padded.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItgTarget {
    pub tokens: Vec<usize>,
}

impl ItgTarget {
    pub fn new(words: &[usize], pad_to: Option<usize>) -> Self {
        let mut tokens = Vec::with_capacity(words.len() + 2);
        tokens.push(BOS);
        tokens.extend_from_slice(words);
        tokens.push(EOS);
        if let Some(len) = pad_to {
            if tokens.len() < len {
                tokens.resize(len, PAD);
            }
        }
        ItgTarget { tokens }
    }

    /// Decoder inputs: every token but the last.
    pub fn inputs(&self) -> &[usize] {
        &self.tokens[..self.tokens.len() - 1]
    }

    /// Next-token targets aligned with [`inputs`](Self::inputs).
    pub fn targets(&self) -> &[usize] {
        &self.tokens[1..]
    }

    pub fn mask(&self) -> Vec<bool> {
        self.targets().iter().map(|&t| t != PAD).collect()
    }
}

/// Which side of the similarity matrix a negative is drawn from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MiningDirection {
    /// For image `i`, a text from row `i`.
    TextForImage,
    /// For text `i`, an image from column `i`.
    ImageForText,
}

fn sim_line(sim: &Tensor, dir: MiningDirection, i: usize) -> Vec<f64> {
    let n = sim.cols();
    match dir {
        MiningDirection::TextForImage => sim.row(i).to_vec(),
        MiningDirection::ImageForText => (0..n).map(|r| sim.data()[r * n + i]).collect(),
    }
}

fn check_square(sim: &Tensor) -> Result<usize> {
    match *sim.shape() {
        [n, m] if n == m => {
            if n < 2 {
                Err(Error::invalid("hard negatives need at least two pairs"))
            } else {
                Ok(n)
            }
        }
        _ => Err(Error::shape("mine_hard_negatives", "similarity must be square")),
    }
}

/// Samples, for every `i`, a `j != i` with probability proportional to
/// `exp(sim_ij / tau)` (row `i` or column `i` depending on `dir`).
pub fn mine_hard_negatives(sim: &Tensor, dir: MiningDirection, tau: f64, rng: &mut Rng) -> Result<Vec<usize>> {
    let n = check_square(sim)?;
    (0..n)
        .map(|i| {
            let line = sim_line(sim, dir, i);
            let mx = line
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, v)| *v)
                .fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = line
                .iter()
                .enumerate()
                .map(|(j, v)| if j == i { 0.0 } else { ((v - mx) / tau).exp() })
                .collect();
            let total: f64 = w.iter().sum();
            let mut u = rng.random::<f64>() * total;
            let mut pick = if i == n - 1 { n - 2 } else { n - 1 };
            for (j, wj) in w.iter().enumerate() {
                if j == i {
                    continue;
                }
                if u < *wj {
                    pick = j;
                    break;
                }
                u -= wj;
            }
            Ok(pick)
        })
        .collect()
}

/// Deterministic variant: the most similar off-diagonal entry, lowest index on ties.
pub fn hardest_negatives(sim: &Tensor, dir: MiningDirection) -> Result<Vec<usize>> {
    let n = check_square(sim)?;
    Ok((0..n)
        .map(|i| {
            let line = sim_line(sim, dir, i);
            let mut best = usize::MAX;
            for j in (0..n).filter(|&j| j != i) {
                if best == usize::MAX || line[j] > line[best] {
                    best = j;
                }
            }
            best
        })
        .collect())
}

/// `sim[i, j] = max_q query[i, q] · text[j]` from `queries[N * n_queries, d]`
/// and `text[M, d]`.
pub fn pairwise_similarity_graph(g: &mut Graph, queries: Var, n_queries: usize, text: Var) -> Result<Var> {
    let tt = g.transpose(text)?;
    let s = g.matmul(queries, tt)?;
    g.group_max_rows(s, n_queries)
}

/// Smoothed contrastive targets: `alpha` on the diagonal and
/// `(1 - alpha) / (N - 1)` elsewhere; `[[1]]` when `N = 1`.
pub fn smoothed_targets(n: usize, alpha: f64) -> Tensor {
    let off = if n > 1 { (1.0 - alpha) / (n as f64 - 1.0) } else { 0.0 };
    let on = if n > 1 { alpha } else { 1.0 };
    let data = (0..n * n)
        .map(|k| if k / n == k % n { on } else { off })
        .collect();
    Tensor::from_f64(&[n, n], data).expect("square")
}

/// Symmetric smoothed cross-entropy over `sim / exp(log_temperature)`.
pub fn itc_loss_graph(g: &mut Graph, sim: Var, log_temperature: Var, alpha: f64) -> Result<Var> {
    let n = match *g.shape(sim) {
        [n, m] if n == m && n > 0 => n,
        ref s => return Err(Error::shape("itc_loss", format!("similarity {s:?} must be square"))),
    };
    let neg = g.scale(log_temperature, -1.0);
    let inv_tau = g.exp(neg);
    let logits = g.scale_by(sim, inv_tau)?;
    let targets = g.constant(smoothed_targets(n, alpha).cast(g.dtype(sim)));
    let rows = g.log_softmax_rows(logits);
    let lt = g.transpose(logits)?;
    let cols = g.log_softmax_rows(lt);
    let a = g.dot(rows, targets)?;
    let b = g.dot(cols, targets)?;
    let s = g.add(a, b)?;
    Ok(g.scale(s, -1.0 / (2.0 * n as f64)))
}

/// Mean binary cross-entropy of the per-pair logits obtained by averaging the
/// ITM head over each pair's `n_queries` output states.
pub fn itm_loss_graph(
    g: &mut Graph,
    query_states: Var,
    n_queries: usize,
    labels: &[bool],
    head_w: Var,
    head_b: Var,
) -> Result<Var> {
    let rows = g.shape(query_states)[0];
    if n_queries == 0 || rows != labels.len() * n_queries {
        return Err(Error::shape(
            "itm_loss",
            format!("{rows} query rows for {} labels", labels.len()),
        ));
    }
    let z = g.linear(query_states, head_w, head_b)?;
    let z = g.reshape(z, &[labels.len(), n_queries])?;
    let dt = g.dtype(z);
    let avg = g.constant(Tensor::new(vec![n_queries, 1], dt, vec![1.0 / n_queries as f64; n_queries])?);
    let logit = g.matmul(z, avg)?;
    let signs = g.constant(Tensor::new(
        vec![labels.len(), 1],
        dt,
        labels.iter().map(|&c| if c { -1.0 } else { 1.0 }).collect(),
    )?);
    let signed = g.mul(logit, signs)?;
    let per_pair = g.softplus(signed);
    Ok(g.mean(per_pair))
}

/// Averaged per-pair ITM logits (no loss), for inspection and tests.
pub fn itm_logits(query_states: &Tensor, head_w: &Tensor, head_b: &Tensor) -> Result<Vec<f64>> {
    let [p, q, d] = *query_states.shape() else {
        return Err(Error::shape("itm_logits", "query_states must be [pairs, n_queries, d]"));
    };
    let qs = query_states.clone().reshape(&[p * q, d])?;
    let z = crate::tensor::matmul(&qs, head_w)?;
    Ok(z.data()
        .chunks(q)
        .map(|c| c.iter().map(|x| x + head_b.data()[0]).sum::<f64>() / q as f64)
        .collect())
}

/// `-(1/T') Σ_t log softmax(logits_t)[y_t]` over non-pad targets.
pub fn itg_loss_graph(g: &mut Graph, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
    let [t, v] = *g.shape(logits) else {
        return Err(Error::shape("itg_loss", "logits must be [T, vocab]"));
    };
    if targets.len() != t || mask.len() != t {
        return Err(Error::shape(
            "itg_loss",
            format!("{t} logit rows for {} targets", targets.len()),
        ));
    }
    let live = mask.iter().filter(|&&m| m).count();
    if live == 0 {
        return Err(Error::invalid("no non-pad target positions"));
    }
    let mut pick = vec![0.0; t * v];
    for (i, (&y, &m)) in targets.iter().zip(mask).enumerate() {
        if m {
            if y >= v {
                return Err(Error::invalid(format!("target id {y} outside vocabulary of {v}")));
            }
            pick[i * v + y] = 1.0;
        }
    }
    let dt = g.dtype(logits);
    let pick = g.constant(Tensor::new(vec![t, v], dt, pick)?);
    let ls = g.log_softmax_rows(logits);
    let s = g.dot(ls, pick)?;
    Ok(g.scale(s, -1.0 / live as f64))
}

fn eager_scalar(f: impl FnOnce(&mut Graph) -> Result<Var>) -> Result<f64> {
    let mut g = Graph::new();
    let out = f(&mut g)?;
    Ok(g.scalar_value(out))
}

pub fn pairwise_similarity(query_embs: &Tensor, text_cls: &Tensor) -> Result<Tensor> {
    let [n, q, d] = *query_embs.shape() else {
        return Err(Error::shape("pairwise_similarity", "query_embs must be [N, n_queries, d]"));
    };
    if text_cls.rank() != 2 || text_cls.cols() != d {
        return Err(Error::shape(
            "pairwise_similarity",
            format!("text {:?} against width {d}", text_cls.shape()),
        ));
    }
    let mut g = Graph::new();
    let qv = g.constant(query_embs.clone().reshape(&[n * q, d])?);
    let tv = g.constant(text_cls.clone());
    let s = pairwise_similarity_graph(&mut g, qv, q, tv)?;
    Ok(g.tensor(s))
}

pub fn itc_loss(batch: &ItcBatch) -> Result<f64> {
    batch.validate()?;
    if batch.is_empty() {
        return Err(Error::invalid("empty contrastive batch"));
    }
    let sim = pairwise_similarity(&batch.query_embs, &batch.text_cls)?;
    eager_scalar(|g| {
        let s = g.constant(sim);
        let lt = g.constant(Tensor::scalar(batch.temperature.ln()));
        itc_loss_graph(g, s, lt, batch.smoothing)
    })
}

/// `query_states[3N, n_queries, d]`; `head_w[d, 1]`, `head_b[1]`.
pub fn itm_loss(query_states: &Tensor, labels: &[bool], head_w: &Tensor, head_b: &Tensor) -> Result<f64> {
    let [p, q, d] = *query_states.shape() else {
        return Err(Error::shape("itm_loss", "query_states must be [3N, n_queries, d]"));
    };
    if p != labels.len() || p % 3 != 0 {
        return Err(Error::invalid(format!("{p} pairs with {} labels", labels.len())));
    }
    if labels.iter().filter(|&&c| c).count() != p / 3 {
        return Err(Error::invalid("exactly one third of the pairs must match"));
    }
    eager_scalar(|g| {
        let qs = g.constant(query_states.clone().reshape(&[p * q, d])?);
        let w = g.constant(head_w.clone());
        let b = g.constant(head_b.clone());
        itm_loss_graph(g, qs, q, labels, w, b)
    })
}

pub fn itg_loss(text_logits: &Tensor, target: &ItgTarget) -> Result<f64> {
    eager_scalar(|g| {
        let l = g.constant(text_logits.clone());
        itg_loss_graph(g, l, target.targets(), &target.mask())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smoothed_targets_rows_sum_to_one() {
        let t = smoothed_targets(4, 0.9);
        for r in 0..4 {
            assert!((t.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-15);
        }
        assert_eq!(smoothed_targets(1, 0.9).data(), &[1.0]);
    }

    #[test]
    fn itg_target_layout() {
        let t = ItgTarget::new(&[7, 8], Some(6));
        assert_eq!(t.tokens, vec![BOS, 7, 8, EOS, PAD, PAD]);
        assert_eq!(t.inputs(), &[BOS, 7, 8, EOS, PAD]);
        assert_eq!(t.targets(), &[7, 8, EOS, PAD, PAD]);
        assert_eq!(t.mask(), vec![true, true, true, false, false]);
    }

    #[test]
    fn hardest_negative_prefers_lowest_index_on_ties() {
        let sim = Tensor::from_f64(&[3, 3], vec![1.0, 0.5, 0.5, 0.2, 1.0, 0.2, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(hardest_negatives(&sim, MiningDirection::TextForImage).unwrap(), vec![1, 0, 0]);
        assert_eq!(hardest_negatives(&sim, MiningDirection::ImageForText).unwrap(), vec![1, 0, 0]);
    }
}
