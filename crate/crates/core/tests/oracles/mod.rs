//! Straight-line reference implementations for the integration tests. Nothing
//! here calls into the graph engine; parameters are read by name.
#![allow(dead_code)]

use qfl_core::corpus::TessellationSpec;
use qfl_core::qformer::{MaskMode, QFormer};
use qfl_core::rng::{self, Rng};
use qfl_core::tensor::Tensor;
use rand::Rng as _;

pub type Mat = Vec<Vec<f64>>;

pub fn mat(t: &Tensor) -> Mat {
    let c = *t.shape().last().unwrap();
    t.data().chunks(c).map(<[f64]>::to_vec).collect()
}

pub fn flat(m: &Mat) -> Vec<f64> {
    m.iter().flatten().copied().collect()
}

pub fn random_mat(rng: &mut Rng, rows: usize, cols: usize, std: f64) -> Mat {
    (0..rows).map(|_| rng::normal_vec(rng, cols, std)).collect()
}

pub fn tensor(m: &Mat) -> Tensor {
    Tensor::from_f64(&[m.len(), m[0].len()], flat(m)).unwrap()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn mm(a: &Mat, b: &Mat) -> Mat {
    let mut out = vec![vec![0.0; b[0].len()]; a.len()];
    for i in 0..a.len() {
        for j in 0..b[0].len() {
            let mut s = 0.0;
            for k in 0..b.len() {
                s += a[i][k] * b[k][j];
            }
            out[i][j] = s;
        }
    }
    out
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

pub fn layer_norm(x: &Mat, gamma: &[f64], beta: &[f64]) -> Mat {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let s = (var + 1e-5).sqrt();
            row.iter()
                .enumerate()
                .map(|(c, v)| (v - mean) / s * gamma[c] + beta[c])
                .collect()
        })
        .collect()
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x)).tanh())
}

pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

/// Multi-head attention with explicit loops; `allowed(i, j)` gates each score.
pub fn attention(q: &Mat, k: &Mat, v: &Mat, heads: usize, allowed: &dyn Fn(usize, usize) -> bool) -> Mat {
    let d = q[0].len();
    let dh = d / heads;
    let mut out = vec![vec![0.0; d]; q.len()];
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        for i in 0..q.len() {
            let mut scores = Vec::new();
            for j in 0..k.len() {
                if allowed(i, j) {
                    let s: f64 = cols.clone().map(|c| q[i][c] * k[j][c]).sum();
                    scores.push((j, s / (dh as f64).sqrt()));
                }
            }
            let mx = scores.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().map(|s| (s.1 - mx).exp()).sum();
            for &(j, s) in &scores {
                let w = (s - mx).exp() / z;
                for c in cols.clone() {
                    out[i][c] += w * v[j][c];
                }
            }
        }
    }
    out
}

/// Who may attend to whom in the concatenated (queries, text) sequence.
pub fn allowed(mode: MaskMode, nq: usize, i: usize, j: usize) -> bool {
    let query_row = i < nq;
    let query_col = j < nq;
    match mode {
        MaskMode::Bidirectional => true,
        MaskMode::Unimodal => query_row == query_col,
        MaskMode::MultimodalCausal => {
            if query_row {
                query_col
            } else {
                query_col || j <= i
            }
        }
    }
}

/// Reads Q-Former parameters by name.
pub struct Weights<'a>(pub &'a QFormer);

impl Weights<'_> {
    pub fn get(&self, name: &str) -> Mat {
        let id = self.0.store.find(name).unwrap_or_else(|| panic!("no parameter {name}"));
        let t = self.0.store.get(id);
        if t.rank() == 1 {
            vec![t.data().to_vec()]
        } else {
            mat(t)
        }
    }

    pub fn vec(&self, name: &str) -> Vec<f64> {
        self.get(name).remove(0)
    }

    pub fn linear(&self, x: &Mat, name: &str) -> Mat {
        let w = self.get(&format!("{name}.w"));
        let b = self.vec(&format!("{name}.b"));
        mm(x, &w)
            .into_iter()
            .map(|r| r.iter().zip(&b).map(|(a, c)| a + c).collect())
            .collect()
    }

    pub fn norm(&self, x: &Mat, name: &str) -> Mat {
        layer_norm(x, &self.vec(&format!("{name}.gamma")), &self.vec(&format!("{name}.beta")))
    }

    fn attn(&self, x: &Mat, src: &Mat, name: &str, allow: &dyn Fn(usize, usize) -> bool) -> Mat {
        let q = self.linear(x, &format!("{name}.q"));
        let k = self.linear(src, &format!("{name}.k"));
        let v = self.linear(src, &format!("{name}.v"));
        let a = attention(&q, &k, &v, self.0.config.n_heads, allow);
        let o = self.linear(&a, &format!("{name}.o"));
        self.norm(&add(x, &o), &format!("{name}.norm"))
    }

    fn ffn(&self, x: &Mat, name: &str) -> Mat {
        let h = self.linear(x, &format!("{name}.up"));
        let h: Mat = h.iter().map(|r| r.iter().map(|v| gelu(*v)).collect()).collect();
        let h = self.linear(&h, &format!("{name}.down"));
        self.norm(&add(x, &h), &format!("{name}.norm"))
    }

    /// Query and text states after the last block.
    pub fn forward(&self, tiles: Option<&Mat>, ids: Option<&[usize]>, mode: MaskMode) -> (Option<Mat>, Option<Mat>) {
        let cfg = &self.0.config;
        let mut xq = tiles.map(|_| self.get("qformer.query_embeddings"));
        let mut xt = ids.map(|ids| {
            let tok = self.get("qformer.token_embeddings");
            let pos = self.get("qformer.position_embeddings");
            let e: Mat = ids
                .iter()
                .enumerate()
                .map(|(t, &id)| tok[id].iter().zip(&pos[t]).map(|(a, b)| a + b).collect())
                .collect();
            self.norm(&e, "qformer.embedding_norm")
        });
        for b in 0..cfg.n_blocks {
            let p = format!("qformer.block{b}");
            let own = format!("{p}.self");
            match (xq.take(), xt.take()) {
                (Some(q), Some(t)) => {
                    let nq = q.len();
                    let x: Mat = q.into_iter().chain(t).collect();
                    let mut y = self.attn(&x, &x, &own, &|i, j| allowed(mode, nq, i, j));
                    let t = y.split_off(nq);
                    xq = Some(y);
                    xt = Some(t);
                }
                (Some(q), None) => xq = Some(self.attn(&q, &q, &own, &|_, _| true)),
                (None, Some(t)) => xt = Some(self.attn(&t, &t, &own, &|_, _| true)),
                (None, None) => unreachable!(),
            }
            if b % 2 == 0 {
                if let (Some(q), Some(src)) = (&xq, tiles) {
                    xq = Some(self.attn(q, src, &format!("{p}.cross"), &|_, _| true));
                }
            }
            xq = xq.map(|q| self.ffn(&q, &format!("{p}.ffn_query")));
            xt = xt.map(|t| self.ffn(&t, &format!("{p}.ffn_text")));
        }
        (xq, xt)
    }
}

/// `sim[i][j] = max_q <queries[i][q], text[j]>`.
pub fn similarity(queries: &[Mat], text: &Mat) -> Mat {
    queries
        .iter()
        .map(|qs| {
            text.iter()
                .map(|t| {
                    qs.iter()
                        .map(|q| q.iter().zip(t).map(|(a, b)| a * b).sum::<f64>())
                        .fold(f64::NEG_INFINITY, f64::max)
                })
                .collect()
        })
        .collect()
}

pub fn itc(sim: &Mat, temperature: f64, alpha: f64) -> f64 {
    let n = sim.len();
    let target = |i: usize, j: usize| {
        if n == 1 {
            1.0
        } else if i == j {
            alpha
        } else {
            (1.0 - alpha) / (n - 1) as f64
        }
    };
    let mut total = 0.0;
    for i in 0..n {
        let row: Vec<f64> = (0..n).map(|j| sim[i][j] / temperature).collect();
        let col: Vec<f64> = (0..n).map(|j| sim[j][i] / temperature).collect();
        let (lr, lc) = (log_softmax(&row), log_softmax(&col));
        for j in 0..n {
            total -= target(i, j) * (lr[j] + lc[j]);
        }
    }
    total / (2 * n) as f64
}

/// Binary cross-entropy of the query-averaged head logit per pair.
pub fn itm(states: &[Mat], labels: &[bool], w: &[f64], b: f64) -> f64 {
    let mut total = 0.0;
    for (s, &y) in states.iter().zip(labels) {
        let z = s
            .iter()
            .map(|q| q.iter().zip(w).map(|(a, c)| a * c).sum::<f64>() + b)
            .sum::<f64>()
            / s.len() as f64;
        let p = 1.0 / (1.0 + (-z).exp());
        total -= if y { p.ln() } else { (1.0 - p).ln() };
    }
    total / labels.len() as f64
}

pub fn itg(logits: &Mat, targets: &[usize], mask: &[bool]) -> f64 {
    let mut total = 0.0;
    let mut live = 0;
    for t in 0..targets.len() {
        if mask[t] {
            total -= log_softmax(&logits[t])[targets[t]];
            live += 1;
        }
    }
    total / live as f64
}

/// 1-based ranks by sorting each query's candidates (score desc, index asc).
pub fn sorted_ranks(sim: &Mat, image_to_text: bool) -> Vec<usize> {
    let n = sim.len();
    (0..n)
        .map(|q| {
            let score = |c: usize| if image_to_text { sim[q][c] } else { sim[c][q] };
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| score(b).partial_cmp(&score(a)).unwrap().then(a.cmp(&b)));
            order.iter().position(|&c| c == q).unwrap() + 1
        })
        .collect()
}

pub fn median(v: &[usize]) -> f64 {
    let mut s = v.to_vec();
    s.sort();
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2] as f64
    } else {
        (s[n / 2 - 1] + s[n / 2]) as f64 / 2.0
    }
}

/// Tile origins kept by counting pixels tile by tile.
pub fn tessellation(spec: &TessellationSpec) -> Vec<(usize, usize)> {
    let ts = spec.tile_size;
    let mut kept = Vec::new();
    let mut y = 0;
    while y + ts <= spec.height {
        let mut x = 0;
        while x + ts <= spec.width {
            let mut tissue = 0usize;
            let mut pen = false;
            for yy in y..y + ts {
                for xx in x..x + ts {
                    tissue += spec.mask[yy * spec.width + xx] as usize;
                    pen |= spec.exclusion[yy * spec.width + xx];
                }
            }
            if !pen && tissue as f64 / (ts * ts) as f64 >= spec.coverage_threshold {
                kept.push((y, x));
            }
            x += ts;
        }
        y += ts;
    }
    kept
}

pub fn random_bools(rng: &mut Rng, n: usize, p: f64) -> Vec<bool> {
    (0..n).map(|_| rng.random_bool(p)).collect()
}
