//! Measurements shared by the integration tests and the acceptance report.
//! Each returns the observed quantity; callers decide what passes.
#![allow(dead_code)]

use qfl_core::corpus::tokenizer::CLS;
use qfl_core::corpus::TessellationSpec;
use qfl_core::eval::bootstrap::{bootstrap_ci, BootstrapConfig};
use qfl_core::eval::retrieval::{rank_stats, ranks, recall_at_k, recall_of, Direction, SimilarityMatrix};
use qfl_core::objectives::{itc_loss, itc_loss_graph, itg_loss, itm_loss, ItcBatch, ItgTarget};
use qfl_core::qformer::{MaskMode, QFormer, QFormerConfig};
use qfl_core::rng::{self, Rng};
use qfl_core::tensor::{grad_check, grad_check_many, AttentionMask, DType, Graph, Tensor, Var};
use qfl_core::trainer::{stage1_loss_graph, Negatives, Stage1Example};
use qfl_core::Result;
use rand::Rng as _;

use crate::oracles::{self, Mat, Weights};

pub const GRAD_EPS: f64 = 1e-5;

fn t(shape: &[usize], rng: &mut Rng, std: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_f64(shape, rng::normal_vec(rng, n, std)).unwrap()
}

/// Fixed weighted sum so every output coordinate carries a distinct gradient.
fn probe(g: &mut Graph, v: Var) -> Result<Var> {
    let shape = g.shape(v).to_vec();
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37 + 0.2).sin() + 0.1).collect();
    let w = g.constant(Tensor::from_f64(&shape, w)?);
    g.dot(v, w)
}

/// `(operation, max relative error)` for every differentiable graph op.
pub fn op_gradient_errors() -> Vec<(&'static str, f64)> {
    let mut r = rng::rng_for(11, "grad-ops");
    let a = t(&[3, 4], &mut r, 1.0);
    let b = t(&[3, 4], &mut r, 1.0);
    let m = t(&[4, 2], &mut r, 1.0);
    let row = t(&[4], &mut r, 1.0);
    let positive = Tensor::from_f64(&[3, 4], a.data().iter().map(|x| x.abs() + 0.5).collect()).unwrap();
    let scalar = Tensor::scalar(0.7);
    let mut out = Vec::new();
    let mut one = |name: &'static str, f: &dyn Fn(&mut Graph, &[Var]) -> Result<Var>, pts: &[&Tensor]| {
        let pts: Vec<Tensor> = pts.iter().map(|p| (*p).clone()).collect();
        let e = grad_check_many(|g, v| { let y = f(g, v)?; probe(g, y) }, &pts, GRAD_EPS, None)
            .unwrap_or_else(|e| panic!("{name}: {e}"));
        out.push((name, e));
    };
    one("matmul", &|g, v| g.matmul(v[0], v[1]), &[&a, &m]);
    one("add", &|g, v| g.add(v[0], v[1]), &[&a, &b]);
    one("sub", &|g, v| g.sub(v[0], v[1]), &[&a, &b]);
    one("mul", &|g, v| g.mul(v[0], v[1]), &[&a, &b]);
    one("add_row", &|g, v| g.add_row(v[0], v[1]), &[&a, &row]);
    let bias2 = Tensor::from_f64(&[2], vec![0.3, -0.2]).unwrap();
    one("linear", &|g, v| g.linear(v[0], v[1], v[2]), &[&a, &m, &bias2]);
    one("scale", &|g, v| Ok(g.scale(v[0], -1.7)), &[&a]);
    one("scale_by", &|g, v| g.scale_by(v[0], v[1]), &[&a, &scalar]);
    one("exp", &|g, v| Ok(g.exp(v[0])), &[&a]);
    one("log", &|g, v| Ok(g.log(v[0])), &[&positive]);
    one("softplus", &|g, v| Ok(g.softplus(v[0])), &[&a]);
    one("gelu", &|g, v| Ok(g.gelu(v[0])), &[&a]);
    one("sum", &|g, v| { let s = g.sum(v[0]); let s2 = g.mul(s, s)?; Ok(s2) }, &[&a]);
    one("mean", &|g, v| { let s = g.mean(v[0]); let e = g.exp(s); Ok(e) }, &[&a]);
    one("dot", &|g, v| g.dot(v[0], v[1]), &[&a, &b]);
    one("transpose", &|g, v| g.transpose(v[0]), &[&a]);
    one("reshape", &|g, v| g.reshape(v[0], &[2, 6]), &[&a]);
    one("concat_rows", &|g, v| g.concat_rows(&[v[0], v[1], v[0]]), &[&a, &b]);
    one("slice_rows", &|g, v| g.slice_rows(v[0], 1, 2), &[&a]);
    let table = t(&[5, 3], &mut r, 1.0);
    one("gather", &|g, v| g.gather(v[0], &[1, 3, 1, 4]), &[&table]);
    let gamma = t(&[4], &mut r, 1.0);
    one("layer_norm", &|g, v| g.layer_norm(v[0], v[1], v[2]), &[&a, &gamma, &row]);
    let (q, k, vv) = (t(&[3, 4], &mut r, 1.0), t(&[5, 4], &mut r, 1.0), t(&[5, 4], &mut r, 1.0));
    let mask = AttentionMask::from_fn(3, 5, |i, j| (i + 2 * j) % 3 != 1 || j == i);
    one("attention (2 heads, masked)", &|g, v| g.attention(v[0], v[1], v[2], Some(&mask), 2), &[&q, &k, &vv]);
    one("attention (1 head)", &|g, v| g.attention(v[0], v[1], v[2], None, 1), &[&q, &k, &vv]);
    one("l2_normalize", &|g, v| g.l2_normalize(v[0]), &[&a]);
    let src = t(&[6, 3], &mut r, 1.0);
    one("group_max_rows", &|g, v| g.group_max_rows(v[0], 2), &[&src]);
    one("log_softmax_rows", &|g, v| Ok(g.log_softmax_rows(v[0])), &[&a]);
    let sim = t(&[4, 4], &mut r, 0.3);
    let lt = Tensor::from_f64(&[1], vec![0.07f64.ln()]).unwrap();
    one("itc loss wrt sim and log temperature", &|g, v| itc_loss_graph(g, v[0], v[1], 0.9), &[&sim, &lt]);
    out
}

pub fn tiny_config() -> QFormerConfig {
    QFormerConfig {
        n_blocks: 2,
        hidden_dim: 8,
        n_heads: 2,
        n_queries: 2,
        image_feature_dim: 5,
        vocab_size: 12,
        max_text_len: 8,
        ffn_dim: 12,
    }
}

pub fn random_words(r: &mut Rng, n: usize, vocab: usize) -> Vec<usize> {
    (0..n).map(|_| r.random_range(6..vocab)).collect()
}

pub fn tiny_examples(cfg: &QFormerConfig, n: usize, r: &mut Rng) -> Vec<Stage1Example> {
    (0..n)
        .map(|_| {
            let n_tiles = r.random_range(1..=4);
            let len = r.random_range(2..=4);
            let words = random_words(r, len, cfg.vocab_size);
            let mut text_ids = vec![CLS];
            text_ids.extend(&words);
            Stage1Example {
                tiles: t(&[n_tiles, cfg.image_feature_dim], r, 1.0),
                text_ids,
                itg: ItgTarget::new(&words, None),
            }
        })
        .collect()
}

/// Weighted sum of the three stage-1 losses on a 4-case batch, checked over
/// every parameter tensor of a float64 model.
pub fn stage1_gradient_error() -> f64 {
    let cfg = tiny_config();
    let mut r = rng::rng_for(5, "grad-stage1");
    let model = QFormer::new(cfg.clone(), DType::Float64, &mut r).unwrap();
    // larger weights than the 0.02 init so the check sees curvature
    let mut model = model;
    for id in model.store.ids().collect::<Vec<_>>() {
        let name = model.store.name(id).to_string();
        if name.ends_with(".w") || name.contains("embeddings") {
            let p = model.store.get_mut(id);
            p.update(|_, _| rng::normal(&mut r, 0.4));
        }
    }
    let examples = tiny_examples(&cfg, 4, &mut r);
    let points: Vec<Tensor> = model.store.ids().map(|id| model.store.get(id).clone()).collect();
    grad_check_many(
        |g, vars| {
            let l = stage1_loss_graph(
                &model,
                g,
                vars,
                &examples,
                Negatives::Fixed {
                    text_for_image: vec![1, 2, 3, 0],
                    image_for_text: vec![2, 0, 1, 1],
                },
                0.9,
                [1.0, 1.0, 1.0],
            )?;
            Ok(l.total)
        },
        &points,
        GRAD_EPS,
        Some(6),
    )
    .unwrap()
}

fn unit_rows(r: &mut Rng, rows: usize, d: usize) -> Mat {
    (0..rows)
        .map(|_| {
            let v = rng::normal_vec(r, d, 1.0);
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / n).collect()
        })
        .collect()
}

/// Max |library - oracle| over `instances` random ITC, ITM and ITG problems.
pub fn loss_oracle_errors(instances: usize) -> [f64; 3] {
    let mut r = rng::rng_for(21, "loss-oracles");
    let mut worst = [0.0f64; 3];
    for _ in 0..instances {
        let n = r.random_range(1..=6);
        let nq = r.random_range(1..=4);
        let d = r.random_range(2..=8);
        let queries: Vec<Mat> = (0..n).map(|_| unit_rows(&mut r, nq, d)).collect();
        let text = unit_rows(&mut r, n, d);
        let tau = r.random_range(0.03..1.0);
        let alpha = r.random_range(0.5..=1.0);
        let qt = Tensor::from_f64(&[n, nq, d], queries.iter().flat_map(oracles::flat).collect()).unwrap();
        let got = itc_loss(&ItcBatch::new(qt, oracles::tensor(&text), tau, alpha).unwrap()).unwrap();
        let want = oracles::itc(&oracles::similarity(&queries, &text), tau, alpha);
        worst[0] = worst[0].max((got - want).abs());

        let pairs = 3 * r.random_range(1..=3);
        let states: Vec<Mat> = (0..pairs).map(|_| oracles::random_mat(&mut r, nq, d, 1.0)).collect();
        let labels: Vec<bool> = (0..pairs).map(|i| i < pairs / 3).collect();
        let w = rng::normal_vec(&mut r, d, 1.0);
        let b = rng::normal(&mut r, 0.5);
        let st = Tensor::from_f64(&[pairs, nq, d], states.iter().flat_map(oracles::flat).collect()).unwrap();
        let got = itm_loss(
            &st,
            &labels,
            &Tensor::from_f64(&[d, 1], w.clone()).unwrap(),
            &Tensor::from_f64(&[1], vec![b]).unwrap(),
        )
        .unwrap();
        worst[1] = worst[1].max((got - oracles::itm(&states, &labels, &w, b)).abs());

        let vocab = r.random_range(7..=20);
        let len = r.random_range(0..=6);
        let words = random_words(&mut r, len, vocab);
        let pad = r.random_bool(0.5).then(|| len + 2 + r.random_range(0..3));
        let target = ItgTarget::new(&words, pad);
        let logits = oracles::random_mat(&mut r, target.targets().len(), vocab, 3.0);
        let got = itg_loss(&oracles::tensor(&logits), &target).unwrap();
        worst[2] = worst[2].max((got - oracles::itg(&logits, target.targets(), &target.mask())).abs());
    }
    worst
}

/// Teacher-forced ITG loss of a float64 Q-Former against the loss rebuilt
/// from one forward per prefix, over `instances` random cases.
pub fn incremental_itg_error(instances: usize) -> f64 {
    let cfg = tiny_config();
    let mut r = rng::rng_for(31, "itg-incremental");
    let model = QFormer::new(cfg.clone(), DType::Float32, &mut r).unwrap().cast(DType::Float64);
    let w = Weights(&model);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let ex = &tiny_examples(&cfg, 1, &mut r)[0];
        let (_, states) = model.joint_forward(&ex.tiles, ex.itg.inputs(), MaskMode::MultimodalCausal).unwrap();
        let logits = w.linear(&oracles::mat(&states), "qformer.text_head");
        let full = itg_loss(&oracles::tensor(&logits), &ex.itg).unwrap();
        let mut total = 0.0;
        for (t, &y) in ex.itg.targets().iter().enumerate() {
            let (_, s) = model
                .joint_forward(&ex.tiles, &ex.itg.inputs()[..=t], MaskMode::MultimodalCausal)
                .unwrap();
            let last = oracles::mat(&s).pop().unwrap();
            let l = w.linear(&vec![last], "qformer.text_head").remove(0);
            total -= oracles::log_softmax(&l)[y];
        }
        let incremental = total / ex.itg.targets().len() as f64;
        worst = worst.max((full - incremental).abs());
    }
    worst
}

/// Max deviation of `(unimodal queries under text changes, unimodal text
/// under tile changes, causal prefix logits under suffix changes)`.
pub fn mask_invariance(trials: usize) -> [f64; 3] {
    let cfg = QFormerConfig {
        n_blocks: 2,
        hidden_dim: 16,
        n_heads: 4,
        n_queries: 4,
        image_feature_dim: 8,
        vocab_size: 20,
        max_text_len: 12,
        ffn_dim: 24,
    };
    let mut r = rng::rng_for(41, "mask-invariance");
    let mut model = QFormer::new(cfg.clone(), DType::Float32, &mut r).unwrap();
    for id in model.store.ids().collect::<Vec<_>>() {
        model.store.get_mut(id).update(|_, _| rng::normal(&mut r, 0.3));
    }
    let w = Weights(&model);
    let mut worst = [0.0f64; 3];
    for _ in 0..trials {
        let n_tiles = r.random_range(1..=6);
        let tiles = t(&[n_tiles, cfg.image_feature_dim], &mut r, 1.0).cast(DType::Float32);
        let other_n = r.random_range(1..=6);
        let other_tiles = t(&[other_n, cfg.image_feature_dim], &mut r, 1.0).cast(DType::Float32);
        let len = r.random_range(2..=cfg.max_text_len);
        let ids = random_words(&mut r, len, cfg.vocab_size);
        let other_len = r.random_range(1..=cfg.max_text_len);
        let other_ids = random_words(&mut r, other_len, cfg.vocab_size);

        let (q1, t1) = model.joint_forward(&tiles, &ids, MaskMode::Unimodal).unwrap();
        let (q2, _) = model.joint_forward(&tiles, &other_ids, MaskMode::Unimodal).unwrap();
        let (_, t3) = model.joint_forward(&other_tiles, &ids, MaskMode::Unimodal).unwrap();
        worst[0] = worst[0].max(oracles::max_abs_diff(q1.data(), q2.data()));
        worst[1] = worst[1].max(oracles::max_abs_diff(t1.data(), t3.data()));

        let cut = r.random_range(0..len - 1);
        let mut suffixed = ids.clone();
        for id in &mut suffixed[cut + 1..] {
            *id = r.random_range(0..cfg.vocab_size);
        }
        let (_, a) = model.joint_forward(&tiles, &ids, MaskMode::MultimodalCausal).unwrap();
        let (_, b) = model.joint_forward(&tiles, &suffixed, MaskMode::MultimodalCausal).unwrap();
        let la = w.linear(&oracles::mat(&a)[..=cut].to_vec(), "qformer.text_head");
        let lb = w.linear(&oracles::mat(&b)[..=cut].to_vec(), "qformer.text_head");
        worst[2] = worst[2].max(oracles::max_abs_diff(&oracles::flat(&la), &oracles::flat(&lb)));
    }
    worst
}

pub struct RetrievalCheck {
    pub matrices: usize,
    /// Matrices where any recall, mean or median differs from the oracle.
    pub mismatches: usize,
    pub recall_at_n_is_one: bool,
    pub transpose_swaps: bool,
}

fn sim_of(m: &Mat) -> SimilarityMatrix {
    SimilarityMatrix::from_tensor(oracles::tensor(m)).unwrap()
}

fn transpose(m: &Mat) -> Mat {
    (0..m.len()).map(|j| m.iter().map(|row| row[j]).collect()).collect()
}

/// Random matrices up to N = `max_n`; half draw from a few levels so ties occur.
pub fn retrieval_check(matrices: usize, max_n: usize) -> RetrievalCheck {
    let mut r = rng::rng_for(51, "retrieval-oracle");
    let mut out = RetrievalCheck {
        matrices,
        mismatches: 0,
        recall_at_n_is_one: true,
        transpose_swaps: true,
    };
    for i in 0..matrices {
        let n = r.random_range(1..=max_n);
        let mut m: Mat = vec![vec![0.0; n]; n];
        for v in m.iter_mut().flatten() {
            *v = if i % 2 == 0 { r.random_range(0..4) as f64 } else { rng::normal(&mut r, 1.0) };
        }
        let sim = sim_of(&m);
        let simt = sim_of(&transpose(&m));
        let mut ok = true;
        for (dir, i2t) in [(Direction::ImageToText, true), (Direction::TextToImage, false)] {
            let want = oracles::sorted_ranks(&m, i2t);
            for k in [1, 5, 10, n / 2, n] {
                if k == 0 || k > n {
                    continue;
                }
                let expected = want.iter().filter(|&&x| x <= k).count() as f64 / n as f64;
                ok &= recall_at_k(&sim, k, dir).unwrap() == expected;
            }
            let mean = want.iter().sum::<usize>() as f64 / n as f64;
            ok &= rank_stats(&sim, dir).unwrap() == (mean, oracles::median(&want));
            out.recall_at_n_is_one &= recall_at_k(&sim, n, dir).unwrap() == 1.0;
            let other = if i2t { Direction::TextToImage } else { Direction::ImageToText };
            out.transpose_swaps &= ranks(&simt, other) == ranks(&sim, dir)
                && rank_stats(&simt, other).unwrap() == rank_stats(&sim, dir).unwrap();
        }
        out.mismatches += usize::from(!ok);
    }
    out
}

pub struct BootstrapCheck {
    pub constant: (f64, f64),
    pub half_success: (f64, f64),
    pub same_seed_identical: bool,
}

/// N = 100 queries of which exactly the first half retrieve their match first.
pub fn half_success_matrix() -> SimilarityMatrix {
    let n = 100;
    let m: Mat = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| match (i == j, i < n / 2) {
                    (true, true) => 1.0,
                    (true, false) => -1.0,
                    _ => 0.0,
                })
                .collect()
        })
        .collect();
    sim_of(&m)
}

pub fn bootstrap_check() -> BootstrapCheck {
    let sim = half_success_matrix();
    let rk = ranks(&sim, Direction::ImageToText);
    let cfg = BootstrapConfig { replicates: 1000, level: 0.95, seed: 7 };
    let metric = |idx: &[usize]| recall_of(&rk, idx, 1);
    let a = bootstrap_ci(rk.len(), metric, &cfg).unwrap();
    let b = bootstrap_ci(rk.len(), metric, &cfg).unwrap();
    BootstrapCheck {
        constant: bootstrap_ci(100, |_| 0.25, &cfg).unwrap(),
        half_success: a,
        same_seed_identical: a.0.to_bits() == b.0.to_bits() && a.1.to_bits() == b.1.to_bits(),
    }
}

pub struct TessellationCheck {
    pub pairs: usize,
    pub mismatches: usize,
    pub boundary_kept: bool,
    pub below_boundary_dropped: bool,
    pub exclusion_rejects: bool,
}

fn spec(mask: Vec<bool>, exclusion: Vec<bool>, tile_size: usize) -> TessellationSpec {
    TessellationSpec { width: 64, height: 64, mask, exclusion, tile_size, coverage_threshold: 0.05 }
}

fn kept(s: &TessellationSpec) -> Vec<(usize, usize)> {
    qfl_core::corpus::tessellate(s).unwrap().iter().map(|c| (c.y, c.x)).collect()
}

/// Random 64x64 mask pairs against the pixel-count oracle, plus the coverage
/// boundary and a single excluded pixel.
pub fn tessellation_check(pairs: usize) -> TessellationCheck {
    let mut r = rng::rng_for(61, "tessellation");
    let mut mismatches = 0;
    for _ in 0..pairs {
        let density = r.random_range(0.0..0.3);
        let pen = r.random_range(0.0..0.002);
        let tile = [4, 8, 16, 20, 32][r.random_range(0..5)];
        let s = spec(oracles::random_bools(&mut r, 4096, density), oracles::random_bools(&mut r, 4096, pen), tile);
        mismatches += usize::from(kept(&s) != oracles::tessellation(&s));
    }
    // 20x20 tiles: 20 of 400 pixels is exactly 5%
    let with_pixels = |count: usize| {
        let mut mask = vec![false; 4096];
        for p in 0..count {
            mask[(p / 20) * 64 + p % 20] = true;
        }
        kept(&spec(mask, vec![false; 4096], 20)).contains(&(0, 0))
    };
    let mut pen = vec![false; 4096];
    pen[5 * 64 + 7] = true;
    let excluded = kept(&spec(vec![true; 4096], pen, 8));
    TessellationCheck {
        pairs,
        mismatches,
        boundary_kept: with_pixels(20),
        below_boundary_dropped: !with_pixels(19),
        exclusion_rejects: excluded.len() == 63 && !excluded.contains(&(0, 0)),
    }
}

pub fn single_grad_check(f: impl Fn(&mut Graph, Var) -> Result<Var>, point: &Tensor) -> f64 {
    grad_check(f, point, GRAD_EPS).unwrap()
}
