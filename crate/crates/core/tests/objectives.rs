mod checks;
mod oracles;

use proptest::prelude::*;
use qfl_core::objectives::{
    itc_loss, itg_loss, itm_loss, mine_hard_negatives, pairwise_similarity, ItcBatch, ItgTarget, MiningDirection,
};
use qfl_core::rng;
use qfl_core::tensor::Tensor;

fn t(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::from_f64(shape, data).unwrap()
}

#[test]
fn losses_match_explicit_loop_oracles() {
    let [itc, itm, itg] = checks::loss_oracle_errors(50);
    assert!(itc < 1e-10, "itc {itc:e}");
    assert!(itm < 1e-10, "itm {itm:e}");
    assert!(itg < 1e-10, "itg {itg:e}");
}

#[test]
fn teacher_forcing_matches_incremental_decoding() {
    let e = checks::incremental_itg_error(10);
    assert!(e < 1e-8, "{e:e}");
}

#[test]
fn itc_examples() {
    let one = ItcBatch::new(t(&[1, 1, 2], vec![0.6, 0.8]), t(&[1, 2], vec![1.0, 0.0]), 0.07, 0.9).unwrap();
    assert!(itc_loss(&one).unwrap().abs() < 1e-15);
    let same = ItcBatch::new(t(&[2, 1, 2], vec![1.0, 0.0, 1.0, 0.0]), t(&[2, 2], vec![1.0, 0.0, 1.0, 0.0]), 0.07, 0.9).unwrap();
    assert!((itc_loss(&same).unwrap() - 2f64.ln()).abs() < 1e-12);
}

#[test]
fn pairwise_similarity_examples() {
    let mut r = rng::rng_for(3, "pairwise");
    let q: Vec<oracles::Mat> = (0..3).map(|_| oracles::random_mat(&mut r, 2, 4, 1.0)).collect();
    let text = oracles::random_mat(&mut r, 4, 4, 1.0);
    let got = pairwise_similarity(&t(&[3, 2, 4], q.iter().flat_map(oracles::flat).collect()), &oracles::tensor(&text)).unwrap();
    assert_eq!(got.data(), oracles::flat(&oracles::similarity(&q, &text)).as_slice());
    let cos = pairwise_similarity(&t(&[2, 1, 2], vec![1.0, 0.0, 0.0, 1.0]), &t(&[2, 2], vec![0.6, 0.8, 1.0, 0.0])).unwrap();
    assert_eq!(cos.data(), &[0.6, 1.0, 0.8, 0.0]);
    assert!(pairwise_similarity(&t(&[1, 1, 2], vec![1.0, 0.0]), &t(&[1, 3], vec![1.0, 0.0, 0.0])).is_err());
}

#[test]
fn itm_examples() {
    let states = t(&[3, 2, 2], vec![0.0; 12]);
    let labels = [true, false, false];
    let w = t(&[2, 1], vec![1.0, 1.0]);
    let zero = t(&[1], vec![0.0]);
    assert!((itm_loss(&states, &labels, &w, &zero).unwrap() - 2f64.ln()).abs() < 1e-15);
    let sat = t(&[3, 1, 1], vec![20.0, -20.0, -20.0]);
    assert!(itm_loss(&sat, &labels, &t(&[1, 1], vec![1.0]), &zero).unwrap() < 1e-8);
    assert!(itm_loss(&states, &labels[..2], &w, &zero).is_err());
}

#[test]
fn itg_examples() {
    let target = ItgTarget::new(&[6, 7], None);
    let v = 9;
    let uniform = t(&[3, v], vec![0.5; 3 * v]);
    assert!((itg_loss(&uniform, &target).unwrap() - (v as f64).ln()).abs() < 1e-12);
    let mut onehot = vec![0.0; 3 * v];
    for (i, &y) in target.targets().iter().enumerate() {
        onehot[i * v + y] = 30.0;
    }
    assert!(itg_loss(&t(&[3, v], onehot), &target).unwrap() < 1e-8);
}

fn frequencies(sim: &Tensor, dir: MiningDirection, tau: f64, draws: usize) -> Vec<Vec<f64>> {
    let n = sim.rows();
    let mut counts = vec![vec![0usize; n]; n];
    let mut r = rng::rng_for(17, "mining");
    for _ in 0..draws / n {
        for (i, j) in mine_hard_negatives(sim, dir, tau, &mut r).unwrap().into_iter().enumerate() {
            counts[i][j] += 1;
        }
    }
    counts.iter().map(|c| c.iter().map(|&x| x as f64 / (draws / n) as f64).collect()).collect()
}

#[test]
fn mining_follows_similarity_weights() {
    // row 0 has one negative 10 above the rest
    let mut s = vec![0.0; 16];
    s[2] = 10.0;
    let f = frequencies(&t(&[4, 4], s), MiningDirection::TextForImage, 1.0, 400_000);
    assert!(f[0][2] >= 0.999, "{}", f[0][2]);
    let uniform = frequencies(&t(&[4, 4], vec![0.3; 16]), MiningDirection::ImageForText, 0.07, 400_000);
    for (i, row) in uniform.iter().enumerate() {
        assert_eq!(row[i], 0.0);
        for (j, p) in row.iter().enumerate().filter(|(j, _)| *j != i) {
            assert!((p - 1.0 / 3.0).abs() < 0.01, "{i},{j}: {p}");
        }
    }
    let two = frequencies(&t(&[2, 2], vec![1.0, -3.0, 5.0, 0.0]), MiningDirection::TextForImage, 0.5, 1000);
    assert_eq!(two, vec![vec![0.0, 1.0], vec![1.0, 0.0]]);
    assert!(mine_hard_negatives(&t(&[1, 1], vec![1.0]), MiningDirection::TextForImage, 1.0, &mut rng::rng_from(0)).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mining_never_returns_the_match(seed in any::<u64>(), n in 2usize..12) {
        let mut r = rng::rng_from(seed);
        let sim = t(&[n, n], rng::normal_vec(&mut r, n * n, 3.0));
        for dir in [MiningDirection::TextForImage, MiningDirection::ImageForText] {
            let picks = mine_hard_negatives(&sim, dir, 0.07, &mut r).unwrap();
            prop_assert!(picks.iter().enumerate().all(|(i, &j)| i != j && j < n));
        }
    }

    #[test]
    fn itc_is_invariant_to_pair_order(seed in any::<u64>(), n in 2usize..6) {
        let mut r = rng::rng_from(seed);
        let unit = |r: &mut rng::Rng| {
            let v = rng::normal_vec(r, 3, 1.0);
            let s = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / s).collect::<Vec<_>>()
        };
        let q: Vec<Vec<f64>> = (0..n * 2).map(|_| unit(&mut r)).collect();
        let txt: Vec<Vec<f64>> = (0..n).map(|_| unit(&mut r)).collect();
        let loss = |order: &[usize]| {
            let qd = order.iter().flat_map(|&i| q[2 * i].iter().chain(&q[2 * i + 1]).copied()).collect();
            let td = order.iter().flat_map(|&i| txt[i].clone()).collect();
            itc_loss(&ItcBatch::new(t(&[n, 2, 3], qd), t(&[n, 3], td), 0.1, 0.9).unwrap()).unwrap()
        };
        let fwd: Vec<usize> = (0..n).collect();
        let rev: Vec<usize> = (0..n).rev().collect();
        prop_assert!((loss(&fwd) - loss(&rev)).abs() < 1e-12);
    }
}
