use ndarray::{Array2, Array3, Axis};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use maskground::inference::*;
use maskground::model::pool_region_features;

fn random3(rng: &mut impl Rng, d: (usize, usize, usize), lo: f64, hi: f64) -> Array3<f64> {
    Array3::from_shape_fn(d, |_| rng.random_range(lo..hi))
}

fn random2(rng: &mut impl Rng, d: (usize, usize)) -> Array2<f64> {
    Array2::from_shape_fn(d, |_| rng.random_range(-1.0..1.0))
}

#[test]
fn pixel_logits_match_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..50 {
        let (k, n, h, w) = (rng.random_range(1..5), rng.random_range(1..6), rng.random_range(1..7), rng.random_range(1..7));
        let rl = random2(&mut rng, (k, n));
        let s = random3(&mut rng, (n, h, w), 0.0, 1.0);
        let y = pixel_logits(rl.view(), s.view()).unwrap();
        for kk in 0..k {
            for i in 0..h {
                for j in 0..w {
                    let mut acc = 0.0;
                    for nn in 0..n {
                        acc += rl[(kk, nn)] * s[(nn, i, j)];
                    }
                    assert!((y[(kk, i, j)] - acc).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn region_logits_are_cosines_and_scale_free() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let w = random2(&mut rng, (3, 5));
    let mut z = random2(&mut rng, (4, 5));
    let base = region_logits(w.view(), z.view()).unwrap();
    assert!(base.iter().all(|v| (-1.0..=1.0).contains(v)));
    z.row_mut(2).mapv_inplace(|v| v * 7.3);
    let scaled = region_logits(w.view(), z.view()).unwrap();
    assert!((&base - &scaled).iter().all(|d| d.abs() < 1e-9));
    let perp = region_logits(ndarray::array![[1.0, 0.0]].view(), ndarray::array![[0.0, 2.0]].view()).unwrap();
    assert_eq!(perp[(0, 0)], 0.0);
}

#[test]
fn per_pixel_predict_equals_argmax_of_pixel_cosines() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..20 {
        let f = random3(&mut rng, (5, 6, 4), -1.0, 1.0);
        let w = random2(&mut rng, (3, 4));
        let got = per_pixel_predict(f.view(), w.view()).unwrap();
        for i in 0..5 {
            for j in 0..6 {
                let v = f.slice(ndarray::s![i, j, ..]).to_owned();
                let cos: Vec<f64> = w
                    .rows()
                    .into_iter()
                    .map(|r| r.dot(&v) / (r.dot(&r).sqrt() * v.iter().map(|x| x * x).sum::<f64>().sqrt()))
                    .collect();
                let best = (0..3).fold(0, |b, c| if cos[c] > cos[b] { c } else { b });
                assert_eq!(got[(i, j)], best as u32);
            }
        }
    }
    let constant = Array3::from_shape_fn((3, 3, 2), |(_, _, c)| c as f64 + 1.0);
    let w = random2(&mut rng, (4, 2));
    let lm = per_pixel_predict(constant.view(), w.view()).unwrap();
    assert!(lm.iter().all(|&l| l == lm[(0, 0)]));
    let single = per_pixel_predict(constant.view(), w.slice(ndarray::s![0..1, ..])).unwrap();
    assert!(single.iter().all(|&l| l == 0));
}

#[test]
fn classified_proposals_aggregate_like_predict() {
    // Hard one-hot masks: each pixel belongs to exactly one proposal, so the
    // pixel argmax is the proposal's own best query.
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..20 {
        let (n, h, w) = (4, 5, 5);
        let owner = Array2::from_shape_fn((h, w), |_| rng.random_range(0..n));
        let s = Array3::from_shape_fn((n, h, w), |(k, i, j)| f64::from(owner[(i, j)] == k));
        let z = random2(&mut rng, (n, 6));
        let q = random2(&mut rng, (3, 6));
        let labels = classify_proposals(z.view(), q.view()).unwrap();
        let rl = region_logits(q.view(), z.view()).unwrap();
        let lm = predict(pixel_logits(rl.view(), s.view()).unwrap().view()).unwrap();
        for ((i, j), &o) in owner.indexed_iter() {
            assert_eq!(lm[(i, j)] as usize, labels[o].0);
        }
    }
    let z = ndarray::array![[0.3, 0.4]];
    let c = classify_proposals(z.view(), z.view()).unwrap();
    assert_eq!(c[0].0, 0);
    assert!((c[0].1 - 1.0).abs() < 1e-12);
}

#[test]
fn background_rule_examples() {
    let lm = ndarray::array![[0u32, 1, 2], [2, 1, 0]];
    assert_eq!(apply_background_rule(lm.view(), &[0, 1, 2], 3, 0).unwrap(), lm);
    assert!(apply_background_rule(lm.view(), &[], 3, 0).unwrap().iter().all(|&l| l == 0));
    let flipped = apply_background_rule(lm.view(), &[0, 1], 3, 0).unwrap();
    assert_eq!(flipped, ndarray::array![[0u32, 1, 0], [0, 1, 0]]);
    assert_eq!(apply_background_rule(flipped.view(), &[0, 1], 3, 0).unwrap(), flipped);
    assert!(apply_background_rule(lm.view(), &[5], 3, 0).is_err());
}

#[test]
fn predict_ties_and_single_category() {
    let y = Array3::from_elem((3, 2, 2), 0.5);
    assert!(predict(y.view()).unwrap().iter().all(|&l| l == 0));
    let one = Array3::from_shape_fn((1, 2, 2), |(_, i, j)| (i + j) as f64);
    assert!(predict(one.view()).unwrap().iter().all(|&l| l == 0));
}

#[test]
fn upsampling_repeats_blocks() {
    let lm = ndarray::array![[1u32, 2], [3, 4]];
    let up = upsample_labels(lm.view(), 2);
    assert_eq!(up.dim(), (4, 4));
    assert_eq!(up[(1, 1)], 1);
    assert_eq!(up[(3, 2)], 4);
}

proptest! {
    #[test]
    fn predict_is_affine_invariant(seed in any::<u64>(), c in 0.01f64..100.0, d in -10.0f64..10.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y = random3(&mut rng, (4, 3, 3), -1.0, 1.0);
        prop_assert_eq!(predict(y.view()).unwrap(), predict(y.mapv(|v| c * v + d).view()).unwrap());
    }

    #[test]
    fn singleton_ensemble_is_identity(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y = random3(&mut rng, (3, 2, 4), -1.0, 1.0);
        prop_assert_eq!(ensemble_reduce(y.view(), &[0, 1, 2], 3).unwrap(), y.clone());
        let doubled = ndarray::concatenate![Axis(0), y, y];
        prop_assert_eq!(ensemble_reduce(doubled.view(), &[0, 1, 2, 0, 1, 2], 3).unwrap(), y);
    }

    #[test]
    fn scaling_masks_keeps_full_pipeline_argmax(seed in any::<u64>(), c in 0.05f64..20.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = random3(&mut rng, (4, 3, 3), 0.01, 1.0);
        let f = random3(&mut rng, (3, 3, 5), -1.0, 1.0);
        let w = random2(&mut rng, (3, 5));
        let run = |s: &Array3<f64>| {
            let z = pool_region_features(s.view(), f.view()).unwrap();
            let rl = region_logits(w.view(), z.view()).unwrap();
            predict(pixel_logits(rl.view(), s.view()).unwrap().view()).unwrap()
        };
        prop_assert_eq!(run(&s), run(&s.mapv(|v| v * c)));
    }
}
