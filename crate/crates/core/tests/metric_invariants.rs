use ndarray::{Array2, Array3, Axis};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use maskground::data::{decode_rle, encode_rle};
use maskground::losses::dice;
use maskground::metrics::*;

fn random_masks(rng: &mut impl Rng, n: usize, h: usize, w: usize, p: f64) -> Array3<u8> {
    Array3::from_shape_fn((n, h, w), |_| u8::from(rng.random_bool(p)))
}

#[test]
fn ground_truth_as_proposals_recalls_everything() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..20 {
        let n = rng.random_range(1..=16);
        let gt = random_masks(&mut rng, n, 16, 16, 0.3);
        let r = proposal_recall(gt.view(), gt.view(), &RECALL_THRESHOLDS).unwrap();
        assert_eq!(r, vec![1.0; 3]);
        // Padding to 16 proposals with noise keeps recall at 1.
        let extra = random_masks(&mut rng, 16 - gt.len_of(Axis(0)) + 1, 16, 16, 0.5);
        let props = ndarray::concatenate![Axis(0), extra, gt];
        assert_eq!(proposal_recall(props.view(), gt.view(), &RECALL_THRESHOLDS).unwrap(), vec![1.0; 3]);
    }
}

#[test]
fn disjoint_proposals_recall_nothing() {
    let mut gt = Array3::<u8>::zeros((2, 4, 4));
    gt.slice_mut(ndarray::s![0, 0..2, ..]).fill(1);
    gt.slice_mut(ndarray::s![1, 2, ..]).fill(1);
    let mut p = Array3::<u8>::zeros((1, 4, 4));
    p.slice_mut(ndarray::s![0, 3, ..]).fill(1);
    assert_eq!(proposal_recall(p.view(), gt.view(), &RECALL_THRESHOLDS).unwrap(), vec![0.0; 3]);
}

#[test]
fn prediction_equal_to_ground_truth_gives_unit_miou() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let maps: Vec<Array2<u32>> = (0..10).map(|_| Array2::from_shape_fn((8, 8), |_| rng.random_range(0..5))).collect();
    assert_eq!(miou(maps.iter().map(|m| (m.view(), m.view())), 5).unwrap(), 1.0);
}

#[test]
fn grounding_equals_miou_when_all_categories_present() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let k = 3;
    let gts: Vec<Array2<u32>> = (0..6)
        .map(|_| {
            let mut m = Array2::from_shape_fn((6, 6), |_| rng.random_range(0..k as u32));
            m[(0, 0)] = 0;
            m[(0, 1)] = 1;
            m[(0, 2)] = 2;
            m
        })
        .collect();
    let preds: Vec<Array2<u32>> = gts
        .iter()
        .map(|g| g.mapv(|l| if rng.random_bool(0.3) { (l + 1) % k as u32 } else { l }))
        .collect();
    let full = miou(preds.iter().zip(&gts).map(|(p, g)| (p.view(), g.view())), k).unwrap();
    let items: Vec<GroundingItem> = gts.iter().map(|g| GroundingItem { gt: g.clone(), categories: vec![0, 1, 2] }).collect();
    let acc = grounding_miou(&items, k, |i, cats| {
        assert_eq!(cats, &[0, 1, 2]);
        Ok(preds[i].clone())
    })
    .unwrap();
    assert!((acc.miou().unwrap() - full).abs() < 1e-15);
}

#[test]
fn grounding_excluding_a_confuser_helps() {
    // Full-query run labels the object as category 2; restricted to the
    // image's own categories {0, 1} it can only choose among those.
    let gt = ndarray::array![[0u32, 1, 1], [0, 1, 1]];
    let scores = |cats: &[usize]| {
        let logit = |c: usize| [0.1f64, 0.5, 0.9][c];
        gt.mapv(|l| {
            if l == 0 {
                0
            } else {
                *cats.iter().max_by(|a, b| logit(**a).total_cmp(&logit(**b))).unwrap() as u32
            }
        })
    };
    let full = miou([(scores(&[0, 1, 2]).view(), gt.view())], 3).unwrap();
    let items = vec![GroundingItem { gt: gt.clone(), categories: vec![0, 1] }];
    let g = grounding_miou(&items, 3, |_, cats| Ok(scores(cats))).unwrap().miou().unwrap();
    assert!(g >= full);
    assert_eq!(g, 1.0);
}

#[test]
fn rle_round_trips_1000_random_masks() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    for _ in 0..1000 {
        let (h, w) = (rng.random_range(1..20), rng.random_range(1..20));
        let p = rng.random_range(0.0..1.0);
        let m = Array2::from_shape_fn((h, w), |_| u8::from(rng.random_bool(p)));
        let rle = encode_rle(m.view()).unwrap();
        assert_eq!(rle.area(), m.iter().map(|&v| u64::from(v)).sum::<u64>());
        assert_eq!(decode_rle(&rle).unwrap(), m);
    }
}

proptest! {
    #[test]
    fn iou_never_exceeds_dice(a in prop::collection::vec(0u8..2, 30), b in prop::collection::vec(0u8..2, 30)) {
        let a = Array2::from_shape_vec((5, 6), a).unwrap();
        let b = Array2::from_shape_vec((5, 6), b).unwrap();
        let iou = mask_iou(a.view(), b.view()).unwrap();
        let af = a.mapv(f64::from).into_dyn();
        let bf = b.mapv(f64::from).into_dyn();
        let d = dice(af.view(), bf.view()).unwrap();
        // Both empty: IoU is 1 by convention while Dice is 0.
        if a.iter().any(|&v| v == 1) || b.iter().any(|&v| v == 1) {
            prop_assert!(iou <= d + 1e-9);
        }
    }

    #[test]
    fn recall_is_monotone_in_threshold(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_masks(&mut rng, 5, 8, 8, 0.4);
        let g = random_masks(&mut rng, 3, 8, 8, 0.4);
        let ts: Vec<f64> = (0..=20).map(|i| i as f64 / 20.0).collect();
        let r = proposal_recall(p.view(), g.view(), &ts).unwrap();
        prop_assert!(r.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn miou_bounded_and_label_permutation_invariant(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = 4;
        let pred = Array2::from_shape_fn((6, 6), |_| rng.random_range(0..k));
        let gt = Array2::from_shape_fn((6, 6), |_| rng.random_range(0..k));
        let perm = [2u32, 0, 3, 1];
        let a = miou([(pred.view(), gt.view())], k as usize).unwrap();
        let pp = pred.mapv(|l| perm[l as usize]);
        let gp = gt.mapv(|l| perm[l as usize]);
        let b = miou([(pp.view(), gp.view())], k as usize).unwrap();
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn accumulators_merge_associatively(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let maps: Vec<(Array2<u32>, Array2<u32>)> = (0..4)
            .map(|_| (Array2::from_shape_fn((4, 4), |_| rng.random_range(0..3)), Array2::from_shape_fn((4, 4), |_| rng.random_range(0..3))))
            .collect();
        let mut whole = ConfusionAccumulator::new(3);
        for (p, g) in &maps { whole.add(p.view(), g.view()).unwrap(); }
        let mut left = ConfusionAccumulator::new(3);
        let mut right = ConfusionAccumulator::new(3);
        for (p, g) in &maps[..2] { left.add(p.view(), g.view()).unwrap(); }
        for (p, g) in &maps[2..] { right.add(p.view(), g.view()).unwrap(); }
        left.merge(&right).unwrap();
        prop_assert_eq!(left, whole);
    }
}
