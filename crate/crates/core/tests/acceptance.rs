//! Prints one PASS/FAIL line per primary acceptance criterion and exits
//! non-zero if any fails.
//!
//! Environment:
//! - `MASKGROUND_ACCEPTANCE_ONLY=4,5` runs a subset of criteria.
//! - `MASKGROUND_ACCEPTANCE_CACHE=<dir>` stores trained checkpoints keyed by
//!   their config so repeated runs skip training.

#[path = "common/oracles.rs"]
mod oracles;

use std::path::PathBuf;
use std::time::Instant;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use maskground::checkpoint::Checkpoint;
use maskground::data::{decode_rle, encode_rle, Sample};
use maskground::eval::{evaluate, EvalOptions};
use maskground::gradcheck::{self, GradcheckOptions};
use maskground::inference::pixel_logits;
use maskground::losses::{grounding_loss, image_caption_similarity, partitioned_grounding_loss};
use maskground::metrics::{miou, proposal_recall, RECALL_THRESHOLDS};
use maskground::model::{Model, ModelConfig};
use maskground::synth::{
    generate_scene, generate_scene_with, split_policies, ConceptSplit, SceneConfig, ShapeKind, TEST_STREAM,
    TRAIN_STREAM, VAL_STREAM,
};
use maskground::text::CategoryQueries;
use maskground::training::{init_state, train, StepRecord, TrainConfig, TrainOutputs, TrainState};

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn c1_gradients() -> Outcome {
    let t = Instant::now();
    let options = GradcheckOptions::default();
    let report = gradcheck::run(&options).map_err(|e| e.to_string())?;
    let secs = t.elapsed().as_secs_f64();
    let parts: Vec<String> = report
        .checks
        .iter()
        .map(|c| format!("{} {:.1e}", c.name, c.max_rel_error))
        .collect();
    let enough = report.checks.iter().all(|c| c.instances >= 20);
    check(
        report.passed() && enough && report.checks.len() == 5 && secs < 120.0,
        format!("{}; max {:.2e} < 1e-3; {secs:.1} s", parts.join(", "), report.max_rel_error()),
    )
}

fn c2_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut sim_err = 0.0f64;
    for _ in 0..100 {
        let (n, k, d) = (rng.random_range(1..=8), rng.random_range(1..=5), rng.random_range(1..=10));
        let z = oracles::random_matrix(&mut rng, n, d);
        let w = oracles::random_matrix(&mut rng, k, d);
        let tau = rng.random_range(0.05..2.0);
        let got = image_caption_similarity(z.view(), w.view(), tau).map_err(|e| e.to_string())?;
        sim_err = sim_err.max((got - oracles::oracle_similarity(&z, &w, tau)).abs());
    }
    let mut ground_err = 0.0f64;
    let mut part_err = 0.0f64;
    let mut part_one_zero = true;
    for _ in 0..100 {
        let b = rng.random_range(1..=6);
        let batch = oracles::random_batch(&mut rng, b);
        let full = grounding_loss(&batch).map_err(|e| e.to_string())?;
        ground_err = ground_err.max((full - oracles::oracle_grounding(&batch)).abs());
        let part = partitioned_grounding_loss(&batch, b).map_err(|e| e.to_string())?;
        part_err = part_err.max((part - full).abs());
        part_one_zero &= partitioned_grounding_loss(&batch, 1).map_err(|e| e.to_string())? == 0.0;
    }
    let mut pix_err = 0.0f64;
    for _ in 0..100 {
        let (k, n, h, w) = (
            rng.random_range(1..5),
            rng.random_range(1..6),
            rng.random_range(1..7),
            rng.random_range(1..7),
        );
        let rl = oracles::random_matrix(&mut rng, k, n);
        let s = Array3::from_shape_fn((n, h, w), |_| rng.random_range(0.0..1.0));
        let y = pixel_logits(rl.view(), s.view()).map_err(|e| e.to_string())?;
        let want = oracles::oracle_pixel_logits(&rl, &s);
        pix_err = pix_err.max((&y - &want).iter().fold(0.0f64, |m, d| m.max(d.abs())));
    }
    check(
        sim_err < 1e-9 && ground_err < 1e-9 && pix_err < 1e-12 && part_err < 1e-12 && part_one_zero,
        format!(
            "similarity {sim_err:.1e}, grounding {ground_err:.1e}, pixel logits {pix_err:.1e}, \
             partition=|B| {part_err:.1e}, partition=1 zero: {part_one_zero}"
        ),
    )
}

fn c3_metrics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3033);
    let mut gt_recall = true;
    let mut monotone = true;
    let mut unit_miou = true;
    for _ in 0..50 {
        let n = rng.random_range(1..=16);
        let gt = Array3::from_shape_fn((n, 16, 16), |_| u8::from(rng.random_bool(0.3)));
        gt_recall &= proposal_recall(gt.view(), gt.view(), &RECALL_THRESHOLDS).map_err(|e| e.to_string())? == vec![1.0; 3];
        let props = Array3::from_shape_fn((16, 16, 16), |_| u8::from(rng.random_bool(0.3)));
        let thresholds: Vec<f64> = (0..=20).map(|i| i as f64 / 20.0).collect();
        let r = proposal_recall(props.view(), gt.view(), &thresholds).map_err(|e| e.to_string())?;
        monotone &= r.windows(2).all(|w| w[0] >= w[1]);
        let k = rng.random_range(1..6u32);
        let labels = Array2::from_shape_fn((12, 12), |_| rng.random_range(0..k));
        unit_miou &= miou([(labels.view(), labels.view())], k as usize).map_err(|e| e.to_string())? == 1.0;
    }
    let mut rle_ok = true;
    for _ in 0..1000 {
        let (h, w) = (rng.random_range(1..24), rng.random_range(1..24));
        let p = rng.random_range(0.0..1.0);
        let m = Array2::from_shape_fn((h, w), |_| u8::from(rng.random_bool(p)));
        let rle = encode_rle(m.view()).map_err(|e| e.to_string())?;
        rle_ok &= decode_rle(&rle).map_err(|e| e.to_string())? == m;
    }
    check(
        gt_recall && monotone && unit_miou && rle_ok,
        format!(
            "gt-as-proposals recall 1.0 at 0.5/0.7/0.9: {gt_recall}; recall monotone: {monotone}; \
             pred=gt mIoU 1.0: {unit_miou}; RLE round-trip x1000: {rle_ok}"
        ),
    )
}

/// Scene data and evaluation queries shared by criteria 4 to 7.
struct DeskScale {
    train: Vec<Sample>,
    val: Vec<Sample>,
    test: Vec<Sample>,
    queries: CategoryQueries,
}

impl DeskScale {
    fn new() -> Self {
        let scene = SceneConfig::default();
        let split = ConceptSplit {
            holdout_pairs: vec![("red".to_string(), ShapeKind::Circle)],
        };
        let (seen, unseen) = split_policies(&split);
        let gen = |n: u64, stream: u64, policy| -> Vec<Sample> {
            (0..n)
                .map(|i| generate_scene_with(&scene, i, stream, policy).expect("scene"))
                .collect()
        };
        Self {
            train: gen(3000, TRAIN_STREAM, &seen),
            val: gen(500, VAL_STREAM, &seen),
            test: gen(200, TEST_STREAM, &unseen),
            queries: CategoryQueries::from_names(&scene.category_names()).expect("queries"),
        }
    }
}

#[derive(Clone, Debug)]
struct RunMetrics {
    val_miou: f64,
    val_per_pixel_miou: f64,
    test_grounding_miou: f64,
    minutes: f64,
    cached: bool,
}

fn cache_dir() -> Option<PathBuf> {
    std::env::var_os("MASKGROUND_ACCEPTANCE_CACHE").map(PathBuf::from)
}

fn trained_model(name: &str, config: &TrainConfig, data: &DeskScale) -> Result<(Model, f64, bool), String> {
    let key = {
        let json = serde_json::to_vec(config).map_err(|e| e.to_string())?;
        let digest = Sha256::digest(&json);
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect::<String>()
    };
    let cached = cache_dir().map(|d| d.join(format!("{name}-{key}.ckpt")));
    if let Some(path) = &cached {
        if path.is_file() {
            return Ok((Checkpoint::load(path).map_err(|e| e.to_string())?.model, 0.0, true));
        }
    }
    let t = Instant::now();
    let datasets = vec![data.train.clone()];
    let names: Vec<String> = data.queries.names().iter().map(|s| s.to_string()).collect();
    let mut state = init_state(config, &datasets, &names).map_err(|e| e.to_string())?;
    train(&mut state, config, &datasets, &TrainOutputs::default(), None, |_| {}).map_err(|e| e.to_string())?;
    if let Some(path) = &cached {
        std::fs::create_dir_all(path.parent().expect("parent")).map_err(|e| e.to_string())?;
        state.to_checkpoint(config).and_then(|c| c.save(path)).map_err(|e| e.to_string())?;
    }
    Ok((state.model, t.elapsed().as_secs_f64() / 60.0, false))
}

fn run_metrics(name: &str, config: &TrainConfig, data: &DeskScale) -> Result<RunMetrics, String> {
    let (model, minutes, cached) = trained_model(name, config, data)?;
    let val = evaluate(
        &model,
        &data.val,
        &data.queries,
        0,
        &EvalOptions {
            per_pixel: true,
            ..Default::default()
        },
    )
    .map_err(|e| e.to_string())?;
    let test = evaluate(
        &model,
        &data.test,
        &data.queries,
        0,
        &EvalOptions {
            semantic: false,
            grounding: true,
            ..Default::default()
        },
    )
    .map_err(|e| e.to_string())?;
    Ok(RunMetrics {
        val_miou: val.report.miou.unwrap_or(0.0),
        val_per_pixel_miou: val.report.per_pixel_miou.unwrap_or(0.0),
        test_grounding_miou: test.report.grounding_miou.unwrap_or(0.0),
        minutes,
        cached,
    })
}

fn timing(m: &RunMetrics) -> String {
    if m.cached {
        "cached checkpoint".into()
    } else {
        format!("trained in {:.1} min", m.minutes)
    }
}

fn c4(main: &RunMetrics) -> Outcome {
    check(
        main.val_miou >= 0.50 && main.test_grounding_miou >= 0.55,
        format!(
            "val mIoU {:.3} (>= 0.50), held-out grounding mIoU {:.3} (>= 0.55); {}",
            main.val_miou,
            main.test_grounding_miou,
            timing(main)
        ),
    )
}

fn c5(main: &RunMetrics) -> Outcome {
    let margin = main.val_miou - main.val_per_pixel_miou;
    check(
        margin > 0.0,
        format!(
            "mask-based mIoU {:.3} vs per-pixel mIoU {:.3} (margin {margin:+.3})",
            main.val_miou, main.val_per_pixel_miou
        ),
    )
}

fn c6(main: &RunMetrics, alpha0: &RunMetrics) -> Outcome {
    let drop = 1.0 - alpha0.val_miou / main.val_miou;
    check(
        drop >= 0.30,
        format!(
            "val mIoU {:.3} at alpha=1 vs {:.3} at alpha=0: relative drop {:.1}% (>= 30%); {}",
            main.val_miou,
            alpha0.val_miou,
            drop * 100.0,
            timing(alpha0)
        ),
    )
}

fn c7(main: &RunMetrics, kp1: &RunMetrics) -> Outcome {
    let diff = main.test_grounding_miou - kp1.test_grounding_miou;
    check(
        diff >= -0.02,
        format!(
            "grounding mIoU {:.3} at kp=0.5 vs {:.3} at kp=1.0 (difference {diff:+.3}, needs >= -0.02{}); {}",
            main.test_grounding_miou,
            kp1.test_grounding_miou,
            if diff > 0.0 { ", strict improvement" } else { "" },
            timing(kp1)
        ),
    )
}

fn c8_determinism() -> Outcome {
    let model = ModelConfig {
        num_queries: 8,
        dim: 32,
        fused_dim: 32,
        stem_channels: 8,
        stage_channels: [16, 32, 32, 32],
        blocks: 2,
        heads: 2,
        ..ModelConfig::default()
    };
    let config = TrainConfig {
        steps: 12,
        batch_size: 4,
        warmup_steps: 2,
        model,
        ..Default::default()
    };
    let data = vec![(0..24).map(|i| generate_scene(&SceneConfig::default(), i).expect("scene")).collect::<Vec<_>>()];
    let run = |outputs: &TrainOutputs| -> Result<(Vec<u8>, Vec<StepRecord>), String> {
        let mut st = init_state(&config, &data, &[]).map_err(|e| e.to_string())?;
        let mut recs = Vec::new();
        train(&mut st, &config, &data, outputs, None, |r| recs.push(r.clone())).map_err(|e| e.to_string())?;
        let bytes = st.to_checkpoint(&config).and_then(|c| c.to_bytes()).map_err(|e| e.to_string())?;
        Ok((bytes, recs))
    };
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (a, full) = run(&TrainOutputs {
        checkpoint_dir: Some(dir.path().to_path_buf()),
        checkpoint_every: 6,
        ..Default::default()
    })?;
    let (b, _) = run(&TrainOutputs::default())?;
    let identical = a == b;

    let ck = Checkpoint::load(&dir.path().join("step-000006.ckpt")).map_err(|e| e.to_string())?;
    let mut resumed = TrainState::from_checkpoint(ck);
    let mut rest = Vec::new();
    train(&mut resumed, &config, &data, &TrainOutputs::default(), None, |r| rest.push(r.clone()))
        .map_err(|e| e.to_string())?;
    let mut max_diff = 0.0f64;
    for (x, y) in full[6..].iter().zip(&rest) {
        let pairs = [
            (Some(x.loss), Some(y.loss)),
            (x.l_g, y.l_g),
            (x.l_s, y.l_s),
        ];
        for (p, q) in pairs {
            match (p, q) {
                (Some(p), Some(q)) => max_diff = max_diff.max((p - q).abs()),
                (None, None) => {}
                _ => max_diff = f64::INFINITY,
            }
        }
    }
    let resumed_bytes = resumed.to_checkpoint(&config).and_then(|c| c.to_bytes()).map_err(|e| e.to_string())?;
    check(
        identical && rest.len() == 6 && max_diff < 1e-6 && resumed_bytes == a,
        format!(
            "two runs bit-identical: {identical}; resume from step 6: max loss difference {max_diff:.1e} (< 1e-6), \
             final checkpoint identical: {}",
            resumed_bytes == a
        ),
    )
}

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    std::panic::catch_unwind(std::panic::AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    })
}

fn main() {
    let only: Option<Vec<usize>> = std::env::var("MASKGROUND_ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|v| v.trim().parse().ok()).collect());
    let wanted = |c: usize| only.as_ref().is_none_or(|o| o.contains(&c));
    let mut failed = 0;
    let mut report = |n: usize, title: &str, outcome: Outcome| {
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("criterion {n} {tag}: {title}: {detail}");
    };

    if wanted(1) {
        report(1, "gradient suite", guarded(c1_gradients));
    }
    if wanted(2) {
        report(2, "oracle equivalence", guarded(c2_oracles));
    }
    if wanted(3) {
        report(3, "metric invariants", guarded(c3_metrics));
    }
    if (4..=7).any(wanted) {
        let data = DeskScale::new();
        let base = TrainConfig::default();
        let failed_run = |e: String| format!("training failed: {e}");
        let main_run = run_metrics("main", &base, &data).map_err(failed_run);
        if wanted(4) {
            report(4, "desk-scale training", main_run.clone().and_then(|m| c4(&m)));
        }
        if wanted(5) {
            report(5, "masks beat per-pixel inference", main_run.clone().and_then(|m| c5(&m)));
        }
        if wanted(6) {
            let alpha0 = run_metrics("alpha0", &TrainConfig { alpha: 0.0, ..base.clone() }, &data).map_err(failed_run);
            let r = main_run.clone().and_then(|m| alpha0.and_then(|a| c6(&m, &a)));
            report(6, "grounding loss alone is insufficient", r);
        }
        if wanted(7) {
            let kp1 = run_metrics("kp1", &TrainConfig { keep_prob: 1.0, ..base.clone() }, &data).map_err(failed_run);
            let r = main_run.clone().and_then(|m| kp1.and_then(|k| c7(&m, &k)));
            report(7, "word dropping is non-inferior", r);
        }
    }
    if wanted(8) {
        report(8, "determinism and resume", guarded(c8_determinism));
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
