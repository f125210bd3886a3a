//! Command implementations behind the `maskground` binary.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use maskground::checkpoint::{load_with_id, Checkpoint};
use maskground::data::{load_all, load_dataset, read_png, Sample};
use maskground::eval::{evaluate, EvalOptions};
use maskground::gradcheck::{self, GradcheckOptions};
use maskground::metrics::{best_ious, EvalReport};
use maskground::model::{Model, FEATURE_STRIDE};
use maskground::synth::{split_zero_shot, ConceptSplit, SceneConfig, ShapeKind, BACKGROUND};
use maskground::text::CategoryQueries;
use maskground::training::{
    check_teacher, init_state, pseudo_label, train, PseudoLabelOptions, TrainConfig, TrainOutputs, TrainState,
};

use crate::api::{parse_query_list, Limits, ModelContext, SegmentOptions};
use crate::imaging::{encode_png, overlay};
use crate::service::{self, DEFAULT_MAX_BODY_BYTES, DEFAULT_PORT, PORT_ENV};

#[derive(Debug, Parser)]
#[command(name = "maskground", version, about = "Open-vocabulary segmentation with mask proposals and region-word grounding")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic train/val/test splits with held-out colour-shape pairs.
    GenData(GenDataArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Replace dataset masks with a mask-only teacher's proposals.
    PseudoLabel(PseudoLabelArgs),
    /// Evaluate mIoU, per-pixel mIoU, grounding mIoU or proposal recall.
    Eval(EvalArgs),
    /// Segment one image against text queries.
    Segment(SegmentArgs),
    /// Compare analytic and finite-difference gradients of the losses.
    Gradcheck(GradcheckArgs),
    /// Run the HTTP inference service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Scene generator settings (TOML).
    #[arg(long)]
    pub scene_config: Option<PathBuf>,
    #[arg(long, default_value_t = 3000)]
    pub n_train: usize,
    #[arg(long, default_value_t = 500)]
    pub n_val: usize,
    #[arg(long, default_value_t = 200)]
    pub n_test: usize,
    /// Held-out pair such as "red circle"; repeatable.
    #[arg(long, default_values_t = vec!["red circle".to_string()])]
    pub holdout: Vec<String>,
    /// Hold out nothing.
    #[arg(long, conflicts_with = "holdout")]
    pub no_holdout: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training settings (TOML); defaults apply to missing keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset directory; repeat to mix datasets with equal probability.
    #[arg(long, required = true)]
    pub data: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Validation dataset scored by semantic mIoU.
    #[arg(long)]
    pub val: Option<PathBuf>,
    #[arg(long, default_value_t = 500)]
    pub validate_every: u64,
    #[arg(long, default_value_t = 500)]
    pub checkpoint_every: u64,
    /// Continue from a checkpoint written by this command.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Scene settings whose category names join the vocabulary and the
    /// validation queries.
    #[arg(long)]
    pub scene_config: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub keep_prob: Option<f64>,
    #[arg(long)]
    pub grounding_weight: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct PseudoLabelArgs {
    /// Checkpoint trained with grounding weight 0.
    #[arg(long)]
    pub teacher: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    #[arg(long, default_value_t = 0.9)]
    pub dedup_iou: f64,
    #[arg(long, default_value_t = 0.8)]
    pub recall_floor: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Metric {
    Miou,
    PerPixel,
    Grounding,
    Recall,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Repeatable; defaults to `miou`.
    #[arg(long, value_enum)]
    pub metric: Vec<Metric>,
    /// `checkpoint` for model proposals, or a dataset directory whose masks
    /// serve as proposals (matched by sample id).
    #[arg(long, default_value = "checkpoint")]
    pub proposals_from: String,
    /// Comma-separated category names; defaults to the scene categories.
    #[arg(long)]
    pub categories: Option<String>,
    #[arg(long)]
    pub scene_config: Option<PathBuf>,
    /// Category assigned to pixels outside every mask.
    #[arg(long, default_value = BACKGROUND)]
    pub background: String,
    /// Also write the report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SegmentArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    /// Categories separated by commas; alternative phrases by `|`.
    #[arg(long)]
    pub queries: String,
    /// Apply the background rule with these foreground categories.
    #[arg(long)]
    pub fg_categories: Option<String>,
    #[arg(long)]
    pub background_category: Option<String>,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
    /// Reject images whose sides are not multiples of 32.
    #[arg(long)]
    pub strict_size: bool,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 20)]
    pub instances: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-3)]
    pub tolerance: f64,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, env = PORT_ENV, default_value_t = DEFAULT_PORT)]
    pub port: u16,
    #[arg(long, default_value_t = DEFAULT_MAX_BODY_BYTES)]
    pub max_body_bytes: usize,
    #[arg(long, default_value_t = Limits::default().max_side)]
    pub max_side: usize,
    #[arg(long)]
    pub strict_size: bool,
}

/// Runs a parsed command. `Ok(false)` means the command ran but its check
/// failed.
pub fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenData(a) => gen_data(a).map(|_| true),
        Command::Train(a) => train_cmd(a).map(|_| true),
        Command::PseudoLabel(a) => pseudo_label_cmd(a).map(|_| true),
        Command::Eval(a) => eval_cmd(a).map(|_| true),
        Command::Segment(a) => segment_cmd(a).map(|_| true),
        Command::Gradcheck(a) => gradcheck_cmd(a),
        Command::Serve(a) => serve_cmd(a).map(|_| true),
    }
}

fn scene_config(path: Option<&Path>) -> Result<SceneConfig> {
    match path {
        Some(p) => SceneConfig::load(p).with_context(|| format!("loading {}", p.display())),
        None => Ok(SceneConfig::default()),
    }
}

/// Parses `"red circle"` into a colour and a shape.
pub fn parse_pair(text: &str) -> Result<(String, ShapeKind)> {
    let words: Vec<&str> = text.split_whitespace().collect();
    let [color, shape] = words[..] else {
        bail!("held-out pair `{text}` must be `<colour> <shape>`");
    };
    let shape: ShapeKind = serde_json::from_value(serde_json::Value::String(shape.to_lowercase()))
        .map_err(|_| anyhow!("unknown shape `{shape}` in `{text}`"))?;
    Ok((color.to_lowercase(), shape))
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let config = scene_config(a.scene_config.as_deref())?;
    let holdout_pairs = if a.no_holdout {
        Vec::new()
    } else {
        a.holdout.iter().map(|p| parse_pair(p)).collect::<Result<_>>()?
    };
    let split = ConceptSplit { holdout_pairs };
    let dirs = split_zero_shot(&config, &split, a.n_train, a.n_val, a.n_test, &a.out)?;
    let meta = serde_json::json!({ "scene": config, "split": split });
    let meta_path = a.out.join("split.json");
    fs::write(&meta_path, serde_json::to_string_pretty(&meta)?)?;
    for p in [&dirs.train, &dirs.val, &dirs.test, &meta_path] {
        println!("{}", p.display());
    }
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let mut config = match &a.config {
        Some(p) => TrainConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => TrainConfig::default(),
    };
    if let Some(v) = a.steps {
        config.steps = v;
    }
    if let Some(v) = a.alpha {
        config.alpha = v;
    }
    if let Some(v) = a.keep_prob {
        config.keep_prob = v;
    }
    if let Some(v) = a.grounding_weight {
        config.grounding_weight = v;
    }
    if let Some(v) = a.lr {
        config.lr = v;
    }
    if let Some(v) = a.seed {
        config.seed = v;
    }
    config.validate()?;
    let scene = scene_config(a.scene_config.as_deref())?;
    let names = scene.category_names();
    let datasets = a
        .data
        .iter()
        .map(|d| load_all(d, FEATURE_STRIDE).with_context(|| format!("loading {}", d.display())))
        .collect::<Result<Vec<_>>>()?;
    let mut state = match &a.resume {
        Some(p) => TrainState::from_checkpoint(Checkpoint::load(p)?),
        None => init_state(&config, &datasets, &names)?,
    };
    let ckpt_dir = a.out.join("checkpoints");
    fs::create_dir_all(&ckpt_dir)?;
    let outputs = TrainOutputs {
        log: Some(a.out.join("train.ndjson")),
        checkpoint_dir: Some(ckpt_dir.clone()),
        checkpoint_every: a.checkpoint_every,
        validate_every: a.validate_every,
    };
    let val = a.val.as_ref().map(|d| load_all(d, FEATURE_STRIDE)).transpose()?;
    let queries = CategoryQueries::from_names(&names)?;
    let background = names.iter().position(|n| n == BACKGROUND).unwrap_or(0);
    let mut validate = |m: &Model| -> maskground::Result<f64> {
        let samples = val.as_deref().unwrap_or(&[]);
        let r = evaluate(m, samples, &queries, background, &EvalOptions::default())?;
        Ok(r.report.miou.unwrap_or(0.0))
    };
    let v: Option<&mut dyn FnMut(&Model) -> maskground::Result<f64>> =
        if val.is_some() { Some(&mut validate) } else { None };
    train(&mut state, &config, &datasets, &outputs, v, |r| {
        if r.step % 50 == 0 {
            log::info!("step {} l_g {:?} l_s {:?} tau {:.4} lr {:.5}", r.step, r.l_g, r.l_s, r.tau, r.lr);
        }
    })?;
    let final_path = a.out.join("final.ckpt");
    let id = state.to_checkpoint(&config)?.save(&final_path)?;
    println!("{}", final_path.display());
    println!("{}", a.out.join("train.ndjson").display());
    println!("{}", ckpt_dir.display());
    log::info!("model id {id}");
    Ok(())
}

fn pseudo_label_cmd(a: PseudoLabelArgs) -> Result<()> {
    let teacher = Checkpoint::load(&a.teacher)?;
    check_teacher(&teacher)?;
    let samples = load_dataset(&a.data, FEATURE_STRIDE)?;
    let options = PseudoLabelOptions {
        threshold: a.threshold,
        dedup_iou: a.dedup_iou,
        recall_floor: a.recall_floor,
    };
    let report = pseudo_label(&teacher.model, samples, &a.out, &options)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    println!("{}", a.out.display());
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let metrics = if a.metric.is_empty() { vec![Metric::Miou] } else { a.metric.clone() };
    let names: Vec<String> = match &a.categories {
        Some(c) => c.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect(),
        None => scene_config(a.scene_config.as_deref())?.category_names(),
    };
    let samples = load_all(&a.dataset, FEATURE_STRIDE)?;
    let needs_model = metrics.iter().any(|m| *m != Metric::Recall) || a.proposals_from == "checkpoint";
    let model = if needs_model {
        let p = a.checkpoint.as_ref().ok_or_else(|| anyhow!("--checkpoint is required for these metrics"))?;
        Some(Checkpoint::load(p)?.model)
    } else {
        None
    };

    let mut report = EvalReport {
        images: samples.len(),
        ..Default::default()
    };
    let semantic = metrics.iter().any(|m| *m != Metric::Recall);
    let model_recall = metrics.contains(&Metric::Recall) && a.proposals_from == "checkpoint";
    if semantic || model_recall {
        let model = model.as_ref().expect("loaded above");
        let background = names
            .iter()
            .position(|n| *n == a.background)
            .ok_or_else(|| anyhow!("background category `{}` is not among the categories", a.background))?;
        let queries = CategoryQueries::from_names(&names)?;
        let options = EvalOptions {
            semantic: metrics.contains(&Metric::Miou),
            per_pixel: metrics.contains(&Metric::PerPixel),
            grounding: metrics.contains(&Metric::Grounding),
            recall: model_recall,
            ..Default::default()
        };
        report = evaluate(model, &samples, &queries, background, &options)?.report;
    }
    if metrics.contains(&Metric::Recall) && a.proposals_from != "checkpoint" {
        report.set_recall(&recall_from_dataset(&samples, Path::new(&a.proposals_from))?);
    }
    let text = serde_json::to_string_pretty(&report)?;
    println!("{text}");
    if let Some(out) = &a.out {
        fs::write(out, &text)?;
        println!("{}", out.display());
    }
    Ok(())
}

/// Best IoUs of every ground-truth mask against the masks of the sample with
/// the same id in `proposals_dir`.
fn recall_from_dataset(samples: &[Sample], proposals_dir: &Path) -> Result<Vec<f64>> {
    let proposals: HashMap<String, Sample> = load_all(proposals_dir, FEATURE_STRIDE)
        .with_context(|| format!("loading proposals from {}", proposals_dir.display()))?
        .into_iter()
        .map(|s| (s.id.clone(), s))
        .collect();
    let mut best = Vec::new();
    for s in samples {
        let Some(gt) = &s.labeled_masks else { continue };
        match proposals.get(&s.id).and_then(|p| p.labeled_masks.as_ref()) {
            Some(p) => best.extend(best_ious(p.masks(), gt.masks())?),
            None => best.extend(std::iter::repeat_n(0.0, gt.len())),
        }
    }
    Ok(best)
}

fn load_context(path: &Path, limits: Limits) -> Result<ModelContext> {
    let (ck, id) = load_with_id(path).with_context(|| format!("loading {}", path.display()))?;
    Ok(ModelContext::new(ck.model, id, limits))
}

fn segment_cmd(a: SegmentArgs) -> Result<()> {
    let ctx = load_context(
        &a.checkpoint,
        Limits {
            strict_size: a.strict_size,
            max_side: usize::MAX,
        },
    )?;
    let image = read_png(&a.image)?;
    let fg: Vec<String> = a
        .fg_categories
        .as_deref()
        .map(|s| s.split(',').map(|c| c.trim().to_string()).filter(|c| !c.is_empty()).collect())
        .unwrap_or_default();
    let options = SegmentOptions {
        use_background_rule: !fg.is_empty(),
        fg_categories: fg,
        background_category: a.background_category.clone(),
        phrase_embedding: None,
    };
    let started = std::time::Instant::now();
    let (mut resp, labels) = ctx.segment(&image, &parse_query_list(&a.queries), &options)?;
    resp.timing_ms = started.elapsed().as_secs_f64() * 1e3;
    fs::create_dir_all(&a.out_dir)?;
    let stem = a.image.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
    let png = a.out_dir.join(format!("{stem}.overlay.png"));
    let json = a.out_dir.join(format!("{stem}.json"));
    fs::write(&png, encode_png(&overlay(&image, &labels)))?;
    fs::write(&json, serde_json::to_string_pretty(&resp)?)?;
    println!("{}", png.display());
    println!("{}", json.display());
    Ok(())
}

fn gradcheck_cmd(a: GradcheckArgs) -> Result<bool> {
    let options = GradcheckOptions {
        instances: a.instances,
        seed: a.seed,
        tolerance: a.tolerance,
        ..Default::default()
    };
    let report = gradcheck::run(&options)?;
    for c in &report.checks {
        println!(
            "{:<26} instances {:>3}  coordinates {:>5}  max relative error {:.3e}",
            c.name, c.instances, c.coordinates, c.max_rel_error
        );
    }
    let ok = report.passed();
    println!(
        "{} (max {:.3e}, tolerance {:.0e})",
        if ok { "PASS" } else { "FAIL" },
        report.max_rel_error(),
        report.tolerance
    );
    Ok(ok)
}

fn serve_cmd(a: ServeArgs) -> Result<()> {
    let ctx = load_context(
        &a.checkpoint,
        Limits {
            max_side: a.max_side,
            strict_size: a.strict_size,
        },
    )?;
    println!("model {}", ctx.model_id);
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(service::serve(Arc::new(ctx), a.port, a.max_body_bytes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn pair_parsing() {
        assert_eq!(parse_pair("Red circle").unwrap(), ("red".to_string(), ShapeKind::Circle));
        assert!(parse_pair("red").is_err());
        assert!(parse_pair("red hexagon").is_err());
    }
}
