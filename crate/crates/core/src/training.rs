//! Optimization loop: mixed-dataset sampling, the combined grounding and
//! segmentation objective, momentum SGD with a cosine schedule,
//! checkpointing and resume, and teacher pseudo-labeling.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::checkpoint::Checkpoint;
use crate::data::{write_dataset, Sample};
use crate::error::{Error, IoContext, Result};
use crate::losses::{grounding_loss_graph, segmentation_loss_graph, similarity_matrix, TRAIN_NORM_EPS};
use crate::metrics::{best_ious, mask_iou, recall_from_ious};
use crate::model::{Model, ModelConfig, EMBEDDINGS, FEATURE_STRIDE, LOG_TAU};
use crate::text::{drop_words, extract_words, EmbeddingProvider, Lexicon, WordFilter};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    /// Examples per grounding-loss partition; defaults to the batch size.
    pub partition_size: Option<usize>,
    pub lr: f64,
    pub warmup_steps: u64,
    pub weight_decay: f64,
    pub momentum: f64,
    /// Global gradient-norm clip; off when absent.
    pub grad_clip: Option<f64>,
    /// Weight of the segmentation loss.
    pub alpha: f64,
    /// Weight of the grounding loss; 0 trains a mask-only teacher.
    pub grounding_weight: f64,
    /// Factor on the grounding-loss gradient that reaches the soft masks;
    /// 1 backpropagates it unchanged, 0 leaves mask training to the
    /// segmentation loss.
    pub grounding_mask_grad: f64,
    /// Probability of keeping each caption word.
    pub keep_prob: f64,
    pub word_filter: WordFilter,
    pub seed: u64,
    /// Keep the word-embedding table fixed.
    pub freeze_text: bool,
    /// Random resize-crop with scale in `[0.8, 1.2]`.
    pub scale_jitter: bool,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 32,
            partition_size: None,
            lr: 0.01,
            warmup_steps: 100,
            weight_decay: 1e-5,
            momentum: 0.9,
            grad_clip: Some(5.0),
            alpha: 1.0,
            grounding_weight: 1.0,
            grounding_mask_grad: 0.1,
            keep_prob: 0.5,
            word_filter: WordFilter::NounAdj,
            seed: 0,
            freeze_text: false,
            scale_jitter: false,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path).at(path)?)
    }

    pub fn partition(&self) -> usize {
        self.partition_size.unwrap_or(self.batch_size)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        let p = self.partition();
        if p == 0 || self.batch_size % p != 0 {
            return bad(format!("partition_size {p} does not divide batch_size {}", self.batch_size));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be >= 0, got {}", self.alpha));
        }
        if !(self.grounding_weight >= 0.0 && self.grounding_weight.is_finite()) {
            return bad("grounding_weight must be >= 0".into());
        }
        if !(self.grounding_mask_grad >= 0.0 && self.grounding_mask_grad.is_finite()) {
            return bad("grounding_mask_grad must be >= 0".into());
        }
        if self.alpha == 0.0 && self.grounding_weight == 0.0 {
            return bad("alpha and grounding_weight are both zero".into());
        }
        if !(0.0..=1.0).contains(&self.keep_prob) {
            return bad(format!("keep_prob must lie in [0, 1], got {}", self.keep_prob));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(0.0..1.0).contains(&self.momentum) {
            return bad("lr must be positive and momentum in [0, 1)".into());
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be >= 0".into());
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad("grad_clip must be positive".into());
            }
        }
        self.model.validate()
    }

    /// Learning rate at `step`: linear warmup, then cosine decay to zero.
    pub fn lr_at(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return self.lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.steps.saturating_sub(self.warmup_steps).max(1) as f64;
        let t = (step - self.warmup_steps) as f64 / span;
        0.5 * self.lr * (1.0 + (std::f64::consts::PI * t.min(1.0)).cos())
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Randomness of one training step depends only on `(seed, step)`.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix(splitmix(seed) ^ step))
}

/// Draws `(dataset, example)` pairs: a dataset uniformly, then an example
/// uniformly within it.
pub fn sample_mixed<R: Rng + ?Sized>(sizes: &[usize], n: usize, rng: &mut R) -> Result<Vec<(usize, usize)>> {
    if sizes.is_empty() {
        return Err(Error::InvalidArgument("no datasets to sample from".into()));
    }
    if let Some(i) = sizes.iter().position(|&s| s == 0) {
        return Err(Error::InvalidArgument(format!("dataset {i} is empty")));
    }
    Ok((0..n)
        .map(|_| {
            let d = rng.random_range(0..sizes.len());
            (d, rng.random_range(0..sizes[d]))
        })
        .collect())
}

/// Vocabulary covering every caption word and category word of the datasets.
pub fn build_vocabulary<'a>(samples: impl IntoIterator<Item = &'a Sample>, extra: &[String]) -> Vec<String> {
    let mut captions = Vec::new();
    let mut words: Vec<String> = extra.to_vec();
    for s in samples {
        if let Some(c) = &s.caption {
            captions.push(c.as_str());
        }
        if let Some(cats) = &s.mask_categories {
            for c in cats {
                words.extend(crate::text::tokenize(c));
            }
        }
    }
    EmbeddingProvider::vocabulary(captions, words)
}

/// Losses of one step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub l_g: Option<f64>,
    pub l_s: Option<f64>,
    pub loss: f64,
    pub lr: f64,
    pub tau: f64,
    pub grad_norm: f64,
}

/// Model parameters plus optimizer state.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: Model,
    pub momentum: crate::model::ParamStore,
    /// Next step to run.
    pub step: u64,
}

impl TrainState {
    pub fn new(model: Model) -> Self {
        let mut momentum = crate::model::ParamStore::new();
        for (n, t) in model.params.iter() {
            momentum.insert(n, Tensor::zeros(t.shape()));
        }
        Self { model, momentum, step: 0 }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Self {
        let mut s = Self::new(ck.model);
        for (n, t) in ck.momentum.iter() {
            s.momentum.insert(n, t.clone());
        }
        s.step = ck.step;
        s
    }

    pub fn to_checkpoint(&self, config: &TrainConfig) -> Result<Checkpoint> {
        Ok(Checkpoint {
            model: self.model.clone(),
            step: self.step,
            momentum: self.momentum.clone(),
            train: Some(serde_json::to_value(config)?),
        })
    }
}

/// Caption words of a sample after filtering and random dropping, restricted
/// to the vocabulary. Empty when the caption yields nothing usable.
fn caption_word_ids<R: Rng + ?Sized>(
    sample: &Sample,
    config: &TrainConfig,
    lexicon: &Lexicon,
    provider_vocab: &std::collections::HashMap<String, usize>,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let Some(caption) = &sample.caption else {
        return Ok(Vec::new());
    };
    let words = extract_words(caption, config.word_filter, lexicon);
    if words.is_empty() {
        return Ok(Vec::new());
    }
    let kept = drop_words(&words, config.keep_prob, rng)?;
    Ok(kept.iter().filter_map(|w| provider_vocab.get(w).copied()).collect())
}

/// Nearest-neighbour rescale about the image centre by `scale`, then crop or
/// edge-pad back to the original size.
pub fn jitter_sample(sample: &Sample, scale: f64, rng: &mut impl Rng) -> Result<Sample> {
    let (h, w) = (sample.height(), sample.width());
    let (nh, nw) = (((h as f64) * scale).round() as usize, ((w as f64) * scale).round() as usize);
    let oy = if nh > h { rng.random_range(0..=nh - h) as isize } else { -(rng.random_range(0..=h - nh) as isize) };
    let ox = if nw > w { rng.random_range(0..=nw - w) as isize } else { -(rng.random_range(0..=w - nw) as isize) };
    let src = |i: usize, j: usize| {
        let y = (i as isize + oy).clamp(0, nh as isize - 1) as usize;
        let x = (j as isize + ox).clamp(0, nw as isize - 1) as usize;
        ((y * h / nh).min(h - 1), (x * w / nw).min(w - 1))
    };
    let image = Array3::from_shape_fn((h, w, 3), |(i, j, c)| {
        let (y, x) = src(i, j);
        sample.image[(y, x, c)]
    });
    let masks = sample.full_masks.as_ref().map(|m| {
        let m = m.masks();
        Array3::from_shape_fn((m.len_of(Axis(0)), h, w), |(k, i, j)| {
            let (y, x) = src(i, j);
            m[(k, y, x)]
        })
    });
    // Drop masks that were cropped away entirely.
    let (masks, cats) = match masks {
        Some(m) => {
            let keep: Vec<usize> = (0..m.len_of(Axis(0)))
                .filter(|&k| m.index_axis(Axis(0), k).iter().any(|&v| v == 1))
                .collect();
            let cats = sample
                .mask_categories
                .as_ref()
                .map(|c| keep.iter().map(|&k| c[k].clone()).collect());
            if keep.is_empty() {
                (None, None)
            } else {
                (Some(m.select(Axis(0), &keep)), cats)
            }
        }
        None => (None, None),
    };
    let caption = sample.caption.clone();
    if masks.is_none() && caption.is_none() {
        return Ok(sample.clone());
    }
    Sample::new(sample.id.clone(), image, masks, cats, caption, sample.mask_stride)
}

/// One optimizer update on `batch`. Returns the step's losses.
pub fn train_step<R: Rng + ?Sized>(
    state: &mut TrainState,
    batch: &[&Sample],
    config: &TrainConfig,
    lexicon: &Lexicon,
    rng: &mut R,
) -> Result<StepRecord> {
    let step = state.step;
    let model = &state.model;
    let vocab_index: std::collections::HashMap<String, usize> = model
        .vocab
        .iter()
        .enumerate()
        .map(|(i, w)| (w.to_lowercase(), i))
        .collect();

    let mut g = Graph::<f32>::new();
    let freeze = config.freeze_text;
    let p = model.bind(&mut g, |n| !(freeze && n == EMBEDDINGS));
    let images: Vec<&Array3<f32>> = batch.iter().map(|s| &s.image).collect();
    let x = Model::images_to_graph(&mut g, &images)?;
    let fv = model.forward_graph(&mut g, &p, x);
    let (gh, gw) = fv.grid;

    // Segmentation loss over mask-bearing samples.
    let mut l_s_var: Option<Var> = None;
    let mut n_masked = 0usize;
    if config.alpha > 0.0 {
        for (b, s) in batch.iter().enumerate() {
            let Some(lm) = &s.labeled_masks else { continue };
            if s.mask_stride != FEATURE_STRIDE || (lm.height(), lm.width()) != (gh, gw) {
                return Err(Error::InvalidSample {
                    id: s.id.clone(),
                    reason: format!("masks {}x{} do not match the {gh}x{gw} feature grid", lm.height(), lm.width()),
                });
            }
            let labels = Tensor::new(&[lm.len(), gh * gw], lm.masks().iter().map(|&v| f32::from(v)).collect());
            let lv = g.constant(labels);
            let sb = g.index0(fv.masks, b);
            let l = segmentation_loss_graph(&mut g, sb, lv);
            l_s_var = Some(match l_s_var {
                None => l,
                Some(acc) => g.add(acc, l),
            });
            n_masked += 1;
        }
        if let Some(v) = l_s_var {
            l_s_var = Some(g.scale(v, 1.0 / n_masked as f64));
        }
    }

    // Grounding loss over caption-bearing samples.
    let mut l_g_var: Option<Var> = None;
    if config.grounding_weight > 0.0 {
        let mut rows = Vec::new();
        let mut word_ids = Vec::new();
        let mut segments = Vec::new();
        for (b, s) in batch.iter().enumerate() {
            let ids = caption_word_ids(s, config, lexicon, &vocab_index, rng)?;
            if ids.is_empty() {
                continue;
            }
            segments.push((word_ids.len(), ids.len()));
            word_ids.extend(ids);
            rows.push(b);
        }
        if !rows.is_empty() {
            let mut part = config.partition().min(rows.len());
            while rows.len() % part != 0 {
                part -= 1;
            }
            let z = if config.grounding_mask_grad == 1.0 {
                fv.z
            } else {
                let m = g.grad_scale(fv.masks, config.grounding_mask_grad);
                g.matmul(m, fv.f_z)
            };
            let z = g.select_rows(z, &rows);
            let w = g.select_rows(p.var(EMBEDDINGS), &word_ids);
            let neg = g.neg(p.var(LOG_TAU));
            let inv_tau = g.exp(neg);
            let sim = similarity_matrix(&mut g, z, w, &segments, inv_tau, TRAIN_NORM_EPS);
            l_g_var = Some(grounding_loss_graph(&mut g, sim, inv_tau, part));
        }
    }

    let total = match (l_g_var, l_s_var) {
        (Some(lg), Some(ls)) => {
            let a = g.scale(lg, config.grounding_weight);
            let b = g.scale(ls, config.alpha);
            g.add(a, b)
        }
        (Some(lg), None) => g.scale(lg, config.grounding_weight),
        (None, Some(ls)) => g.scale(ls, config.alpha),
        (None, None) => {
            return Err(Error::InvalidArgument(
                "batch has no usable captions or masks for the enabled losses".into(),
            ))
        }
    };
    let l_g = l_g_var.map(|v| f64::from(g.item(v)));
    let l_s = l_s_var.map(|v| f64::from(g.item(v)));
    let loss = f64::from(g.item(total));
    let tau = model.tau();
    let lr = config.lr_at(step);

    let mut grads = g.backward(total);
    let mut updates: Vec<(String, Tensor<f32>)> = Vec::new();
    let mut sq = 0.0f64;
    for (name, v) in p.iter() {
        if let Some(gr) = grads.take(v) {
            sq += gr.sq_norm();
            updates.push((name.to_string(), gr));
        }
    }
    let grad_norm = sq.sqrt();
    if !loss.is_finite() || !grad_norm.is_finite() {
        return Err(Error::NonFiniteLoss {
            step,
            l_g: l_g.unwrap_or(f64::NAN),
            l_s: l_s.unwrap_or(f64::NAN),
            tau,
            grad_norm,
        });
    }
    let clip = match config.grad_clip {
        Some(c) if grad_norm > c => (c / grad_norm) as f32,
        _ => 1.0,
    };
    let (lr32, mu, wd) = (lr as f32, config.momentum as f32, config.weight_decay as f32);
    drop(g);
    for (name, gr) in updates {
        let param = state.model.params.get_mut(&name).expect("bound parameter");
        let buf = state.momentum.get_mut(&name).expect("momentum buffer");
        let decay = if name == LOG_TAU { 0.0 } else { wd };
        for ((w, v), &d) in param.data_mut().iter_mut().zip(buf.data_mut()).zip(gr.data()) {
            let gi = d * clip + decay * *w;
            *v = mu * *v + gi;
            *w -= lr32 * *v;
        }
    }
    let tau_after = state.model.tau();
    assert!(tau_after > 0.0, "temperature must stay positive");
    state.step += 1;
    Ok(StepRecord {
        step,
        l_g,
        l_s,
        loss,
        lr,
        tau,
        grad_norm,
    })
}

/// Builds the batch for `step`: mixed sampling, then optional jitter.
pub fn batch_for_step(datasets: &[Vec<Sample>], config: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<Vec<Sample>> {
    let sizes: Vec<usize> = datasets.iter().map(Vec::len).collect();
    let picks = sample_mixed(&sizes, config.batch_size, rng)?;
    picks
        .into_iter()
        .map(|(d, i)| {
            let s = &datasets[d][i];
            if config.scale_jitter {
                let scale = rng.random_range(0.8..=1.2);
                jitter_sample(s, scale, rng)
            } else {
                Ok(s.clone())
            }
        })
        .collect()
}

/// Where and how often the loop writes.
#[derive(Clone, Debug, Default)]
pub struct TrainOutputs {
    /// NDJSON log, appended to.
    pub log: Option<PathBuf>,
    /// Directory for periodic `step-XXXXXX.ckpt` files.
    pub checkpoint_dir: Option<PathBuf>,
    pub checkpoint_every: u64,
    /// Run `validate` every this many steps (0 disables).
    pub validate_every: u64,
}

/// Runs training from `state.step` up to `config.steps`.
pub fn train(
    state: &mut TrainState,
    config: &TrainConfig,
    datasets: &[Vec<Sample>],
    outputs: &TrainOutputs,
    mut validate: Option<&mut dyn FnMut(&Model) -> Result<f64>>,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<()> {
    config.validate()?;
    if state.model.config != config.model {
        return Err(Error::Config("model dimensions differ from the training config".into()));
    }
    let lexicon = Lexicon::default();
    let mut log = match &outputs.log {
        Some(path) => Some(
            fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .at(path)?,
        ),
        None => None,
    };
    while state.step < config.steps {
        let step = state.step;
        let mut rng = step_rng(config.seed, step);
        let batch = batch_for_step(datasets, config, &mut rng)?;
        let refs: Vec<&Sample> = batch.iter().collect();
        let rec = train_step(state, &refs, config, &lexicon, &mut rng)?;
        if let (Some(f), Some(path)) = (log.as_mut(), &outputs.log) {
            let line = serde_json::json!({
                "step": rec.step, "l_g": rec.l_g, "l_s": rec.l_s, "lr": rec.lr, "tau": rec.tau,
            });
            writeln!(f, "{line}").at(path)?;
        }
        on_step(&rec);
        let done = state.step;
        if let Some(v) = validate.as_mut() {
            if outputs.validate_every > 0 && (done % outputs.validate_every == 0 || done == config.steps) {
                let score = v(&state.model)?;
                log::info!("step {done}: validation mIoU {score:.4}");
                if let (Some(f), Some(path)) = (log.as_mut(), &outputs.log) {
                    writeln!(f, "{}", serde_json::json!({"step": done, "val_miou": score})).at(path)?;
                }
            }
        }
        if let Some(dir) = &outputs.checkpoint_dir {
            if outputs.checkpoint_every > 0 && done % outputs.checkpoint_every == 0 {
                state.to_checkpoint(config)?.save(&dir.join(format!("step-{done:06}.ckpt")))?;
            }
        }
    }
    Ok(())
}

/// Fresh training state for `config` over `datasets`.
pub fn init_state(config: &TrainConfig, datasets: &[Vec<Sample>], extra_words: &[String]) -> Result<TrainState> {
    config.validate()?;
    let vocab = build_vocabulary(datasets.iter().flatten(), extra_words);
    Ok(TrainState::new(Model::new(config.model.clone(), vocab, config.seed)?))
}

/// Refuses teachers that were trained with a grounding loss.
pub fn check_teacher(ck: &Checkpoint) -> Result<()> {
    if let Some(train) = &ck.train {
        let gw = train.get("grounding_weight").and_then(|v| v.as_f64()).unwrap_or(1.0);
        if gw != 0.0 {
            return Err(Error::InvalidArgument(format!(
                "teacher was trained with grounding_weight {gw}; pseudo-labeling expects a mask-only teacher"
            )));
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelOptions {
    pub threshold: f64,
    pub dedup_iou: f64,
    /// Minimum R50 of the pseudo masks against any masks the input samples
    /// already carry; falling below it is reported as a warning.
    pub recall_floor: f64,
}

impl Default for PseudoLabelOptions {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            dedup_iou: 0.9,
            recall_floor: 0.8,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelReport {
    pub images: usize,
    pub masks: usize,
    /// Images for which the teacher produced no mask.
    pub caption_only: usize,
    /// R50 of pseudo masks against the inputs' own masks, when they have any.
    pub self_recall_r50: Option<f64>,
}

impl PseudoLabelReport {
    /// False only when a self-recall was measured and fell below `floor`.
    pub fn meets_floor(&self, floor: f64) -> bool {
        self.self_recall_r50.is_none_or(|r| r >= floor)
    }
}

/// Binarized, non-empty, de-duplicated teacher masks at mask resolution.
pub fn pseudo_masks_grid(teacher: &Model, image: &Array3<f32>, options: &PseudoLabelOptions) -> Result<Vec<Array2<u8>>> {
    let out = teacher.forward(image)?;
    let bin = out.proposals.binarized(options.threshold);
    let mut kept: Vec<Array2<u8>> = Vec::new();
    for m in bin.outer_iter() {
        if !m.iter().any(|&v| v == 1) {
            continue;
        }
        let mut dup = false;
        for k in &kept {
            if mask_iou(k.view(), m)? > options.dedup_iou {
                dup = true;
                break;
            }
        }
        if !dup {
            kept.push(m.to_owned());
        }
    }
    Ok(kept)
}

/// [`pseudo_masks_grid`] upsampled to image resolution; `None` when the
/// teacher found nothing.
pub fn pseudo_masks(teacher: &Model, image: &Array3<f32>, options: &PseudoLabelOptions) -> Result<Option<Array3<u8>>> {
    let kept = pseudo_masks_grid(teacher, image, options)?;
    let (h, w, _) = image.dim();
    Ok(upsample_masks(&kept, h, w))
}

fn upsample_masks(kept: &[Array2<u8>], h: usize, w: usize) -> Option<Array3<u8>> {
    if kept.is_empty() {
        return None;
    }
    let (gh, gw) = kept[0].dim();
    let (fy, fx) = (h / gh, w / gw);
    Some(Array3::from_shape_fn((kept.len(), h, w), |(k, i, j)| kept[k][(i / fy, j / fx)]))
}

/// Writes a copy of `samples` whose masks come from the teacher. Captions are
/// kept; samples without any teacher mask stay caption-only.
pub fn pseudo_label(
    teacher: &Model,
    samples: impl IntoIterator<Item = Result<Sample>>,
    out: &Path,
    options: &PseudoLabelOptions,
) -> Result<PseudoLabelReport> {
    let mut report = PseudoLabelReport::default();
    let mut labeled = Vec::new();
    let mut best = Vec::new();
    for s in samples {
        let s = s?;
        report.images += 1;
        let grid = pseudo_masks_grid(teacher, &s.image, options)?;
        if let Some(lm) = &s.labeled_masks {
            if grid.is_empty() {
                best.extend(std::iter::repeat_n(0.0, lm.len()));
            } else {
                let views: Vec<_> = grid.iter().map(|m| m.view()).collect();
                let stacked = ndarray::stack(Axis(0), &views).expect("equal mask shapes");
                best.extend(best_ious(stacked.view(), lm.masks())?);
            }
        }
        let masks = upsample_masks(&grid, s.height(), s.width());
        match &masks {
            Some(m) => report.masks += m.len_of(Axis(0)),
            None => report.caption_only += 1,
        }
        if masks.is_none() && s.caption.is_none() {
            log::warn!("sample `{}`: no teacher masks and no caption, dropped", s.id);
            continue;
        }
        labeled.push(Sample::new(s.id.clone(), s.image, masks, None, s.caption, s.mask_stride)?);
    }
    if !best.is_empty() {
        let r50 = recall_from_ious(&best, &[0.5])[0];
        report.self_recall_r50 = Some(r50);
        if r50 < options.recall_floor {
            log::warn!("pseudo-label self-recall R50 {r50:.3} is below the floor {}", options.recall_floor);
        }
    }
    if report.caption_only > 0 {
        log::warn!("{} of {} images received no pseudo masks", report.caption_only, report.images);
    }
    fs::create_dir_all(out).at(out)?;
    write_dataset(out, &labeled)?;
    Ok(report)
}
