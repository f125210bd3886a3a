//! Procedural "coloured shapes" scenes with class-agnostic masks, grammar
//! captions, and held-out colour/shape pairs for zero-shot evaluation.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{write_dataset, Manifest, Sample};
use crate::error::{Error, IoContext, Result};

pub const BACKGROUND: &str = "background";
const SUPERSAMPLE: usize = 4;
const MAX_ATTEMPTS: usize = 200;
const LAYOUT_RETRIES: usize = 20;
const MIN_VISIBLE: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Bar,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [Self::Circle, Self::Square, Self::Triangle, Self::Bar];

    pub fn name(self) -> &'static str {
        match self {
            Self::Circle => "circle",
            Self::Square => "square",
            Self::Triangle => "triangle",
            Self::Bar => "bar",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedColor {
    pub name: String,
    pub rgb: [u8; 3],
}

impl NamedColor {
    pub fn new(name: &str, rgb: [u8; 3]) -> Self {
        Self {
            name: name.to_string(),
            rgb,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub image_size: usize,
    pub shapes: Vec<ShapeKind>,
    pub colors: Vec<NamedColor>,
    pub background_colors: Vec<NamedColor>,
    /// Inclusive `[min, max]` object count.
    pub objects_per_scene: [usize; 2],
    /// Inclusive `[min, max]` object extent in pixels.
    pub object_size: [usize; 2],
    /// When false, objects never touch, so masks partition the image.
    pub allow_overlap: bool,
    /// Per-channel uniform jitter applied to object colours.
    pub color_jitter: u8,
    pub mask_stride: usize,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            shapes: ShapeKind::ALL.to_vec(),
            colors: vec![
                NamedColor::new("red", [220, 40, 40]),
                NamedColor::new("green", [40, 180, 60]),
                NamedColor::new("blue", [40, 80, 230]),
                NamedColor::new("yellow", [235, 215, 40]),
                NamedColor::new("purple", [150, 60, 200]),
                NamedColor::new("cyan", [40, 205, 215]),
            ],
            background_colors: vec![
                NamedColor::new("gray", [128, 128, 128]),
                NamedColor::new("black", [20, 20, 20]),
                NamedColor::new("white", [240, 240, 240]),
            ],
            objects_per_scene: [1, 3],
            object_size: [16, 26],
            allow_overlap: false,
            color_jitter: 12,
            mask_stride: 4,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path).at(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.shapes.len() < 2 || self.colors.len() < 2 {
            return bad("need at least 2 shapes and 2 colours");
        }
        if self.background_colors.is_empty() {
            return bad("need at least one background colour");
        }
        let [lo, hi] = self.objects_per_scene;
        if lo < 1 || hi < lo {
            return bad("objects_per_scene must satisfy 1 <= min <= max");
        }
        let [smin, smax] = self.object_size;
        if smin < 4 || smax < smin || smax + 4 > self.image_size {
            return bad("object_size out of range for image_size");
        }
        if self.mask_stride == 0 || self.image_size % self.mask_stride != 0 {
            return bad("image_size must be a multiple of mask_stride");
        }
        let names: BTreeSet<_> = self
            .colors
            .iter()
            .chain(&self.background_colors)
            .map(|c| c.name.as_str())
            .collect();
        if names.len() != self.colors.len() + self.background_colors.len() {
            return bad("colour names must be unique");
        }
        Ok(())
    }

    /// Every `(colour, shape)` pair, colour-major.
    pub fn all_pairs(&self) -> Vec<(String, ShapeKind)> {
        self.colors
            .iter()
            .flat_map(|c| self.shapes.iter().map(move |&s| (c.name.clone(), s)))
            .collect()
    }

    /// Evaluation category names: `background` followed by every
    /// `"{colour} {shape}"` phrase.
    pub fn category_names(&self) -> Vec<String> {
        std::iter::once(BACKGROUND.to_string())
            .chain(
                self.all_pairs()
                    .into_iter()
                    .map(|(c, s)| category_name(&c, s)),
            )
            .collect()
    }
}

pub fn category_name(color: &str, shape: ShapeKind) -> String {
    format!("{color} {}", shape.name())
}

/// Colour/shape pairs withheld from training scenes.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ConceptSplit {
    pub holdout_pairs: Vec<(String, ShapeKind)>,
}

impl ConceptSplit {
    pub fn validate(&self, config: &SceneConfig) -> Result<()> {
        let all = config.all_pairs();
        for p in &self.holdout_pairs {
            if !all.contains(p) {
                return Err(Error::InfeasibleSplit(format!(
                    "{} {} is not a scene pair",
                    p.0,
                    p.1.name()
                )));
            }
        }
        let held: BTreeSet<_> = self.holdout_pairs.iter().cloned().collect();
        if held.len() >= all.len() {
            return Err(Error::InfeasibleSplit("holdout covers every pair".into()));
        }
        for (color, shape) in &held {
            if !config
                .shapes
                .iter()
                .any(|&s| !held.contains(&(color.clone(), s)))
            {
                return Err(Error::InfeasibleSplit(format!(
                    "colour {color} never appears in training"
                )));
            }
            if !config
                .colors
                .iter()
                .any(|c| !held.contains(&(c.name.clone(), *shape)))
            {
                return Err(Error::InfeasibleSplit(format!(
                    "shape {} never appears in training",
                    shape.name()
                )));
            }
        }
        Ok(())
    }

    pub fn bigrams(&self) -> Vec<String> {
        self.holdout_pairs
            .iter()
            .map(|(c, s)| category_name(c, *s))
            .collect()
    }
}

/// Constraint on which colour/shape pairs a scene may contain.
#[derive(Clone, Debug, Default)]
pub enum ScenePolicy {
    #[default]
    Any,
    /// Never draw these pairs.
    Exclude(Vec<(String, ShapeKind)>),
    /// The first object is drawn from these pairs; the rest from all pairs.
    RequireOne(Vec<(String, ShapeKind)>),
}

#[derive(Clone, Copy, Debug)]
struct Placed {
    shape: ShapeKind,
    cx: f64,
    cy: f64,
    /// Half extents of the bounding box.
    hw: f64,
    hh: f64,
}

impl Placed {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        match self.shape {
            ShapeKind::Circle => dx * dx + dy * dy <= self.hw * self.hw,
            ShapeKind::Square | ShapeKind::Bar => dx.abs() <= self.hw && dy.abs() <= self.hh,
            ShapeKind::Triangle => {
                let top = self.cy - self.hh;
                dy.abs() <= self.hh && dx.abs() <= (y - top) * self.hw / (2.0 * self.hh)
            }
        }
    }

    fn coverage(&self, size: usize) -> Array2<f64> {
        let inv = 1.0 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
        Array2::from_shape_fn((size, size), |(i, j)| {
            if (i as f64 + 1.0) < self.cy - self.hh
                || (i as f64) > self.cy + self.hh
                || (j as f64 + 1.0) < self.cx - self.hw
                || (j as f64) > self.cx + self.hw
            {
                return 0.0;
            }
            let mut hits = 0;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let y = i as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64;
                    let x = j as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64;
                    hits += usize::from(self.contains(x, y));
                }
            }
            hits as f64 * inv
        })
    }

    fn overlaps(&self, other: &Placed, margin: f64) -> bool {
        (self.cx - other.cx).abs() < self.hw + other.hw + margin
            && (self.cy - other.cy).abs() < self.hh + other.hh + margin
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) fn scene_rng(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix(splitmix(seed ^ splitmix(stream)) ^ index))
}

/// Places every object or reports the index of the first that did not fit.
fn place_objects<R: Rng>(
    config: &SceneConfig,
    pairs: &[(String, ShapeKind)],
    rng: &mut R,
) -> std::result::Result<(Vec<Placed>, Vec<Array2<f64>>), usize> {
    let size = config.image_size;
    let mut placed: Vec<Placed> = Vec::with_capacity(pairs.len());
    let mut coverages: Vec<Array2<f64>> = Vec::with_capacity(pairs.len());
    for (k, (_, shape)) in pairs.iter().enumerate() {
        let mut attempt = 0;
        loop {
            if attempt == MAX_ATTEMPTS {
                return Err(k);
            }
            attempt += 1;
            let s = rng.random_range(config.object_size[0]..=config.object_size[1]) as f64;
            let (hw, hh) = match shape {
                ShapeKind::Bar => {
                    let thin = (s / 3.0).max(4.0);
                    if rng.random_bool(0.5) {
                        (s / 2.0, thin / 2.0)
                    } else {
                        (thin / 2.0, s / 2.0)
                    }
                }
                _ => (s / 2.0, s / 2.0),
            };
            let cx = rng.random_range(hw + 1.0..size as f64 - hw - 1.0);
            let cy = rng.random_range(hh + 1.0..size as f64 - hh - 1.0);
            let cand = Placed {
                shape: *shape,
                cx,
                cy,
                hw,
                hh,
            };
            if !config.allow_overlap && placed.iter().any(|p| p.overlaps(&cand, 2.0)) {
                continue;
            }
            let cov = cand.coverage(size);
            if config.allow_overlap {
                let mut trial = coverages.clone();
                trial.push(cov.clone());
                let labels = label_map(&trial);
                let ok = trial.iter().enumerate().all(|(o, c)| {
                    let area = c.iter().filter(|&&v| v >= 0.5).count().max(1) as f64;
                    let visible = labels.iter().filter(|&&l| l == o + 1).count() as f64;
                    visible / area >= MIN_VISIBLE
                });
                if !ok {
                    continue;
                }
            }
            placed.push(cand);
            coverages.push(cov);
            break;
        }
    }
    Ok((placed, coverages))
}

/// Generates scene `index` of the unconstrained stream.
pub fn generate_scene(config: &SceneConfig, index: u64) -> Result<Sample> {
    generate_scene_with(config, index, 0, &ScenePolicy::Any)
}

/// Generates one scene. Output is a pure function of `(config, stream,
/// index, policy)`.
pub fn generate_scene_with(
    config: &SceneConfig,
    index: u64,
    stream: u64,
    policy: &ScenePolicy,
) -> Result<Sample> {
    config.validate()?;
    let mut rng = scene_rng(config.seed, stream, index);
    let size = config.image_size;
    let [lo, hi] = config.objects_per_scene;
    let count = rng.random_range(lo..=hi);

    let all = config.all_pairs();
    let allowed: Vec<_> = match policy {
        ScenePolicy::Exclude(ex) => all.iter().filter(|p| !ex.contains(p)).cloned().collect(),
        _ => all.clone(),
    };
    if allowed.is_empty() {
        return Err(Error::InfeasibleSplit("no pairs left to draw".into()));
    }
    let mut pairs = Vec::with_capacity(count);
    for k in 0..count {
        let pool = match policy {
            ScenePolicy::RequireOne(req) if k == 0 => req,
            _ => &allowed,
        };
        if pool.is_empty() {
            return Err(Error::InfeasibleSplit("required pair list is empty".into()));
        }
        pairs.push(pool[rng.random_range(0..pool.len())].clone());
    }

    let bg = &config.background_colors[rng.random_range(0..config.background_colors.len())];
    let mut layout = Err(0);
    for _ in 0..LAYOUT_RETRIES {
        layout = place_objects(config, &pairs, &mut rng);
        if layout.is_ok() {
            break;
        }
    }
    let (_, coverages) = layout.map_err(|object| Error::Placement {
        index,
        object,
        attempts: MAX_ATTEMPTS * LAYOUT_RETRIES,
    })?;

    let mut image = Array3::<f32>::zeros((size, size, 3));
    for i in 0..size {
        for j in 0..size {
            for c in 0..3 {
                image[(i, j, c)] = bg.rgb[c] as f32 / 255.0;
            }
        }
    }
    for ((color, _), cov) in pairs.iter().zip(&coverages) {
        let base = &config
            .colors
            .iter()
            .find(|c| &c.name == color)
            .expect("known colour")
            .rgb;
        let j = config.color_jitter as i32;
        let rgb: Vec<f32> = base
            .iter()
            .map(|&v| (v as i32 + rng.random_range(-j..=j)).clamp(0, 255) as f32 / 255.0)
            .collect();
        for ((i, jj), &a) in cov.indexed_iter() {
            if a > 0.0 {
                let a = a as f32;
                for c in 0..3 {
                    let px = &mut image[(i, jj, c)];
                    *px = *px * (1.0 - a) + rgb[c] * a;
                }
            }
        }
    }

    let labels = label_map(&coverages);
    let mut masks = Vec::new();
    let mut cats = Vec::new();
    for (o, (color, shape)) in pairs.iter().enumerate() {
        masks.push(labels.mapv(|l| u8::from(l == o + 1)));
        cats.push(category_name(color, *shape));
    }
    let bg_mask = labels.mapv(|l| u8::from(l == 0));
    if bg_mask.iter().any(|&v| v == 1) {
        masks.push(bg_mask);
        cats.push(BACKGROUND.to_string());
    }
    let views: Vec<_> = masks.iter().map(|m| m.view()).collect();
    let stacked = ndarray::stack(ndarray::Axis(0), &views).expect("equal shapes");

    let phrases: Vec<String> = pairs
        .iter()
        .map(|(c, s)| format!("a {c} {}", s.name()))
        .collect();
    let caption = format!("{} on a {} background", phrases.join(" and "), bg.name);

    Sample::new(
        format!("scene-{stream}-{index:06}"),
        image,
        Some(stacked),
        Some(cats),
        Some(caption),
        config.mask_stride,
    )
}

/// Per-pixel owner: 0 for background, `o + 1` for the topmost object whose
/// coverage reaches one half.
fn label_map(coverages: &[Array2<f64>]) -> Array2<usize> {
    let dim = coverages.first().map(|c| c.dim()).unwrap_or((0, 0));
    Array2::from_shape_fn(dim, |idx| {
        coverages
            .iter()
            .enumerate()
            .rev()
            .find(|(_, c)| c[idx] >= 0.5)
            .map(|(o, _)| o + 1)
            .unwrap_or(0)
    })
}

/// Writes `n` scenes of one stream to `out`. Manifest order is index order.
pub fn generate_dataset_with(
    config: &SceneConfig,
    n: usize,
    out: &Path,
    stream: u64,
    policy: &ScenePolicy,
) -> Result<Manifest> {
    let samples = (0..n as u64)
        .map(|i| generate_scene_with(config, i, stream, policy))
        .collect::<Result<Vec<_>>>()?;
    fs::create_dir_all(out).at(out)?;
    write_dataset(out, &samples)
}

pub fn generate_dataset(config: &SceneConfig, n: usize, out: &Path) -> Result<Manifest> {
    generate_dataset_with(config, n, out, 0, &ScenePolicy::Any)
}

pub const TRAIN_STREAM: u64 = 1;
pub const TEST_STREAM: u64 = 2;
pub const VAL_STREAM: u64 = 3;

/// Directories written by [`split_zero_shot`].
#[derive(Clone, Debug, PartialEq)]
pub struct SplitDirs {
    pub train: PathBuf,
    pub val: PathBuf,
    pub test: PathBuf,
}

/// Writes `out/train` and `out/val` (no held-out pair anywhere, from
/// independent streams) and `out/test` (every scene contains at least one
/// held-out pair).
pub fn split_zero_shot(
    config: &SceneConfig,
    split: &ConceptSplit,
    n_train: usize,
    n_val: usize,
    n_test: usize,
    out: &Path,
) -> Result<SplitDirs> {
    config.validate()?;
    split.validate(config)?;
    let dirs = SplitDirs {
        train: out.join("train"),
        val: out.join("val"),
        test: out.join("test"),
    };
    let (seen, unseen) = split_policies(split);
    generate_dataset_with(config, n_train, &dirs.train, TRAIN_STREAM, &seen)?;
    generate_dataset_with(config, n_val, &dirs.val, VAL_STREAM, &seen)?;
    generate_dataset_with(config, n_test, &dirs.test, TEST_STREAM, &unseen)?;
    Ok(dirs)
}

/// Scene policies for seen-only and must-contain-unseen scenes.
pub fn split_policies(split: &ConceptSplit) -> (ScenePolicy, ScenePolicy) {
    if split.holdout_pairs.is_empty() {
        (ScenePolicy::Any, ScenePolicy::Any)
    } else {
        (
            ScenePolicy::Exclude(split.holdout_pairs.clone()),
            ScenePolicy::RequireOne(split.holdout_pairs.clone()),
        )
    }
}
