//! The vision model: strided conv pyramid with lateral sums, two projection
//! heads, learnable positional embeddings, stacked query cross-attention,
//! mask prediction and mask pooling. The word-embedding table lives in the
//! same parameter store under [`EMBEDDINGS`].

use std::collections::HashMap;

use ndarray::{Array2, Array3, ArrayView2, ArrayView3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Real, Tensor, Var};
use crate::data::MaskProposalSet;
use crate::error::{Error, Result};
use crate::text::{EmbeddingProvider, OovPolicy};

pub const EMBEDDINGS: &str = "text.embeddings";
pub const LOG_TAU: &str = "log_tau";
pub const POS_EMBED: &str = "pos_embed";
pub const QUERIES: &str = "queries";

/// Input sides must be multiples of this.
pub const SIZE_MULTIPLE: usize = 32;
/// Output masks are at `1 / FEATURE_STRIDE` of the input resolution.
pub const FEATURE_STRIDE: usize = 4;

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Training resolution; sizes the positional-embedding table.
    pub image_size: usize,
    pub num_queries: usize,
    pub dim: usize,
    pub fused_dim: usize,
    pub stem_channels: usize,
    /// Channels of the stride 4, 8, 16 and 32 stages.
    pub stage_channels: [usize; 4],
    /// 3x3 convolutions after the fc layer in each projection head.
    pub head_convs: usize,
    pub blocks: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub init_tau: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            num_queries: 16,
            dim: 64,
            fused_dim: 64,
            stem_channels: 16,
            stage_channels: [32, 64, 64, 64],
            head_convs: 1,
            blocks: 3,
            heads: 4,
            ffn_mult: 2,
            init_tau: 0.1,
        }
    }
}

impl ModelConfig {
    /// A very small configuration for tests and gradient checks.
    pub fn tiny() -> Self {
        Self {
            image_size: 32,
            num_queries: 4,
            dim: 8,
            fused_dim: 8,
            stem_channels: 4,
            stage_channels: [4, 6, 6, 6],
            head_convs: 1,
            blocks: 2,
            heads: 2,
            ffn_mult: 2,
            init_tau: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.image_size == 0 || self.image_size % SIZE_MULTIPLE != 0 {
            return bad("image_size must be a positive multiple of 32");
        }
        if self.num_queries == 0 || self.dim == 0 || self.fused_dim == 0 || self.stem_channels == 0 {
            return bad("num_queries, dim, fused_dim and stem_channels must be positive");
        }
        if self.stage_channels.contains(&0) {
            return bad("stage_channels must be positive");
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return bad("dim must be divisible by heads");
        }
        if self.ffn_mult == 0 {
            return bad("ffn_mult must be positive");
        }
        if !(self.init_tau > 0.0 && self.init_tau.is_finite()) {
            return bad("init_tau must be positive");
        }
        Ok(())
    }

    /// Feature grid side at training resolution.
    pub fn grid(&self) -> usize {
        self.image_size / FEATURE_STRIDE
    }
}

/// Ordered named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<(String, Tensor<f32>)>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<f32>) {
        let name = name.into();
        match self.index.get(&name) {
            Some(&i) => self.entries[i].1 = t,
            None => {
                self.index.insert(name.clone(), self.entries.len());
                self.entries.push((name, t));
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<f32>> {
        self.index.get(name).map(|&i| &mut self.entries[i].1)
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<f32>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<f32>)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }
}

/// Parameters loaded into a graph, one node per store entry.
pub struct Bound<'a> {
    store: &'a ParamStore,
    vars: Vec<Var>,
}

impl Bound<'_> {
    pub fn var(&self, name: &str) -> Var {
        let i = self
            .store
            .position(name)
            .unwrap_or_else(|| panic!("missing parameter `{name}`"));
        self.vars[i]
    }

    /// `(name, node)` pairs in store order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> + '_ {
        self.store.names().zip(self.vars.iter().copied())
    }
}

/// Nodes produced by one forward pass over a batch.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    /// `B x H' x W' x D_f`.
    pub fused: Var,
    /// `B x H'W' x D`.
    pub f_s: Var,
    pub f_z: Var,
    pub f_s_pe: Var,
    /// Query state before each block and after the last, each `B x N x D`.
    pub queries: Vec<Var>,
    /// Attention weights per block, `B*heads x N x H'W'`.
    pub attention: Vec<Var>,
    /// Mask logits `B x N x H'W'`.
    pub mask_logits: Var,
    /// Soft masks `B x N x H'W'`.
    pub masks: Var,
    /// Pooled region features `B x N x D`.
    pub z: Var,
    pub grid: (usize, usize),
}

/// Intermediate feature maps of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBundle {
    pub fused: Array3<f64>,
    pub f_s: Array3<f64>,
    pub f_z: Array3<f64>,
    pub f_s_pe: Array3<f64>,
}

/// Proposals plus the per-pixel alignment features of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelOutput {
    pub proposals: MaskProposalSet,
    /// `H' x W' x D` features from the alignment head.
    pub pixel_features: Array3<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub vocab: Vec<String>,
}

fn normal(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let dist = Normal::new(0.0, std).expect("finite std");
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| dist.sample(rng) as f32).collect())
}

fn conv_w(k: usize, cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let fan_in = k * k * cin;
    normal(&[fan_in, cout], (2.0 / fan_in as f64).sqrt(), rng)
}

fn linear_w(cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    normal(&[cin, cout], (1.0 / cin as f64).sqrt(), rng)
}

fn stage_names(i: usize) -> [String; 5] {
    [
        format!("extractor.stage{i}.down.w"),
        format!("extractor.stage{i}.down.b"),
        format!("extractor.stage{i}.refine.w"),
        format!("extractor.stage{i}.refine.b"),
        format!("extractor.lateral{i}.w"),
    ]
}

impl Model {
    /// Randomly initialized model over `vocab`. Convolutions use He-normal
    /// weights, biases and positional embeddings start at zero, queries at
    /// N(0, 0.02^2) and word vectors at N(0, 1).
    pub fn new(config: ModelConfig, vocab: Vec<String>, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let c = &config;
        let z = |n: usize| Tensor::zeros(&[n]);

        p.insert("extractor.stem.w", conv_w(3, 3, c.stem_channels, &mut rng));
        p.insert("extractor.stem.b", z(c.stem_channels));
        let mut cin = c.stem_channels;
        for (i, &ch) in c.stage_channels.iter().enumerate() {
            let [dw, db, rw, rb, lw] = stage_names(i);
            p.insert(dw, conv_w(3, cin, ch, &mut rng));
            p.insert(db, z(ch));
            p.insert(rw, conv_w(3, ch, ch, &mut rng));
            p.insert(rb, z(ch));
            p.insert(lw, linear_w(ch, c.fused_dim, &mut rng));
            p.insert(format!("extractor.lateral{i}.b"), z(c.fused_dim));
            cin = ch;
        }
        for head in ["head_s", "head_z"] {
            p.insert(format!("{head}.fc.w"), linear_w(c.fused_dim, c.dim, &mut rng));
            p.insert(format!("{head}.fc.b"), z(c.dim));
            for j in 0..c.head_convs {
                p.insert(format!("{head}.conv{j}.w"), conv_w(3, c.dim, c.dim, &mut rng));
                p.insert(format!("{head}.conv{j}.b"), z(c.dim));
            }
        }
        let g = c.grid();
        p.insert(POS_EMBED, Tensor::zeros(&[g * g, c.dim]));
        p.insert(QUERIES, normal(&[c.num_queries, c.dim], 0.02, &mut rng));
        let hidden = c.dim * c.ffn_mult;
        for t in 0..c.blocks {
            for m in ["wq", "wk", "wv", "wo"] {
                p.insert(format!("block{t}.{m}"), linear_w(c.dim, c.dim, &mut rng));
            }
            p.insert(format!("block{t}.ffn1.w"), linear_w(c.dim, hidden, &mut rng));
            p.insert(format!("block{t}.ffn1.b"), z(hidden));
            p.insert(format!("block{t}.ffn2.w"), linear_w(hidden, c.dim, &mut rng));
            p.insert(format!("block{t}.ffn2.b"), z(c.dim));
        }
        p.insert(LOG_TAU, Tensor::scalar(c.init_tau.ln() as f32));
        p.insert(EMBEDDINGS, normal(&[vocab.len(), c.dim], 1.0, &mut rng));
        let mut seen = std::collections::HashSet::new();
        for w in &vocab {
            if !seen.insert(w.to_lowercase()) {
                return Err(Error::InvalidArgument(format!("duplicate vocabulary word `{w}`")));
            }
        }
        Ok(Self {
            config,
            params: p,
            vocab,
        })
    }

    pub fn tau(&self) -> f64 {
        f64::from(self.params.get(LOG_TAU).expect("log_tau").item()).exp()
    }

    /// Word-embedding provider over the model's current table.
    pub fn embeddings(&self, oov: OovPolicy) -> EmbeddingProvider {
        let t = self.params.get(EMBEDDINGS).expect("embedding table");
        let table = Array2::from_shape_vec((t.shape()[0], t.shape()[1]), t.data().to_vec()).expect("2-D");
        let mut e = EmbeddingProvider::new(self.vocab.clone(), table, oov).expect("validated vocabulary");
        e.oov = oov;
        e
    }

    /// Loads every parameter as a graph leaf; `trainable` picks which ones
    /// receive gradients.
    pub fn bind<'a, T: Real>(&'a self, g: &mut Graph<T>, trainable: impl Fn(&str) -> bool) -> Bound<'a> {
        self.bind_with(g, trainable, |_, _| {})
    }

    /// Like [`Model::bind`], but `adjust` may edit each value after it is
    /// cast to `T` (finite-difference probes perturb parameters this way).
    pub fn bind_with<'a, T: Real>(
        &'a self,
        g: &mut Graph<T>,
        trainable: impl Fn(&str) -> bool,
        adjust: impl Fn(&str, &mut Tensor<T>),
    ) -> Bound<'a> {
        let vars = self
            .params
            .iter()
            .map(|(name, t)| {
                let mut v = t.cast::<T>();
                adjust(name, &mut v);
                if trainable(name) {
                    g.param(v)
                } else {
                    g.constant(v)
                }
            })
            .collect();
        Bound {
            store: &self.params,
            vars,
        }
    }

    pub fn check_image_size(h: usize, w: usize) -> Result<()> {
        if h == 0 || w == 0 || h % SIZE_MULTIPLE != 0 || w % SIZE_MULTIPLE != 0 {
            return Err(Error::Shape(format!("image {h}x{w}: sides must be positive multiples of {SIZE_MULTIPLE}")));
        }
        Ok(())
    }

    /// Loads a batch of equally sized `H x W x 3` images as a constant.
    pub fn images_to_graph<T: Real>(g: &mut Graph<T>, images: &[&Array3<f32>]) -> Result<Var> {
        let first = images
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty image batch".into()))?;
        let (h, w, c) = first.dim();
        if c != 3 {
            return Err(Error::Shape(format!("image has {c} channels, expected 3")));
        }
        Self::check_image_size(h, w)?;
        let mut data = Vec::with_capacity(images.len() * h * w * 3);
        for im in images {
            if im.dim() != (h, w, 3) {
                return Err(Error::Shape(format!("batch mixes image sizes {:?} and {:?}", im.dim(), (h, w, 3))));
            }
            data.extend(im.iter().map(|&v| T::lit(f64::from(v))));
        }
        Ok(g.constant(Tensor::new(&[images.len(), h, w, 3], data)))
    }

    fn conv<T: Real>(g: &mut Graph<T>, x: Var, w: Var, b: Var, stride: usize) -> Var {
        let s = g.shape(x).to_vec();
        let cout = g.shape(w)[1];
        let cols = g.im2col(x, 3, stride, 1);
        let y = g.matmul(cols, w);
        let y = g.add_bcast(y, b);
        g.reshape(y, &[s[0], s[1] / stride, s[2] / stride, cout])
    }

    fn linear<T: Real>(g: &mut Graph<T>, x: Var, w: Var, b: Option<Var>) -> Var {
        let s = g.shape(x).to_vec();
        let (cin, cout) = (g.shape(w)[0], g.shape(w)[1]);
        let rows: usize = s.iter().product::<usize>() / cin;
        let flat = g.reshape(x, &[rows, cin]);
        let mut y = g.matmul(flat, w);
        if let Some(b) = b {
            y = g.add_bcast(y, b);
        }
        let mut out = s;
        *out.last_mut().expect("non-scalar") = cout;
        g.reshape(y, &out)
    }

    /// Fused stride-4 map `B x H/4 x W/4 x D_f`.
    pub fn extract_graph<T: Real>(&self, g: &mut Graph<T>, p: &Bound, images: Var) -> Var {
        let x = Self::conv(g, images, p.var("extractor.stem.w"), p.var("extractor.stem.b"), 2);
        let mut x = g.silu(x);
        let mut fused: Option<Var> = None;
        for i in 0..4 {
            let [dw, db, rw, rb, lw] = stage_names(i);
            let d = Self::conv(g, x, p.var(&dw), p.var(&db), 2);
            let d = g.silu(d);
            let r = Self::conv(g, d, p.var(&rw), p.var(&rb), 1);
            let r = g.silu(r);
            x = g.add(d, r);
            let lat = Self::linear(g, x, p.var(&lw), Some(p.var(&format!("extractor.lateral{i}.b"))));
            let lat = if i == 0 { lat } else { g.upsample(lat, 1 << i) };
            fused = Some(match fused {
                None => lat,
                Some(f) => g.add(f, lat),
            });
        }
        fused.expect("four stages")
    }

    fn head<T: Real>(&self, g: &mut Graph<T>, p: &Bound, name: &str, fused: Var) -> Var {
        let mut x = Self::linear(g, fused, p.var(&format!("{name}.fc.w")), Some(p.var(&format!("{name}.fc.b"))));
        for j in 0..self.config.head_convs {
            x = g.silu(x);
            x = Self::conv(g, x, p.var(&format!("{name}.conv{j}.w")), p.var(&format!("{name}.conv{j}.b")), 1);
        }
        x
    }

    /// Positional embeddings for a `gh x gw` grid, nearest-resampled from the
    /// training grid when the sizes differ.
    fn pos_embed<T: Real>(&self, g: &mut Graph<T>, p: &Bound, gh: usize, gw: usize) -> Var {
        let pe = p.var(POS_EMBED);
        let n = self.config.grid();
        if gh == n && gw == n {
            return pe;
        }
        let idx: Vec<usize> = (0..gh)
            .flat_map(|i| (0..gw).map(move |j| (i * n / gh) * n + j * n / gw))
            .collect();
        g.select_rows(pe, &idx)
    }

    /// One cross-attention block: queries attend over the memory, then a
    /// feed-forward layer; both with residuals and pre-normalization.
    /// Returns the new queries and the attention weights.
    pub fn cross_attention_graph<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        block: usize,
        q: Var,
        memory: Var,
    ) -> (Var, Var) {
        let (b, n, d) = {
            let s = g.shape(q);
            (s[0], s[1], s[2])
        };
        let hw = g.shape(memory)[1];
        let h = self.config.heads;
        let dh = d / h;
        let w = |m: &str| p.var(&format!("block{block}.{m}"));

        let qn = g.layer_norm(q, LN_EPS);
        let qq = g.matmul(qn, w("wq"));
        let kk = g.matmul(memory, w("wk"));
        let vv = g.matmul(memory, w("wv"));
        let split = |g: &mut Graph<T>, x: Var, len: usize| {
            let x = g.reshape(x, &[b, len, h, dh]);
            let x = g.permute(x, &[0, 2, 1, 3]);
            g.reshape(x, &[b * h, len, dh])
        };
        let qh = split(g, qq, n);
        let kh = split(g, kk, hw);
        let vh = split(g, vv, hw);
        let logits = g.matmul_t(qh, kh, false, true);
        let logits = g.scale(logits, 1.0 / (dh as f64).sqrt());
        let attn = g.softmax_last(logits);
        let out = g.matmul(attn, vh);
        let out = g.reshape(out, &[b, h, n, dh]);
        let out = g.permute(out, &[0, 2, 1, 3]);
        let out = g.reshape(out, &[b, n, d]);
        let out = g.matmul(out, w("wo"));
        let q = g.add(q, out);

        let qn = g.layer_norm(q, LN_EPS);
        let f = Self::linear(g, qn, w("ffn1.w"), Some(w("ffn1.b")));
        let f = g.silu(f);
        let f = Self::linear(g, f, w("ffn2.w"), Some(w("ffn2.b")));
        (g.add(q, f), attn)
    }

    /// Full forward pass over a batch of images (`B x H x W x 3`).
    pub fn forward_graph<T: Real>(&self, g: &mut Graph<T>, p: &Bound, images: Var) -> ForwardVars {
        let s = g.shape(images).to_vec();
        let (b, gh, gw) = (s[0], s[1] / FEATURE_STRIDE, s[2] / FEATURE_STRIDE);
        let d = self.config.dim;
        let fused = self.extract_graph(g, p, images);
        let f_s = self.head(g, p, "head_s", fused);
        let f_z = self.head(g, p, "head_z", fused);
        let f_s = g.reshape(f_s, &[b, gh * gw, d]);
        let f_z = g.reshape(f_z, &[b, gh * gw, d]);
        let pe = self.pos_embed(g, p, gh, gw);
        let f_s_pe = g.add_bcast(f_s, pe);

        let memory = g.layer_norm(f_s_pe, LN_EPS);
        let mut q = g.broadcast0(p.var(QUERIES), b);
        let mut queries = vec![q];
        let mut attention = Vec::with_capacity(self.config.blocks);
        for t in 0..self.config.blocks {
            let (next, attn) = self.cross_attention_graph(g, p, t, q, memory);
            q = next;
            queries.push(q);
            attention.push(attn);
        }
        let mask_logits = g.matmul_t(q, f_s_pe, false, true);
        let masks = g.sigmoid(mask_logits);
        let z = g.matmul(masks, f_z);
        ForwardVars {
            fused,
            f_s,
            f_z,
            f_s_pe,
            queries,
            attention,
            mask_logits,
            masks,
            z,
            grid: (gh, gw),
        }
    }

    /// Runs the model on a batch of equally sized images in precision `T`.
    pub fn forward_batch_as<T: Real>(&self, images: &[&Array3<f32>]) -> Result<Vec<ModelOutput>> {
        let mut g = Graph::<T>::new();
        let p = self.bind(&mut g, |_| false);
        let x = Self::images_to_graph(&mut g, images)?;
        let fv = self.forward_graph(&mut g, &p, x);
        let (gh, gw) = fv.grid;
        let (n, d) = (self.config.num_queries, self.config.dim);
        let masks = g.value(fv.masks).to_f64_vec();
        let z = g.value(fv.z).to_f64_vec();
        let fz = g.value(fv.f_z).to_f64_vec();
        Ok((0..images.len())
            .map(|b| {
                let m = n * gh * gw;
                ModelOutput {
                    proposals: MaskProposalSet {
                        masks: Array3::from_shape_vec((n, gh, gw), masks[b * m..(b + 1) * m].to_vec()).expect("mask shape"),
                        features: Array2::from_shape_vec((n, d), z[b * n * d..(b + 1) * n * d].to_vec()).expect("z shape"),
                    },
                    pixel_features: Array3::from_shape_vec(
                        (gh, gw, d),
                        fz[b * gh * gw * d..(b + 1) * gh * gw * d].to_vec(),
                    )
                    .expect("f_z shape"),
                }
            })
            .collect())
    }

    pub fn forward_as<T: Real>(&self, image: &Array3<f32>) -> Result<ModelOutput> {
        Ok(self.forward_batch_as::<T>(&[image])?.remove(0))
    }

    /// Single-image forward pass in `f32`.
    pub fn forward(&self, image: &Array3<f32>) -> Result<ModelOutput> {
        self.forward_as::<f32>(image)
    }

    pub fn forward_batch(&self, images: &[&Array3<f32>]) -> Result<Vec<ModelOutput>> {
        self.forward_batch_as::<f32>(images)
    }

    /// Feature maps of one image, computed in `f64`.
    pub fn features(&self, image: &Array3<f32>) -> Result<FeatureBundle> {
        let mut g = Graph::<f64>::new();
        let p = self.bind(&mut g, |_| false);
        let x = Self::images_to_graph(&mut g, &[image])?;
        let fv = self.forward_graph(&mut g, &p, x);
        let (gh, gw) = fv.grid;
        let d = self.config.dim;
        let grid3 = |v: Var, c: usize| {
            Array3::from_shape_vec((gh, gw, c), g.value(v).data().to_vec()).expect("grid shape")
        };
        Ok(FeatureBundle {
            fused: grid3(fv.fused, self.config.fused_dim),
            f_s: grid3(fv.f_s, d),
            f_z: grid3(fv.f_z, d),
            f_s_pe: grid3(fv.f_s_pe, d),
        })
    }

    /// Applies block `block` to queries `q` (`N x D`) over position-augmented
    /// features (`H' x W' x D`). Returns the new queries and the attention
    /// weights `heads x N x H'W'`.
    pub fn cross_attention_step(
        &self,
        block: usize,
        q: ArrayView2<'_, f64>,
        f_s_pe: ArrayView3<'_, f64>,
    ) -> Result<(Array2<f64>, Array3<f64>)> {
        let d = self.config.dim;
        let (gh, gw, fd) = f_s_pe.dim();
        if q.ncols() != d || fd != d || q.nrows() == 0 {
            return Err(Error::Shape(format!("queries {:?} / features {:?} vs dim {d}", q.dim(), f_s_pe.dim())));
        }
        if block >= self.config.blocks {
            return Err(Error::InvalidArgument(format!("block {block} of {}", self.config.blocks)));
        }
        let mut g = Graph::<f64>::new();
        let p = self.bind(&mut g, |_| false);
        let qv = g.constant(Tensor::new(&[1, q.nrows(), d], q.iter().copied().collect()));
        let mem = g.constant(Tensor::new(&[1, gh * gw, d], f_s_pe.iter().copied().collect()));
        let mem = g.layer_norm(mem, LN_EPS);
        let (out, attn) = self.cross_attention_graph(&mut g, &p, block, qv, mem);
        Ok((
            Array2::from_shape_vec((q.nrows(), d), g.value(out).data().to_vec()).expect("q shape"),
            Array3::from_shape_vec((self.config.heads, q.nrows(), gh * gw), g.value(attn).data().to_vec())
                .expect("attention shape"),
        ))
    }
}

/// `s[n, i, j] = sigmoid(q[n] . f[i, j])`.
pub fn predict_masks(q: ArrayView2<'_, f64>, f_s_pe: ArrayView3<'_, f64>) -> Result<Array3<f64>> {
    let (gh, gw, d) = f_s_pe.dim();
    if q.ncols() != d {
        return Err(Error::Shape(format!("query dim {} vs feature dim {d}", q.ncols())));
    }
    let flat = f_s_pe.to_shape((gh * gw, d)).expect("contiguous");
    let logits = q.dot(&flat.t());
    let s = logits.mapv(|x| {
        if x >= 0.0 {
            1.0 / (1.0 + (-x).exp())
        } else {
            let e = x.exp();
            e / (1.0 + e)
        }
    });
    Ok(s.into_shape_with_order((q.nrows(), gh, gw)).expect("mask shape"))
}

/// `z[n, d] = sum_ij s[n, i, j] f_z[i, j, d]`, unnormalized.
pub fn pool_region_features(s: ArrayView3<'_, f64>, f_z: ArrayView3<'_, f64>) -> Result<Array2<f64>> {
    let (n, h, w) = s.dim();
    let (fh, fw, d) = f_z.dim();
    if (h, w) != (fh, fw) {
        return Err(Error::Shape(format!("masks {h}x{w} vs features {fh}x{fw}")));
    }
    let sf = s.to_shape((n, h * w)).expect("contiguous");
    let ff = f_z.to_shape((h * w, d)).expect("contiguous");
    Ok(sf.dot(&ff))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Axis};

    fn vocab() -> Vec<String> {
        ["red", "circle", "background"].iter().map(|s| s.to_string()).collect()
    }

    fn image(seed: u64, size: usize) -> Array3<f32> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_simple_fn((size, size, 3), || rng.random::<f32>())
    }

    #[test]
    fn output_shapes_and_ranges() {
        let cfg = ModelConfig::tiny();
        let m = Model::new(cfg.clone(), vocab(), 0).unwrap();
        let out = m.forward(&image(1, 32)).unwrap();
        assert_eq!(out.proposals.masks.dim(), (4, 8, 8));
        assert_eq!(out.proposals.features.dim(), (4, 8));
        assert_eq!(out.pixel_features.dim(), (8, 8, 8));
        assert!(out.proposals.masks.iter().all(|&v| v > 0.0 && v < 1.0));
        let f = m.features(&image(1, 32)).unwrap();
        assert_eq!(f.fused.dim(), (8, 8, cfg.fused_dim));
        assert_eq!(f.f_s, f.f_s_pe, "zero-initialized positional embeddings");
        assert_ne!(f.f_s, f.f_z);
    }

    #[test]
    fn default_shapes() {
        let m = Model::new(ModelConfig::default(), vocab(), 0).unwrap();
        let out = m.forward(&image(2, 64)).unwrap();
        assert_eq!(out.proposals.masks.dim(), (16, 16, 16));
        assert_eq!(out.proposals.features.dim(), (16, 64));
        assert!((m.tau() - 0.1).abs() < 1e-6);
    }

    #[test]
    fn deterministic_and_size_checked() {
        let m = Model::new(ModelConfig::tiny(), vocab(), 3).unwrap();
        let im = image(4, 32);
        assert_eq!(m.forward(&im).unwrap(), m.forward(&im).unwrap());
        assert!(matches!(m.forward(&image(4, 48)), Err(Error::Shape(_))));
        let big = m.forward(&image(5, 64)).unwrap();
        assert_eq!(big.proposals.masks.dim(), (4, 16, 16));
    }

    #[test]
    fn zero_image_zero_bias_gives_zero_features() {
        let m = Model::new(ModelConfig::tiny(), vocab(), 0).unwrap();
        let f = m.features(&Array3::zeros((32, 32, 3))).unwrap();
        assert!(f.fused.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn one_pixel_changes_features() {
        let m = Model::new(ModelConfig::tiny(), vocab(), 0).unwrap();
        let a = image(6, 32);
        let mut b = a.clone();
        b[(17, 9, 1)] = 1.0 - b[(17, 9, 1)];
        assert_ne!(m.features(&a).unwrap().fused, m.features(&b).unwrap().fused);
    }

    #[test]
    fn attention_rows_sum_to_one_and_uniform_memory() {
        let m = Model::new(ModelConfig::tiny(), vocab(), 1).unwrap();
        let f = m.features(&image(7, 32)).unwrap();
        let q = m.params.get(QUERIES).unwrap().cast::<f64>();
        let q = Array2::from_shape_vec((4, 8), q.into_data()).unwrap();
        let (out, attn) = m.cross_attention_step(0, q.view(), f.f_s_pe.view()).unwrap();
        assert_eq!(out.dim(), (4, 8));
        for s in attn.sum_axis(Axis(2)).iter() {
            assert!((s - 1.0).abs() < 1e-6);
        }
        // Identical positions: result does not depend on how many there are.
        let v = f.f_s_pe.slice(ndarray::s![0..1, 0..1, ..]).to_owned();
        let one = v.clone();
        let many = v.broadcast((3, 5, 8)).unwrap().to_owned();
        let (a, _) = m.cross_attention_step(0, q.view(), one.view()).unwrap();
        let (b, _) = m.cross_attention_step(0, q.view(), many.view()).unwrap();
        assert!((&a - &b).iter().all(|d| d.abs() < 1e-12));
        let (single, _) = m.cross_attention_step(1, q.slice(ndarray::s![0..1, ..]), f.f_s_pe.view()).unwrap();
        assert_eq!(single.dim(), (1, 8));
    }

    #[test]
    fn mask_prediction_examples() {
        let q = array![[1.0, 0.0]];
        let f = Array3::from_shape_vec((1, 2, 2), vec![3f64.ln(), 5.0, 0.0, 7.0]).unwrap();
        let s = predict_masks(q.view(), f.view()).unwrap();
        assert!((s[(0, 0, 0)] - 0.75).abs() < 1e-12);
        assert_eq!(s[(0, 0, 1)], 0.5);
        let f20 = Array3::from_shape_vec((1, 1, 2), vec![20.0, 0.0]).unwrap();
        assert!(predict_masks(q.view(), f20.view()).unwrap()[(0, 0, 0)] > 0.999999);
    }

    #[test]
    fn pooling_examples() {
        let mut s = Array3::<f64>::zeros((1, 2, 2));
        s[(0, 1, 0)] = 1.0;
        let f = Array3::from_shape_fn((2, 2, 3), |(i, j, k)| (i * 7 + j * 3 + k) as f64);
        let z = pool_region_features(s.view(), f.view()).unwrap();
        assert_eq!(z.row(0), f.slice(ndarray::s![1, 0, ..]));
        let zero = Array3::<f64>::zeros((2, 2, 3));
        assert!(pool_region_features(s.view(), zero.view()).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn graph_pooling_matches_plain_function() {
        let m = Model::new(ModelConfig::tiny(), vocab(), 2).unwrap();
        let im = image(8, 32);
        let out = m.forward_as::<f64>(&im).unwrap();
        let z = pool_region_features(out.proposals.masks.view(), out.pixel_features.view()).unwrap();
        assert!((&z - &out.proposals.features).iter().all(|d| d.abs() < 1e-9));
    }
}
