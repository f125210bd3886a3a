//! Training objectives: soft Dice, best-match segmentation loss, temperature
//! softmax, word-region grounding similarity and the batch-contrastive
//! grounding loss.
//!
//! Each objective exists twice: as graph builders used by training and the
//! gradient checks, and as plain `f64` functions over `ndarray` inputs.

use ndarray::{ArrayView2, ArrayView3, ArrayViewD};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Real, Tensor, Var};
use crate::error::{Error, Result};

pub const DICE_EPS: f64 = 1e-6;

/// Norm guard used inside training; the plain functions reject zero norms.
pub const TRAIN_NORM_EPS: f64 = 1e-8;

/// Weight of the segmentation term in the total loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 1.0 }
    }
}

impl LossWeights {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(alpha >= 0.0 && alpha.is_finite()) {
            return Err(Error::InvalidArgument(format!("alpha must be finite and >= 0, got {alpha}")));
        }
        Ok(Self { alpha })
    }
}

// ---------------------------------------------------------------------------
// Graph builders

/// Soft Dice between every proposal and every label: `s` is `N x P`,
/// `labels` is `M x P`; the result is `N x M`.
pub fn dice_matrix<T: Real>(g: &mut Graph<T>, s: Var, labels: Var) -> Var {
    let n = g.shape(s)[0];
    let m = g.shape(labels)[0];
    let inter = g.matmul_t(s, labels, false, true);
    let num = g.scale(inter, 2.0);
    let s2 = g.square(s);
    let ss = g.sum_last(s2);
    let l2 = g.square(labels);
    let ll = g.sum_last(l2);
    let ss = g.repeat_cols(ss, m);
    let ll = g.broadcast0(ll, n);
    let den = g.add(ss, ll);
    let den = g.add_const(den, DICE_EPS);
    g.div(num, den)
}

/// For each label column, the row holding the largest value; ties go to the
/// lowest row.
pub fn best_match<T: Real>(values: &Tensor<T>) -> Vec<usize> {
    let (n, m) = (values.shape()[0], values.shape()[1]);
    (0..m)
        .map(|j| {
            let mut best = 0;
            for i in 1..n {
                if values.data()[i * m + j] > values.data()[best * m + j] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// `1 - mean_j max_i dice(s_i, l_j)`; gradient flows only through the
/// selected proposal of each label.
pub fn segmentation_loss_graph<T: Real>(g: &mut Graph<T>, s: Var, labels: Var) -> Var {
    let m = g.shape(labels)[0];
    let d = dice_matrix(g, s, labels);
    let best = best_match(g.value(d));
    let idx: Vec<usize> = best.iter().enumerate().map(|(j, &i)| i * m + j).collect();
    let picked = g.gather(d, &idx);
    let mean = g.mean(picked);
    let neg = g.neg(mean);
    g.add_const(neg, 1.0)
}

/// Caption-by-image similarity matrix.
///
/// `z` is `B_i x N x D` region features, `words` is `K x D` with caption `c`
/// owning the contiguous rows `segments[c]`. Entry `(c, i)` averages, over
/// the words of caption `c`, the softmax-weighted cosine between the word and
/// the regions of image `i`. `inv_tau` is a one-element node.
pub fn similarity_matrix<T: Real>(
    g: &mut Graph<T>,
    z: Var,
    words: Var,
    segments: &[(usize, usize)],
    inv_tau: Var,
    norm_eps: f64,
) -> Var {
    let (b, n, d) = {
        let s = g.shape(z);
        (s[0], s[1], s[2])
    };
    let k = g.shape(words)[0];
    let zf = g.reshape(z, &[b * n, d]);
    let zn = g.l2_normalize(zf, norm_eps);
    let wn = g.l2_normalize(words, norm_eps);
    let cos = g.matmul_t(wn, zn, false, true);
    let cos = g.reshape(cos, &[k, b, n]);
    let logits = g.mul_scalar(cos, inv_tau);
    let attn = g.softmax_last(logits);
    let weighted = g.mul(attn, cos);
    let per_word = g.sum_last(weighted);
    g.segment_mean0(per_word, segments)
}

/// Contrastive loss over a square caption-by-image similarity matrix, split
/// into contiguous diagonal blocks of `partition` examples. With
/// `partition == B` this is the full-batch loss.
pub fn grounding_loss_graph<T: Real>(g: &mut Graph<T>, sim: Var, inv_tau: Var, partition: usize) -> Var {
    let b = g.shape(sim)[0];
    assert_eq!(g.shape(sim), &[b, b], "similarity matrix must be square");
    assert!(partition >= 1 && b % partition == 0, "partition must divide the batch");
    let mut diag_terms = Vec::with_capacity(2 * b / partition);
    for p in 0..b / partition {
        let o = p * partition;
        let block_idx: Vec<usize> = (0..partition)
            .flat_map(|r| (0..partition).map(move |c| (o + r) * b + o + c))
            .collect();
        let block = g.gather(sim, &block_idx);
        let block = g.reshape(block, &[partition, partition]);
        let scaled = g.mul_scalar(block, inv_tau);
        let diag: Vec<usize> = (0..partition).map(|i| i * partition + i).collect();
        // rows: caption against every image; transposed: image against every caption
        let over_images = g.log_softmax_last(scaled);
        diag_terms.push(g.gather(over_images, &diag));
        let t = g.transpose(scaled);
        let over_captions = g.log_softmax_last(t);
        diag_terms.push(g.gather(over_captions, &diag));
    }
    let all = g.concat0(&diag_terms);
    let total = g.sum(all);
    g.scale(total, -1.0 / b as f64)
}

/// `l_g + alpha * l_s`.
pub fn total_loss_graph<T: Real>(g: &mut Graph<T>, l_g: Var, l_s: Var, weights: LossWeights) -> Var {
    if weights.alpha == 0.0 {
        return l_g;
    }
    let ws = g.scale(l_s, weights.alpha);
    g.add(l_g, ws)
}

// ---------------------------------------------------------------------------
// Plain functions

fn tensor2(a: ArrayView2<'_, f64>) -> Tensor<f64> {
    Tensor::new(&[a.nrows(), a.ncols()], a.iter().copied().collect())
}

fn check_finite<'a>(what: &str, mut vals: impl Iterator<Item = &'a f64>) -> Result<()> {
    if vals.any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(format!("{what} contains non-finite values")));
    }
    Ok(())
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")));
    }
    Ok(())
}

fn check_nonzero_rows(what: &'static str, a: ArrayView2<'_, f64>) -> Result<()> {
    for (row, r) in a.rows().into_iter().enumerate() {
        if r.dot(&r) == 0.0 {
            return Err(Error::ZeroNorm { what, row });
        }
    }
    Ok(())
}

/// Soft Dice `2 sum(ab) / (sum(a^2) + sum(b^2) + eps)`.
pub fn dice(a: ArrayViewD<'_, f64>, b: ArrayViewD<'_, f64>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("dice operands {:?} and {:?}", a.shape(), b.shape())));
    }
    if a.iter().chain(b.iter()).any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(Error::InvalidArgument("dice operands must be finite and non-negative".into()));
    }
    let inter: f64 = a.iter().zip(b.iter()).map(|(x, y)| x * y).sum();
    let aa: f64 = a.iter().map(|x| x * x).sum();
    let bb: f64 = b.iter().map(|x| x * x).sum();
    Ok(2.0 * inter / (aa + bb + DICE_EPS))
}

/// Best-match segmentation loss between `N` soft proposals and `M` labels.
pub fn segmentation_loss(s: ArrayView3<'_, f64>, labels: ArrayView3<'_, f64>) -> Result<f64> {
    let (n, h, w) = s.dim();
    let (m, lh, lw) = labels.dim();
    if n == 0 {
        return Err(Error::InvalidArgument("no proposals".into()));
    }
    if m == 0 {
        return Err(Error::InvalidArgument("no labeled masks; skip the mask loss for caption-only samples".into()));
    }
    if (h, w) != (lh, lw) {
        return Err(Error::Shape(format!("proposals {h}x{w} vs labels {lh}x{lw}")));
    }
    if s.iter().chain(labels.iter()).any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(Error::InvalidArgument("masks must be finite and non-negative".into()));
    }
    let mut g = Graph::<f64>::new();
    let sv = g.constant(Tensor::new(&[n, h * w], s.iter().copied().collect()));
    let lv = g.constant(Tensor::new(&[m, h * w], labels.iter().copied().collect()));
    let loss = segmentation_loss_graph(&mut g, sv, lv);
    Ok(g.item(loss))
}

/// `exp(x_i / tau) / sum_j exp(x_j / tau)`, max-shifted.
pub fn softmax_temp(x: &[f64], tau: f64) -> Result<Vec<f64>> {
    check_tau(tau)?;
    if x.is_empty() {
        return Err(Error::InvalidArgument("softmax of an empty vector".into()));
    }
    check_finite("softmax input", x.iter())?;
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|&v| ((v - m) / tau).exp()).collect();
    let z: f64 = e.iter().sum();
    Ok(e.into_iter().map(|v| v / z).collect())
}

/// Similarity of one image (`N x D` regions) and one caption (`K x D` words).
pub fn image_caption_similarity(z: ArrayView2<'_, f64>, w: ArrayView2<'_, f64>, tau: f64) -> Result<f64> {
    check_tau(tau)?;
    if z.nrows() == 0 || w.nrows() == 0 {
        return Err(Error::InvalidArgument("need at least one region and one word".into()));
    }
    if z.ncols() != w.ncols() {
        return Err(Error::Shape(format!("region dim {} vs word dim {}", z.ncols(), w.ncols())));
    }
    check_finite("region features", z.iter())?;
    check_finite("word embeddings", w.iter())?;
    check_nonzero_rows("region", z)?;
    check_nonzero_rows("word", w)?;
    let mut g = Graph::<f64>::new();
    let zv = g.constant(Tensor::new(&[1, z.nrows(), z.ncols()], z.iter().copied().collect()));
    let wv = g.constant(tensor2(w));
    let inv = g.scalar(1.0 / tau);
    let sim = similarity_matrix(&mut g, zv, wv, &[(0, w.nrows())], inv, 0.0);
    Ok(g.item(sim))
}

/// One mini-batch for the grounding loss: example `b` pairs image regions
/// `regions[b]` with caption words `words[b]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundingBatch {
    pub regions: Vec<ndarray::Array2<f64>>,
    pub words: Vec<ndarray::Array2<f64>>,
    pub tau: f64,
}

impl GroundingBatch {
    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        check_tau(self.tau)?;
        if self.regions.is_empty() {
            return Err(Error::InvalidArgument("empty grounding batch".into()));
        }
        if self.regions.len() != self.words.len() {
            return Err(Error::Shape(format!(
                "{} images for {} captions",
                self.regions.len(),
                self.words.len()
            )));
        }
        let (n, d) = self.regions[0].dim();
        for (b, (z, w)) in self.regions.iter().zip(&self.words).enumerate() {
            if z.dim() != (n, d) || n == 0 {
                return Err(Error::Shape(format!("example {b}: regions {:?}, expected {n}x{d}", z.dim())));
            }
            if w.nrows() == 0 {
                return Err(Error::InvalidArgument(format!("example {b}: caption has no words")));
            }
            if w.ncols() != d {
                return Err(Error::Shape(format!("example {b}: word dim {} vs {d}", w.ncols())));
            }
            check_finite("region features", z.iter())?;
            check_finite("word embeddings", w.iter())?;
            check_nonzero_rows("region", z.view())?;
            check_nonzero_rows("word", w.view())?;
        }
        Ok(())
    }

    /// Loads the batch into a graph as constants: `(z, words, segments)`.
    pub fn to_graph<T: Real>(&self, g: &mut Graph<T>) -> (Var, Var, Vec<(usize, usize)>) {
        let (n, d) = self.regions[0].dim();
        let zdata: Vec<f64> = self.regions.iter().flat_map(|z| z.iter().copied()).collect();
        let z = g.constant(Tensor::from_f64(&[self.len(), n, d], &zdata));
        let mut segments = Vec::with_capacity(self.len());
        let mut wdata = Vec::new();
        for w in &self.words {
            segments.push((wdata.len() / d, w.nrows()));
            wdata.extend(w.iter().copied());
        }
        let words = g.constant(Tensor::from_f64(&[wdata.len() / d, d], &wdata));
        (z, words, segments)
    }
}

/// Caption-by-image similarity matrix of a batch; entry `(c, i)` is
/// `image_caption_similarity(regions[i], words[c])`.
pub fn similarity_table(batch: &GroundingBatch) -> Result<ndarray::Array2<f64>> {
    batch.validate()?;
    let mut g = Graph::<f64>::new();
    let (z, w, seg) = batch.to_graph(&mut g);
    let inv = g.scalar(1.0 / batch.tau);
    let sim = similarity_matrix(&mut g, z, w, &seg, inv, 0.0);
    let b = batch.len();
    Ok(ndarray::Array2::from_shape_vec((b, b), g.value(sim).data().to_vec()).expect("square"))
}

pub fn grounding_loss(batch: &GroundingBatch) -> Result<f64> {
    partitioned_grounding_loss(batch, batch.len())
}

/// Mean of the grounding losses of contiguous partitions of the batch.
pub fn partitioned_grounding_loss(batch: &GroundingBatch, partition_size: usize) -> Result<f64> {
    batch.validate()?;
    let b = batch.len();
    if partition_size == 0 || b % partition_size != 0 {
        return Err(Error::InvalidArgument(format!(
            "partition size {partition_size} does not divide batch size {b}"
        )));
    }
    let mut g = Graph::<f64>::new();
    let (z, w, seg) = batch.to_graph(&mut g);
    let inv = g.scalar(1.0 / batch.tau);
    let sim = similarity_matrix(&mut g, z, w, &seg, inv, 0.0);
    let loss = grounding_loss_graph(&mut g, sim, inv, partition_size);
    Ok(g.item(loss))
}

/// Grounding loss of a precomputed square similarity matrix.
pub fn grounding_loss_from_similarity(sim: ArrayView2<'_, f64>, tau: f64) -> Result<f64> {
    check_tau(tau)?;
    let b = sim.nrows();
    if b == 0 || sim.ncols() != b {
        return Err(Error::Shape(format!("similarity matrix {:?} must be square and non-empty", sim.dim())));
    }
    check_finite("similarity matrix", sim.iter())?;
    let mut g = Graph::<f64>::new();
    let s = g.constant(tensor2(sim));
    let inv = g.scalar(1.0 / tau);
    let loss = grounding_loss_graph(&mut g, s, inv, b);
    Ok(g.item(loss))
}

pub fn total_loss(l_g: f64, l_s: f64, weights: LossWeights) -> f64 {
    l_g + weights.alpha * l_s
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2, Array3};

    #[test]
    fn dice_examples() {
        let ones = Array2::<f64>::ones((2, 2)).into_dyn();
        assert!((dice(ones.view(), ones.view()).unwrap() - 1.0).abs() < 1e-6);
        let a = array![1.0, 1.0, 0.0, 0.0].into_dyn();
        let b = array![0.0, 0.0, 1.0, 1.0].into_dyn();
        let c = array![1.0, 0.0, 1.0, 0.0].into_dyn();
        assert_eq!(dice(a.view(), b.view()).unwrap(), 0.0);
        assert!((dice(a.view(), c.view()).unwrap() - 0.5).abs() < 1e-6);
        assert!(dice(a.view(), ones.view()).is_err());
    }

    #[test]
    fn segmentation_loss_examples() {
        let mut s = Array3::<f64>::zeros((2, 2, 2));
        s[(1, 0, 0)] = 1.0;
        s[(1, 1, 1)] = 1.0;
        let mut l = Array3::<f64>::zeros((1, 2, 2));
        l[(0, 0, 0)] = 1.0;
        l[(0, 1, 1)] = 1.0;
        assert!(segmentation_loss(s.view(), l.view()).unwrap() < 1e-6);
        let mut far = Array3::<f64>::zeros((1, 2, 2));
        far[(0, 0, 1)] = 1.0;
        assert!((segmentation_loss(s.view(), far.view()).unwrap() - 1.0).abs() < 1e-6);
        let none = Array3::<f64>::zeros((0, 2, 2));
        assert!(segmentation_loss(s.view(), none.view()).is_err());
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax_temp(&[0.0, 0.0], 1.0).unwrap(), vec![0.5, 0.5]);
        let p = softmax_temp(&[2f64.ln(), 0.0], 1.0).unwrap();
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-12 && (p[1] - 1.0 / 3.0).abs() < 1e-12);
        let q = softmax_temp(&[5.0, 1.0], 0.01).unwrap();
        assert!(q[0] > 1.0 - 1e-12);
        assert!(softmax_temp(&[1.0], 0.0).is_err());
    }

    #[test]
    fn similarity_examples() {
        let w = array![[0.3, -0.4, 1.2]];
        let z = w.mapv(|v| 2.0 * v);
        assert!((image_caption_similarity(z.view(), w.view(), 0.5).unwrap() - 1.0).abs() < 1e-12);
        let z2 = ndarray::concatenate![ndarray::Axis(0), w.view(), (-&w).view()];
        let g = image_caption_similarity(z2.view(), w.view(), 1.0).unwrap();
        assert!((g - 1f64.tanh()).abs() < 1e-12);
        let zero = Array2::<f64>::zeros((1, 3));
        assert!(matches!(
            image_caption_similarity(zero.view(), w.view(), 1.0),
            Err(Error::ZeroNorm { what: "region", row: 0 })
        ));
    }

    #[test]
    fn grounding_examples() {
        let single = GroundingBatch {
            regions: vec![array![[1.0, 0.0], [0.0, 1.0]]],
            words: vec![array![[1.0, 1.0]]],
            tau: 0.1,
        };
        assert_eq!(grounding_loss(&single).unwrap(), 0.0);
        let sim = array![[1.0, -1.0], [-1.0, 1.0]];
        let l = grounding_loss_from_similarity(sim.view(), 1.0).unwrap();
        // four log terms of log(e / (e + 1/e)), averaged over |B| = 2
        let term = -(1f64.exp() / (1f64.exp() + (-1f64).exp())).ln();
        assert!((l - 2.0 * term).abs() < 1e-12, "{l}");
        let bad = GroundingBatch {
            words: vec![Array2::zeros((0, 2))],
            ..single
        };
        assert!(grounding_loss(&bad).is_err());
    }

    #[test]
    fn total_loss_arithmetic() {
        assert_eq!(total_loss(0.3, 0.2, LossWeights::new(0.0).unwrap()), 0.3);
        assert!((total_loss(0.3, 0.2, LossWeights::default()) - 0.5).abs() < 1e-15);
        assert!(LossWeights::new(-1.0).is_err());
    }

    #[test]
    fn best_match_ties_go_low() {
        let t = Tensor::new(&[3, 2], vec![0.5, 0.1, 0.5, 0.9, 0.2, 0.9]);
        assert_eq!(best_match(&t), vec![0, 1]);
    }
}
