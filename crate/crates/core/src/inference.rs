//! Test-time segmentation against arbitrary text queries.

use std::collections::BTreeSet;

use ndarray::{Array2, Array3, ArrayView2, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::data::{MaskProposalSet, SegmentationResult};
use crate::error::{Error, Result};
use crate::model::{Model, ModelOutput};
use crate::text::{embed_queries, CategoryQueries, EmbeddingProvider, PhraseEmbedding, QueryEmbeddings};

fn normalized_rows(what: &'static str, a: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let mut out = a.to_owned();
    for (row, mut r) in out.rows_mut().into_iter().enumerate() {
        let n = r.dot(&r).sqrt();
        if n == 0.0 || !n.is_finite() {
            return Err(Error::ZeroNorm { what, row });
        }
        r /= n;
    }
    Ok(out)
}

/// Cosine similarity of every query row with every region, `K x N`.
pub fn region_logits(w: ArrayView2<'_, f64>, z: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    if w.ncols() != z.ncols() {
        return Err(Error::Shape(format!("query dim {} vs region dim {}", w.ncols(), z.ncols())));
    }
    let wn = normalized_rows("word", w)?;
    let zn = normalized_rows("region", z)?;
    Ok(wn.dot(&zn.t()))
}

/// `y[k, i, j] = sum_n rl[k, n] s[n, i, j]`.
pub fn pixel_logits(rl: ArrayView2<'_, f64>, s: ArrayView3<'_, f64>) -> Result<Array3<f64>> {
    let (n, h, w) = s.dim();
    if rl.ncols() != n {
        return Err(Error::Shape(format!("{} region logits for {n} masks", rl.ncols())));
    }
    let flat = s.to_shape((n, h * w)).expect("reshape");
    let y = rl.dot(&flat);
    Ok(y.into_shape_with_order((rl.nrows(), h, w)).expect("logit shape"))
}

/// Per-pixel max over the phrase maps of each category. `grouping[p]` is
/// the category of phrase `p`.
pub fn ensemble_reduce(y: ArrayView3<'_, f64>, grouping: &[usize], n_categories: usize) -> Result<Array3<f64>> {
    let (kp, h, w) = y.dim();
    if grouping.len() != kp {
        return Err(Error::Shape(format!("{} group entries for {kp} phrase maps", grouping.len())));
    }
    if let Some(&bad) = grouping.iter().find(|&&c| c >= n_categories) {
        return Err(Error::InvalidArgument(format!("phrase mapped to category {bad} of {n_categories}")));
    }
    let mut out = Array3::from_elem((n_categories, h, w), f64::NEG_INFINITY);
    for (p, &c) in grouping.iter().enumerate() {
        let src = y.index_axis(Axis(0), p);
        ndarray::Zip::from(out.index_axis_mut(Axis(0), c))
            .and(&src)
            .for_each(|o, &v| *o = o.max(v));
    }
    if let Some(c) = (0..n_categories).find(|&c| !grouping.contains(&c)) {
        return Err(Error::InvalidArgument(format!("category {c} has no phrases")));
    }
    Ok(out)
}

/// Per-pixel argmax over categories; ties go to the lowest index.
pub fn predict(y: ArrayView3<'_, f64>) -> Result<Array2<u32>> {
    let (k, h, w) = y.dim();
    if k == 0 {
        return Err(Error::InvalidArgument("no categories to predict".into()));
    }
    Ok(Array2::from_shape_fn((h, w), |(i, j)| {
        let mut best = 0;
        for c in 1..k {
            if y[(c, i, j)] > y[(best, i, j)] {
                best = c;
            }
        }
        best as u32
    }))
}

/// Relabels every pixel whose category is outside `foreground` as
/// `background`. Labels index a context of `n_context` categories.
pub fn apply_background_rule(
    label_map: ArrayView2<'_, u32>,
    foreground: &[u32],
    n_context: usize,
    background: u32,
) -> Result<Array2<u32>> {
    if let Some(&c) = foreground.iter().find(|&&c| c as usize >= n_context) {
        return Err(Error::InvalidArgument(format!("foreground category {c} not in a context of {n_context}")));
    }
    let fg: BTreeSet<u32> = foreground.iter().copied().collect();
    Ok(label_map.mapv(|l| if fg.contains(&l) { l } else { background }))
}

/// Cosine of each pixel feature with each query, `K x H' x W'`.
pub fn per_pixel_scores(f_z: ArrayView3<'_, f64>, w: ArrayView2<'_, f64>) -> Result<Array3<f64>> {
    let (h, wd, d) = f_z.dim();
    let flat = f_z.to_shape((h * wd, d)).expect("reshape");
    let cos = region_logits(w, flat.view()).map_err(|e| match e {
        Error::ZeroNorm { what: "region", row } => Error::ZeroNorm { what: "pixel", row },
        e => e,
    })?;
    Ok(cos.into_shape_with_order((w.nrows(), h, wd)).expect("score shape"))
}

/// Segmentation from pixel features alone, without proposals.
pub fn per_pixel_predict(f_z: ArrayView3<'_, f64>, w: ArrayView2<'_, f64>) -> Result<Array2<u32>> {
    predict(per_pixel_scores(f_z, w)?.view())
}

/// Best query and its cosine score for each proposal.
pub fn classify_proposals(z: ArrayView2<'_, f64>, w: ArrayView2<'_, f64>) -> Result<Vec<(usize, f64)>> {
    if z.nrows() == 0 {
        return Err(Error::InvalidArgument("no proposals".into()));
    }
    let rl = region_logits(w, z)?;
    Ok((0..z.nrows())
        .map(|n| {
            let mut best = 0;
            for k in 1..rl.nrows() {
                if rl[(k, n)] > rl[(best, n)] {
                    best = k;
                }
            }
            (best, rl[(best, n)])
        })
        .collect())
}

/// Nearest-neighbour upsampling of a label map by an integer factor.
pub fn upsample_labels(labels: ArrayView2<'_, u32>, factor: usize) -> Array2<u32> {
    let (h, w) = labels.dim();
    Array2::from_shape_fn((h * factor, w * factor), |(i, j)| labels[(i / factor, j / factor)])
}

/// Maps pixels predicted as non-foreground categories to a background category.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackgroundRule {
    pub foreground: Vec<String>,
    pub background: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct InferenceOptions {
    #[serde(default)]
    pub phrase_embedding: PhraseEmbedding,
    #[serde(default)]
    pub background_rule: Option<BackgroundRule>,
}

/// Everything produced for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct Segmentation {
    pub result: SegmentationResult,
    pub proposals: MaskProposalSet,
    /// Best category and cosine score per proposal; `None` for proposals
    /// whose mask is empty everywhere.
    pub proposal_labels: Vec<Option<(usize, f64)>>,
}

/// Category-level scores from model output: phrase region logits, mask
/// weighting, then max-ensembling per category.
/// Proposals with an all-zero mask add nothing to any pixel and are skipped.
pub fn segment_output(output: &ModelOutput, queries: &QueryEmbeddings, n_categories: usize) -> Result<SegmentationResult> {
    let live = live_proposals(output)?;
    let z = output.proposals.features.select(Axis(0), &live);
    let s = output.proposals.masks.select(Axis(0), &live);
    let rl = region_logits(queries.rows.view(), z.view())?;
    let y = pixel_logits(rl.view(), s.view())?;
    let cat = ensemble_reduce(y.view(), &queries.row_category, n_categories)?;
    let label_map = predict(cat.view())?;
    Ok(SegmentationResult {
        pixel_logits: cat,
        label_map,
        per_query_masks: Some(y),
    })
}

/// Indices of proposals with nonzero mask mass.
pub fn live_proposals(output: &ModelOutput) -> Result<Vec<usize>> {
    let live: Vec<usize> = output
        .proposals
        .masks
        .outer_iter()
        .enumerate()
        .filter(|(_, m)| m.iter().any(|&v| v > 0.0))
        .map(|(i, _)| i)
        .collect();
    if live.is_empty() {
        return Err(Error::ZeroNorm { what: "region", row: 0 });
    }
    Ok(live)
}

/// Proposal-free baseline on the same output.
pub fn per_pixel_output(output: &ModelOutput, queries: &QueryEmbeddings, n_categories: usize) -> Result<SegmentationResult> {
    let y = per_pixel_scores(output.pixel_features.view(), queries.rows.view())?;
    let cat = ensemble_reduce(y.view(), &queries.row_category, n_categories)?;
    let label_map = predict(cat.view())?;
    Ok(SegmentationResult {
        pixel_logits: cat,
        label_map,
        per_query_masks: Some(y),
    })
}

/// Runs the model and segments one image against `queries`.
pub fn segment(
    model: &Model,
    provider: &EmbeddingProvider,
    image: &Array3<f32>,
    queries: &CategoryQueries,
    options: &InferenceOptions,
) -> Result<Segmentation> {
    queries.validate()?;
    let q = embed_queries(queries, provider, options.phrase_embedding)?;
    let output = model.forward(image)?;
    let mut result = segment_output(&output, &q, queries.len())?;
    if let Some(rule) = &options.background_rule {
        let names = queries.names();
        let index = |n: &str| {
            names
                .iter()
                .position(|c| *c == n)
                .map(|i| i as u32)
                .ok_or_else(|| Error::InvalidArgument(format!("background-rule category `{n}` is not a query")))
        };
        let fg = rule.foreground.iter().map(|n| index(n)).collect::<Result<Vec<_>>>()?;
        let bg = index(&rule.background)?;
        result.label_map = apply_background_rule(result.label_map.view(), &fg, names.len(), bg)?;
    }
    let live = live_proposals(&output)?;
    let z = output.proposals.features.select(Axis(0), &live);
    let mut proposal_labels = vec![None; output.proposals.masks.len_of(Axis(0))];
    for (&i, (k, score)) in live.iter().zip(classify_proposals(z.view(), q.rows.view())?) {
        proposal_labels[i] = Some((q.row_category[k], score));
    }
    Ok(Segmentation {
        result,
        proposals: output.proposals,
        proposal_labels,
    })
}
