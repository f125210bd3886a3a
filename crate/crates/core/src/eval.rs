//! Dataset-level evaluation of a model: semantic mIoU with mask-based and
//! per-pixel inference, grounding mIoU, and proposal recall.

use std::collections::BTreeSet;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::inference::{per_pixel_output, segment_output, upsample_labels};
use crate::metrics::{best_ious, grounding_miou, ConfusionAccumulator, EvalReport, GroundingItem};
use crate::model::{Model, ModelOutput};
use crate::text::{embed_queries, CategoryQueries, EmbeddingProvider, OovPolicy, PhraseEmbedding, QueryEmbeddings};

/// Images per forward batch during evaluation.
pub const EVAL_BATCH: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub phrase_embedding: PhraseEmbedding,
    pub semantic: bool,
    pub per_pixel: bool,
    pub grounding: bool,
    pub recall: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            phrase_embedding: PhraseEmbedding::Mean,
            semantic: true,
            per_pixel: false,
            grounding: false,
            recall: false,
        }
    }
}

/// Accumulators behind an [`EvalReport`].
#[derive(Clone, Debug)]
pub struct EvalResult {
    pub report: EvalReport,
    pub semantic: Option<ConfusionAccumulator>,
    pub per_pixel: Option<ConfusionAccumulator>,
    pub grounding: Option<ConfusionAccumulator>,
    pub best_ious: Vec<f64>,
}

/// Runs the model over `samples` in batches of equally sized images.
pub fn forward_all(model: &Model, samples: &[Sample]) -> Result<Vec<ModelOutput>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_BATCH) {
        let first = chunk[0].image.dim();
        if chunk.iter().all(|s| s.image.dim() == first) {
            let imgs: Vec<_> = chunk.iter().map(|s| &s.image).collect();
            out.extend(model.forward_batch(&imgs)?);
        } else {
            for s in chunk {
                out.push(model.forward(&s.image)?);
            }
        }
    }
    Ok(out)
}

fn gt_labels(sample: &Sample, names: &[String], fill: u32) -> Result<Array2<u32>> {
    sample
        .semantic_labels(|c| names.iter().position(|n| n == c).map(|i| i as u32), fill)
        .ok_or_else(|| Error::InvalidSample {
            id: sample.id.clone(),
            reason: "evaluation needs categorized masks with known category names".into(),
        })
}

fn sub_queries(queries: &QueryEmbeddings, keep: &[usize]) -> QueryEmbeddings {
    let rows: Vec<usize> = (0..queries.rows.nrows())
        .filter(|&r| keep.contains(&queries.row_category[r]))
        .collect();
    QueryEmbeddings {
        rows: queries.rows.select(ndarray::Axis(0), &rows),
        row_category: rows
            .iter()
            .map(|&r| keep.iter().position(|&k| k == queries.row_category[r]).expect("kept"))
            .collect(),
        row_text: rows.iter().map(|&r| queries.row_text[r].clone()).collect(),
    }
}

/// Evaluates `model` on categorized samples. `queries` defines the category
/// list; uncovered pixels count as category `background` (an index into it).
pub fn evaluate(
    model: &Model,
    samples: &[Sample],
    queries: &CategoryQueries,
    background: usize,
    options: &EvalOptions,
) -> Result<EvalResult> {
    queries.validate()?;
    let provider: EmbeddingProvider = model.embeddings(OovPolicy::Strict);
    let q = embed_queries(queries, &provider, options.phrase_embedding)?;
    let names: Vec<String> = queries.names().iter().map(|s| s.to_string()).collect();
    let k = names.len();
    let outputs = forward_all(model, samples)?;

    let mut semantic = options.semantic.then(|| ConfusionAccumulator::new(k));
    let mut per_pixel = options.per_pixel.then(|| ConfusionAccumulator::new(k));
    let mut items = Vec::new();
    let mut best = Vec::new();
    for (s, out) in samples.iter().zip(&outputs) {
        let factor = s.mask_stride;
        if semantic.is_some() || per_pixel.is_some() || options.grounding {
            let gt = gt_labels(s, &names, background as u32)?;
            if let Some(acc) = semantic.as_mut() {
                let r = segment_output(out, &q, k)?;
                acc.add(upsample_labels(r.label_map.view(), factor).view(), gt.view())?;
            }
            if let Some(acc) = per_pixel.as_mut() {
                let r = per_pixel_output(out, &q, k)?;
                acc.add(upsample_labels(r.label_map.view(), factor).view(), gt.view())?;
            }
            if options.grounding {
                let present: BTreeSet<usize> = gt.iter().map(|&l| l as usize).collect();
                items.push(GroundingItem {
                    gt,
                    categories: present.into_iter().collect(),
                });
            }
        }
        if options.recall {
            if let Some(lm) = &s.labeled_masks {
                best.extend(best_ious(out.proposals.binarized(0.5).view(), lm.masks())?);
            }
        }
    }

    let grounding = if options.grounding {
        Some(grounding_miou(&items, k, |i, cats| {
            let sub = sub_queries(&q, cats);
            let r = segment_output(&outputs[i], &sub, cats.len())?;
            let local = upsample_labels(r.label_map.view(), samples[i].mask_stride);
            Ok(local.mapv(|l| cats[l as usize] as u32))
        })?)
    } else {
        None
    };

    let mut report = EvalReport {
        images: samples.len(),
        ..Default::default()
    };
    if let Some(acc) = &semantic {
        report.set_categories(&names, acc);
    }
    report.per_pixel_miou = per_pixel.as_ref().and_then(|a| a.miou());
    report.grounding_miou = grounding.as_ref().and_then(|a| a.miou());
    if options.recall {
        report.set_recall(&best);
    }
    Ok(EvalResult {
        report,
        semantic,
        per_pixel,
        grounding,
        best_ious: best,
    })
}
