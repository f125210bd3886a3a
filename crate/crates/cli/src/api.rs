//! Request and response types shared by the `segment` command and the HTTP
//! service, and the segmentation pipeline behind them.

use std::collections::BTreeSet;

use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use maskground::data::{encode_rle, RleMask};
use maskground::inference::{classify_proposals, live_proposals, segment, BackgroundRule, InferenceOptions};
use maskground::model::Model;
use maskground::text::{
    embed_queries, tokenize, Category, CategoryQueries, EmbeddingProvider, OovPolicy, PhraseEmbedding,
};

use crate::imaging::{crop_labels, pad_reflect, Padding};

/// Threshold applied to soft proposal masks.
pub const PROPOSAL_THRESHOLD: f64 = 0.5;

/// A request failure with its HTTP status class.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum RequestError {
    /// Malformed request; `field` is the JSON path of the offending value.
    BadRequest { field: String, message: String },
    TooLarge(String),
    /// Image sides are not multiples of 32 while strict sizing is on.
    Unprocessable { field: String, message: String },
    Internal(String),
}

impl RequestError {
    pub fn bad(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self::BadRequest {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn status(&self) -> u16 {
        match self {
            Self::BadRequest { .. } => 400,
            Self::TooLarge(_) => 413,
            Self::Unprocessable { .. } => 422,
            Self::Internal(_) => 500,
        }
    }

    pub fn body(&self) -> ErrorBody {
        let (field, message) = match self {
            Self::BadRequest { field, message } | Self::Unprocessable { field, message } => {
                (Some(field.clone()), message.clone())
            }
            Self::TooLarge(m) | Self::Internal(m) => (None, m.clone()),
        };
        ErrorBody {
            error: message,
            field,
            status: self.status(),
        }
    }
}

impl std::fmt::Display for RequestError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let b = self.body();
        match b.field {
            Some(field) => write!(f, "{field}: {}", b.error),
            None => write!(f, "{}", b.error),
        }
    }
}

impl std::error::Error for RequestError {}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
    pub status: u16,
}

/// One query category; an empty phrase list means the category name itself.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryCategory {
    pub category: String,
    #[serde(default)]
    pub phrases: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmentOptions {
    /// Relabel pixels outside `fg_categories` as `background_category`.
    pub use_background_rule: bool,
    pub fg_categories: Vec<String>,
    /// Defaults to `background`.
    pub background_category: Option<String>,
    /// Defaults to `mean`.
    pub phrase_embedding: Option<PhraseEmbedding>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentRequest {
    /// Base64-encoded PNG.
    pub image: String,
    pub queries: Vec<QueryCategory>,
    #[serde(default)]
    pub options: SegmentOptions,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryMask {
    pub index: usize,
    pub category: String,
    pub area: u64,
    pub rle: RleMask,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryMask {
    pub phrase: String,
    pub category: String,
    pub category_index: usize,
    /// Pixels labelled with this phrase's category where this phrase scores
    /// highest among the category's phrases.
    pub rle: RleMask,
    /// Peak mask-weighted score of the phrase over the image.
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentResponse {
    pub model_id: String,
    pub width: usize,
    pub height: usize,
    /// Reflect padding applied before inference; masks are cropped back.
    pub padding: Padding,
    pub categories: Vec<String>,
    /// One mask per requested category, in request order; values of the
    /// underlying label map index `categories`.
    pub label_map: Vec<CategoryMask>,
    pub per_query: Vec<QueryMask>,
    pub timing_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProposalEntry {
    pub index: usize,
    pub area: u64,
    pub rle: RleMask,
    /// Best-matching category; absent without queries or for empty masks.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub best_category: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProposalsResponse {
    pub model_id: String,
    pub width: usize,
    pub height: usize,
    pub padding: Padding,
    pub threshold: f64,
    pub proposals: Vec<ProposalEntry>,
    pub timing_ms: f64,
}

/// Size limits and sizing policy.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Limits {
    /// Largest accepted image side in pixels.
    pub max_side: usize,
    /// Reject sides that are not multiples of 32 instead of padding.
    pub strict_size: bool,
}

impl Default for Limits {
    fn default() -> Self {
        Self {
            max_side: 1024,
            strict_size: false,
        }
    }
}

/// A loaded, immutable model.
#[derive(Debug)]
pub struct ModelContext {
    pub model: Model,
    pub model_id: String,
    pub provider: EmbeddingProvider,
    pub limits: Limits,
}

impl ModelContext {
    pub fn new(model: Model, model_id: String, limits: Limits) -> Self {
        let provider = model.embeddings(OovPolicy::Strict);
        Self {
            model,
            model_id,
            provider,
            limits,
        }
    }

    /// Checks the limits and pads the image; returns the model input.
    pub fn prepare(&self, image: &Array3<f32>) -> Result<(Array3<f32>, Padding), RequestError> {
        let (h, w, _) = image.dim();
        if h == 0 || w == 0 {
            return Err(RequestError::bad("image", "image is empty"));
        }
        if h.max(w) > self.limits.max_side {
            return Err(RequestError::TooLarge(format!(
                "image {h}x{w} exceeds the {} pixel side limit",
                self.limits.max_side
            )));
        }
        let pad = Padding::for_size(h, w);
        if pad.is_zero() {
            return Ok((image.clone(), pad));
        }
        if self.limits.strict_size {
            return Err(RequestError::Unprocessable {
                field: "image".into(),
                message: format!("image {h}x{w}: sides must be multiples of 32"),
            });
        }
        Ok((pad_reflect(image, pad), pad))
    }

    /// Validates queries against the vocabulary.
    pub fn category_queries(&self, queries: &[QueryCategory]) -> Result<CategoryQueries, RequestError> {
        if queries.is_empty() {
            return Err(RequestError::bad("queries", "at least one query category is required"));
        }
        let mut seen = BTreeSet::new();
        let mut categories = Vec::with_capacity(queries.len());
        for (i, q) in queries.iter().enumerate() {
            if q.category.trim().is_empty() {
                return Err(RequestError::bad(format!("queries[{i}].category"), "category name is empty"));
            }
            if !seen.insert(q.category.as_str()) {
                return Err(RequestError::bad(
                    format!("queries[{i}].category"),
                    format!("duplicate category `{}`", q.category),
                ));
            }
            let phrases = if q.phrases.is_empty() {
                vec![q.category.clone()]
            } else {
                q.phrases.clone()
            };
            for (j, p) in phrases.iter().enumerate() {
                let field = if q.phrases.is_empty() {
                    format!("queries[{i}].category")
                } else {
                    format!("queries[{i}].phrases[{j}]")
                };
                let words = tokenize(p);
                if words.is_empty() {
                    return Err(RequestError::bad(field, "phrase has no words"));
                }
                if let Some(w) = words.iter().find(|w| self.provider.index_of(w).is_none()) {
                    return Err(RequestError::bad(field, format!("unknown word `{w}`")));
                }
            }
            categories.push(Category {
                name: q.category.clone(),
                phrases,
            });
        }
        Ok(CategoryQueries { categories })
    }

    fn background_rule(
        &self,
        queries: &CategoryQueries,
        options: &SegmentOptions,
    ) -> Result<Option<BackgroundRule>, RequestError> {
        if !options.use_background_rule {
            return Ok(None);
        }
        let names = queries.names();
        if options.fg_categories.is_empty() {
            return Err(RequestError::bad(
                "options.fg_categories",
                "the background rule needs at least one foreground category",
            ));
        }
        for (i, c) in options.fg_categories.iter().enumerate() {
            if !names.contains(&c.as_str()) {
                return Err(RequestError::bad(
                    format!("options.fg_categories[{i}]"),
                    format!("`{c}` is not a query category"),
                ));
            }
        }
        let background = options
            .background_category
            .clone()
            .unwrap_or_else(|| maskground::synth::BACKGROUND.to_string());
        if !names.contains(&background.as_str()) {
            return Err(RequestError::bad(
                "options.background_category",
                format!("`{background}` is not a query category"),
            ));
        }
        Ok(Some(BackgroundRule {
            foreground: options.fg_categories.clone(),
            background,
        }))
    }

    /// Segments a decoded image. `timing_ms` is left at zero.
    pub fn segment(
        &self,
        image: &Array3<f32>,
        queries: &[QueryCategory],
        options: &SegmentOptions,
    ) -> Result<(SegmentResponse, Array2<u32>), RequestError> {
        let (h, w, _) = image.dim();
        let (input, pad) = self.prepare(image)?;
        let cq = self.category_queries(queries)?;
        let rule = self.background_rule(&cq, options)?;
        let strategy = options.phrase_embedding.unwrap_or(PhraseEmbedding::Mean);
        let inference = InferenceOptions {
            phrase_embedding: strategy,
            background_rule: rule,
        };
        let seg = segment(&self.model, &self.provider, &input, &cq, &inference).map_err(internal)?;
        let rows = embed_queries(&cq, &self.provider, strategy).map_err(internal)?;
        let factor = input.dim().0 / seg.result.label_map.nrows();
        let labels = crop_labels(&upsample(&seg.result.label_map, factor), pad);

        let names: Vec<String> = cq.names().iter().map(|s| s.to_string()).collect();
        let mut label_map = Vec::with_capacity(names.len());
        for (k, name) in names.iter().enumerate() {
            let m = labels.mapv(|l| u8::from(l as usize == k));
            let rle = encode_rle(m.view()).map_err(internal)?;
            label_map.push(CategoryMask {
                index: k,
                category: name.clone(),
                area: rle.area(),
                rle,
            });
        }

        let y = seg.result.per_query_masks.as_ref().expect("mask-based inference keeps per-query maps");
        let grid = &seg.result.label_map;
        let mut per_query = Vec::with_capacity(rows.row_text.len());
        for (p, text) in rows.row_text.iter().enumerate() {
            let cat = rows.row_category[p];
            let siblings: Vec<usize> = (0..rows.row_category.len()).filter(|&r| rows.row_category[r] == cat).collect();
            let won = Array2::from_shape_fn(grid.dim(), |(i, j)| {
                let best = siblings
                    .iter()
                    .copied()
                    .fold(siblings[0], |b, r| if y[(r, i, j)] > y[(b, i, j)] { r } else { b });
                u32::from(grid[(i, j)] as usize == cat && best == p)
            });
            let m = crop_labels(&upsample(&won, factor), pad).mapv(|v| v as u8);
            let score = y.index_axis(Axis(0), p).iter().copied().fold(f64::NEG_INFINITY, f64::max);
            per_query.push(QueryMask {
                phrase: text.clone(),
                category: names[cat].clone(),
                category_index: cat,
                rle: encode_rle(m.view()).map_err(internal)?,
                score,
            });
        }
        Ok((
            SegmentResponse {
                model_id: self.model_id.clone(),
                width: w,
                height: h,
                padding: pad,
                categories: names,
                label_map,
                per_query,
                timing_ms: 0.0,
            },
            labels,
        ))
    }

    /// Every thresholded proposal, with its best category when queries are
    /// given. `timing_ms` is left at zero.
    pub fn proposals(&self, image: &Array3<f32>, queries: &[QueryCategory]) -> Result<ProposalsResponse, RequestError> {
        let (h, w, _) = image.dim();
        let (input, pad) = self.prepare(image)?;
        let cq = if queries.is_empty() {
            None
        } else {
            Some(self.category_queries(queries)?)
        };
        let out = self.model.forward(&input).map_err(internal)?;
        let n = out.proposals.len();
        let mut best: Vec<Option<(String, f64)>> = vec![None; n];
        if let Some(cq) = &cq {
            let rows = embed_queries(cq, &self.provider, PhraseEmbedding::Mean).map_err(internal)?;
            let live = live_proposals(&out).map_err(internal)?;
            let z = out.proposals.features.select(Axis(0), &live);
            for (&i, (r, score)) in live.iter().zip(classify_proposals(z.view(), rows.rows.view()).map_err(internal)?) {
                best[i] = Some((cq.categories[rows.row_category[r]].name.clone(), score));
            }
        }
        let bin = out.proposals.binarized(PROPOSAL_THRESHOLD);
        let factor = input.dim().0 / bin.len_of(Axis(1));
        let mut proposals = Vec::with_capacity(n);
        for (i, m) in bin.outer_iter().enumerate() {
            let full = crop_labels(&upsample(&m.mapv(u32::from), factor), pad).mapv(|v| v as u8);
            let rle = encode_rle(full.view()).map_err(internal)?;
            let (best_category, score) = match best[i].take() {
                Some((c, s)) => (Some(c), Some(s)),
                None => (None, None),
            };
            proposals.push(ProposalEntry {
                index: i,
                area: rle.area(),
                rle,
                best_category,
                score,
            });
        }
        Ok(ProposalsResponse {
            model_id: self.model_id.clone(),
            width: w,
            height: h,
            padding: pad,
            threshold: PROPOSAL_THRESHOLD,
            proposals,
            timing_ms: 0.0,
        })
    }
}

fn internal(e: maskground::Error) -> RequestError {
    RequestError::Internal(e.to_string())
}

fn upsample(labels: &Array2<u32>, factor: usize) -> Array2<u32> {
    maskground::inference::upsample_labels(labels.view(), factor)
}

/// Parses `"red circle|crimson circle,background"`: categories separated by
/// commas, alternative phrases of one category by `|`. The first phrase names
/// the category.
pub fn parse_query_list(text: &str) -> Vec<QueryCategory> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|c| {
            let phrases: Vec<String> = c.split('|').map(|p| p.trim().to_string()).filter(|p| !p.is_empty()).collect();
            QueryCategory {
                category: phrases.first().cloned().unwrap_or_default(),
                phrases,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn query_list_parsing() {
        let q = parse_query_list("red circle|crimson circle, background ,");
        assert_eq!(q.len(), 2);
        assert_eq!(q[0].category, "red circle");
        assert_eq!(q[0].phrases, vec!["red circle", "crimson circle"]);
        assert_eq!(q[1].phrases, vec!["background"]);
    }

    #[test]
    fn error_statuses() {
        assert_eq!(RequestError::bad("a", "b").status(), 400);
        assert_eq!(RequestError::TooLarge("x".into()).status(), 413);
        let e = RequestError::Unprocessable {
            field: "image".into(),
            message: "m".into(),
        };
        assert_eq!(e.status(), 422);
        assert_eq!(e.body().field.as_deref(), Some("image"));
        assert_eq!(e.to_string(), "image: m");
    }
}
