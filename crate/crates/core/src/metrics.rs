//! Mask IoU, dataset mIoU, grounding mIoU and proposal recall.

use std::collections::BTreeMap;

use ndarray::{ArrayView2, ArrayView3, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `|a & b| / |a | b|`; 1 when both are empty.
pub fn mask_iou(a: ArrayView2<'_, u8>, b: ArrayView2<'_, u8>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("masks {:?} and {:?}", a.dim(), b.dim())));
    }
    let (mut inter, mut union) = (0u64, 0u64);
    for (&x, &y) in a.iter().zip(b.iter()) {
        if x > 1 || y > 1 {
            return Err(Error::InvalidArgument("masks must be binary".into()));
        }
        inter += u64::from(x & y);
        union += u64::from(x | y);
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Per-category intersection and union tallies over a dataset.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionAccumulator {
    intersection: Vec<u64>,
    union: Vec<u64>,
}

impl ConfusionAccumulator {
    pub fn new(n_categories: usize) -> Self {
        Self {
            intersection: vec![0; n_categories],
            union: vec![0; n_categories],
        }
    }

    pub fn n_categories(&self) -> usize {
        self.intersection.len()
    }

    pub fn add(&mut self, pred: ArrayView2<'_, u32>, gt: ArrayView2<'_, u32>) -> Result<()> {
        if pred.dim() != gt.dim() {
            return Err(Error::Shape(format!("prediction {:?} vs ground truth {:?}", pred.dim(), gt.dim())));
        }
        let k = self.n_categories();
        let mut pc = vec![0u64; k];
        let mut gc = vec![0u64; k];
        let mut inter = vec![0u64; k];
        for (&p, &g) in pred.iter().zip(gt.iter()) {
            let (p, g) = (p as usize, g as usize);
            if p >= k || g >= k {
                return Err(Error::InvalidArgument(format!("label {} out of range for {k} categories", p.max(g))));
            }
            pc[p] += 1;
            gc[g] += 1;
            if p == g {
                inter[p] += 1;
            }
        }
        for c in 0..k {
            self.intersection[c] += inter[c];
            self.union[c] += pc[c] + gc[c] - inter[c];
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Self) -> Result<()> {
        if other.n_categories() != self.n_categories() {
            return Err(Error::Shape("accumulators over different category counts".into()));
        }
        for c in 0..self.n_categories() {
            self.intersection[c] += other.intersection[c];
            self.union[c] += other.union[c];
        }
        Ok(())
    }

    /// IoU per category; `None` for categories absent from every prediction
    /// and ground truth.
    pub fn per_category(&self) -> Vec<Option<f64>> {
        self.intersection
            .iter()
            .zip(&self.union)
            .map(|(&i, &u)| (u > 0).then(|| i as f64 / u as f64))
            .collect()
    }

    /// Mean IoU over present categories; `None` if nothing was added.
    pub fn miou(&self) -> Option<f64> {
        let present: Vec<f64> = self.per_category().into_iter().flatten().collect();
        (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
    }
}

pub fn miou<'a>(
    pairs: impl IntoIterator<Item = (ArrayView2<'a, u32>, ArrayView2<'a, u32>)>,
    n_categories: usize,
) -> Result<f64> {
    let mut acc = ConfusionAccumulator::new(n_categories);
    for (p, g) in pairs {
        acc.add(p, g)?;
    }
    acc.miou()
        .ok_or_else(|| Error::InvalidArgument("no pixels to evaluate".into()))
}

/// One evaluation image for grounding mIoU.
#[derive(Clone, Debug)]
pub struct GroundingItem {
    /// Labels in the global category space.
    pub gt: Array2<u32>,
    /// Global categories present in the image.
    pub categories: Vec<usize>,
}

/// mIoU where each image is segmented with only its own ground-truth
/// categories as queries. `predict(i, categories)` must return labels in the
/// global category space. Images without categories are skipped.
pub fn grounding_miou<F>(items: &[GroundingItem], n_categories: usize, mut predict: F) -> Result<ConfusionAccumulator>
where
    F: FnMut(usize, &[usize]) -> Result<Array2<u32>>,
{
    let mut acc = ConfusionAccumulator::new(n_categories);
    for (i, item) in items.iter().enumerate() {
        if item.categories.is_empty() {
            log::warn!("grounding evaluation: image {i} has no ground-truth categories, skipped");
            continue;
        }
        let pred = predict(i, &item.categories)?;
        acc.add(pred.view(), item.gt.view())?;
    }
    Ok(acc)
}

/// Best IoU of any proposal for each ground-truth mask. Proposals may serve
/// several ground-truth masks.
pub fn best_ious(proposals: ArrayView3<'_, u8>, gt: ArrayView3<'_, u8>) -> Result<Vec<f64>> {
    if proposals.len_of(ndarray::Axis(0)) == 0 || gt.len_of(ndarray::Axis(0)) == 0 {
        return Err(Error::InvalidArgument("need at least one proposal and one ground-truth mask".into()));
    }
    gt.outer_iter()
        .map(|g| {
            proposals
                .outer_iter()
                .map(|p| mask_iou(p, g))
                .try_fold(0.0f64, |m, v| v.map(|v| m.max(v)))
        })
        .collect()
}

/// Fraction of ground-truth masks whose best proposal reaches each threshold.
pub fn proposal_recall(proposals: ArrayView3<'_, u8>, gt: ArrayView3<'_, u8>, thresholds: &[f64]) -> Result<Vec<f64>> {
    let best = best_ious(proposals, gt)?;
    Ok(recall_from_ious(&best, thresholds))
}

pub fn recall_from_ious(best: &[f64], thresholds: &[f64]) -> Vec<f64> {
    thresholds
        .iter()
        .map(|&t| best.iter().filter(|&&v| v >= t).count() as f64 / best.len().max(1) as f64)
        .collect()
}

pub const RECALL_THRESHOLDS: [f64; 3] = [0.5, 0.7, 0.9];

/// Structured evaluation report.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub images: usize,
    pub per_category_iou: BTreeMap<String, Option<f64>>,
    pub miou: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_pixel_miou: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grounding_miou: Option<f64>,
    /// Recall at each IoU threshold, keyed like `"R50"`.
    pub recall: BTreeMap<String, f64>,
}

impl EvalReport {
    pub fn set_categories(&mut self, names: &[String], acc: &ConfusionAccumulator) {
        self.per_category_iou = names.iter().cloned().zip(acc.per_category()).collect();
        self.miou = acc.miou();
    }

    pub fn set_recall(&mut self, best: &[f64]) {
        self.recall = RECALL_THRESHOLDS
            .iter()
            .zip(recall_from_ious(best, &RECALL_THRESHOLDS))
            .map(|(t, r)| (format!("R{}", (t * 100.0).round() as u32), r))
            .collect();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array3};

    #[test]
    fn iou_examples() {
        let a = array![[1u8, 1, 0]];
        let b = array![[0u8, 1, 1]];
        assert_eq!(mask_iou(a.view(), a.view()).unwrap(), 1.0);
        assert!((mask_iou(a.view(), b.view()).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        let z = array![[0u8, 0, 0]];
        assert_eq!(mask_iou(z.view(), z.view()).unwrap(), 1.0);
        assert_eq!(mask_iou(z.view(), a.view()).unwrap(), 0.0);
        assert_eq!(mask_iou(array![[1u8, 0]].view(), array![[0u8, 1]].view()).unwrap(), 0.0);
        assert!(mask_iou(a.view(), array![[1u8]].view()).is_err());
    }

    #[test]
    fn miou_examples() {
        let gt = array![[0u32, 1, 1, 0], [0, 1, 1, 0]];
        assert_eq!(miou([(gt.view(), gt.view())], 3).unwrap(), 1.0);
        // Prediction covers the left half of the foreground and nothing else.
        let pred = array![[0u32, 1, 0, 0], [0, 1, 0, 0]];
        let mut acc = ConfusionAccumulator::new(3);
        acc.add(pred.view(), gt.view()).unwrap();
        let per = acc.per_category();
        assert!((per[1].unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(per[2], None);
        assert!(acc.add(array![[5u32]].view(), array![[0u32]].view()).is_err());
    }

    #[test]
    fn recall_examples() {
        let mut gt = Array3::<u8>::zeros((2, 1, 10));
        gt.slice_mut(ndarray::s![0, 0, 0..5]).fill(1);
        gt.slice_mut(ndarray::s![1, 0, 5..10]).fill(1);
        assert_eq!(proposal_recall(gt.view(), gt.view(), &RECALL_THRESHOLDS).unwrap(), vec![1.0; 3]);
        let mut p = Array3::<u8>::zeros((2, 1, 10));
        p.slice_mut(ndarray::s![0, 0, 0..4]).fill(1); // IoU 0.8 with gt 0
        p.slice_mut(ndarray::s![1, 0, 4..6]).fill(1);
        p[(1, 0, 7)] = 1;
        p[(1, 0, 8)] = 1; // IoU 3/6 with gt 1
        let r = proposal_recall(p.view(), gt.view(), &RECALL_THRESHOLDS).unwrap();
        assert_eq!(r, vec![1.0, 0.5, 0.0]);
    }

    #[test]
    fn recall_two_gts_at_point_eight_and_point_four() {
        let mut gt = Array3::<u8>::zeros((2, 1, 10));
        gt.slice_mut(ndarray::s![0, 0, 0..5]).fill(1);
        gt.slice_mut(ndarray::s![1, 0, 5..10]).fill(1);
        let mut p = Array3::<u8>::zeros((1, 1, 10));
        p.slice_mut(ndarray::s![0, 0, 0..4]).fill(1);
        let mut q = Array3::<u8>::zeros((1, 1, 10));
        q.slice_mut(ndarray::s![0, 0, 6..8]).fill(1); // IoU 0.4 with gt 1
        let props = ndarray::concatenate![ndarray::Axis(0), p, q];
        let best = best_ious(props.view(), gt.view()).unwrap();
        assert!((best[0] - 0.8).abs() < 1e-12 && (best[1] - 0.4).abs() < 1e-12);
        assert_eq!(recall_from_ious(&best, &RECALL_THRESHOLDS), vec![0.5, 0.5, 0.0]);
    }

    #[test]
    fn grounding_skips_and_matches_miou() {
        let gt = array![[0u32, 1], [1, 0]];
        let items = vec![
            GroundingItem {
                gt: gt.clone(),
                categories: vec![0, 1],
            },
            GroundingItem {
                gt: gt.clone(),
                categories: vec![],
            },
        ];
        let acc = grounding_miou(&items, 2, |i, _| Ok(items[i].gt.clone())).unwrap();
        assert_eq!(acc.miou(), Some(1.0));
    }

    #[test]
    fn report_recall_keys() {
        let mut r = EvalReport::default();
        r.set_recall(&[0.8, 0.4]);
        assert_eq!(r.recall["R50"], 0.5);
        assert_eq!(r.recall["R90"], 0.0);
    }
}
