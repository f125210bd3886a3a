use ndarray::{s, Array2, Array3, ArrayView3, Axis};

use crate::error::{Error, Result};

/// Binary class-agnostic masks, `M x H x W`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledMaskSet {
    masks: Array3<u8>,
}

impl LabeledMaskSet {
    pub fn new(masks: Array3<u8>) -> Result<Self> {
        if masks.len_of(Axis(0)) == 0 {
            return Err(Error::InvalidArgument("labeled mask set is empty".into()));
        }
        if let Some(v) = masks.iter().find(|&&v| v > 1) {
            return Err(Error::InvalidArgument(format!("labeled mask value {v} is not binary")));
        }
        for (i, m) in masks.outer_iter().enumerate() {
            if !m.iter().any(|&v| v == 1) {
                return Err(Error::InvalidArgument(format!("labeled mask {i} is empty")));
            }
        }
        Ok(Self { masks })
    }

    pub fn masks(&self) -> ArrayView3<'_, u8> {
        self.masks.view()
    }

    pub fn len(&self) -> usize {
        self.masks.len_of(Axis(0))
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn height(&self) -> usize {
        self.masks.len_of(Axis(1))
    }

    pub fn width(&self) -> usize {
        self.masks.len_of(Axis(2))
    }
}

/// Nearest-neighbour downscale of a binary mask by an integer stride, sampling
/// the centre pixel of each cell.
pub fn downscale_mask(mask: &Array2<u8>, stride: usize) -> Array2<u8> {
    let (h, w) = mask.dim();
    let off = stride / 2;
    Array2::from_shape_fn((h / stride, w / stride), |(i, j)| mask[(i * stride + off, j * stride + off)])
}

/// One training or evaluation example.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    /// `H x W x 3`, values in `[0, 1]`.
    pub image: Array3<f32>,
    /// Masks at prediction resolution (image size / `mask_stride`).
    pub labeled_masks: Option<LabeledMaskSet>,
    /// The same masks at image resolution, for evaluation.
    pub full_masks: Option<LabeledMaskSet>,
    /// Category name per mask, when known (used only for evaluation).
    pub mask_categories: Option<Vec<String>>,
    pub caption: Option<String>,
    pub mask_stride: usize,
}

impl Sample {
    /// Builds a sample from image-resolution masks, downscaling them to
    /// prediction resolution. Masks that vanish when downscaled are dropped
    /// together with their category.
    pub fn new(
        id: impl Into<String>,
        image: Array3<f32>,
        masks: Option<Array3<u8>>,
        mask_categories: Option<Vec<String>>,
        caption: Option<String>,
        mask_stride: usize,
    ) -> Result<Self> {
        let id = id.into();
        let invalid = |reason: String| Error::InvalidSample {
            id: id.clone(),
            reason,
        };
        if id.is_empty() {
            return Err(Error::InvalidArgument("sample id is empty".into()));
        }
        let (h, w, c) = image.dim();
        if h == 0 || w == 0 || c != 3 {
            return Err(invalid(format!("image has shape {h}x{w}x{c}")));
        }
        if mask_stride == 0 || h % mask_stride != 0 || w % mask_stride != 0 {
            return Err(invalid(format!("image {h}x{w} not divisible by mask stride {mask_stride}")));
        }
        if image.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(invalid("image values outside [0, 1]".into()));
        }
        if caption.is_none() && masks.is_none() {
            return Err(Error::MissingAnnotation { id });
        }
        if let Some(c) = &caption {
            if c.trim().is_empty() {
                return Err(invalid("caption is blank".into()));
            }
        }
        let (mut labeled, mut full, mut cats) = (None, None, None);
        if let Some(masks) = masks {
            let (m, mh, mw) = masks.dim();
            if (mh, mw) != (h, w) {
                return Err(invalid(format!("mask size {mh}x{mw} differs from image {h}x{w}")));
            }
            if let Some(c) = &mask_categories {
                if c.len() != m {
                    return Err(invalid(format!("{} categories for {m} masks", c.len())));
                }
            }
            let mut keep = Vec::new();
            let mut small = Vec::new();
            for (i, full_mask) in masks.outer_iter().enumerate() {
                let d = downscale_mask(&full_mask.to_owned(), mask_stride);
                if d.iter().any(|&v| v == 1) {
                    keep.push(i);
                    small.push(d);
                } else {
                    log::debug!("sample `{id}`: mask {i} vanishes at stride {mask_stride}");
                }
            }
            if !keep.is_empty() {
                let full_kept = masks.select(Axis(0), &keep);
                let views: Vec<_> = small.iter().map(|m| m.view()).collect();
                let small = ndarray::stack(Axis(0), &views).expect("equal shapes");
                full = Some(LabeledMaskSet::new(full_kept).map_err(|e| invalid(e.to_string()))?);
                labeled = Some(LabeledMaskSet::new(small).map_err(|e| invalid(e.to_string()))?);
                cats = mask_categories.map(|c| keep.iter().map(|&i| c[i].clone()).collect());
            } else if caption.is_none() {
                return Err(Error::MissingAnnotation { id });
            }
        }
        Ok(Self {
            id,
            image,
            labeled_masks: labeled,
            full_masks: full,
            mask_categories: cats,
            caption,
            mask_stride,
        })
    }

    pub fn height(&self) -> usize {
        self.image.dim().0
    }

    pub fn width(&self) -> usize {
        self.image.dim().1
    }

    /// Semantic label map at image resolution, built from the categorized
    /// masks. `index_of` maps a category name to its label; pixels covered by
    /// no mask get `fill`.
    pub fn semantic_labels(
        &self,
        index_of: impl Fn(&str) -> Option<u32>,
        fill: u32,
    ) -> Option<Array2<u32>> {
        let masks = self.full_masks.as_ref()?;
        let cats = self.mask_categories.as_ref()?;
        let mut out = Array2::from_elem((self.height(), self.width()), fill);
        for (m, cat) in masks.masks().outer_iter().zip(cats) {
            let label = index_of(cat)?;
            ndarray::Zip::from(&mut out).and(&m).for_each(|o, &v| {
                if v == 1 {
                    *o = label;
                }
            });
        }
        Some(out)
    }
}

/// Model output: `N` soft masks and their pooled features.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskProposalSet {
    /// `N x H' x W'`, values in `(0, 1)`.
    pub masks: Array3<f64>,
    /// `N x D`.
    pub features: Array2<f64>,
}

impl MaskProposalSet {
    pub fn len(&self) -> usize {
        self.masks.len_of(Axis(0))
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    /// Proposals binarized at `threshold`.
    pub fn binarized(&self, threshold: f64) -> Array3<u8> {
        self.masks.mapv(|v| u8::from(v > threshold))
    }

    pub fn mask(&self, n: usize) -> ndarray::ArrayView2<'_, f64> {
        self.masks.slice(s![n, .., ..])
    }
}

/// Per-pixel category scores and their argmax.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationResult {
    /// `K_cat x H' x W'`.
    pub pixel_logits: Array3<f64>,
    /// `H' x W'`, values in `[0, K_cat)`.
    pub label_map: Array2<u32>,
    /// Per query-phrase score maps before ensembling, `K_phrase x H' x W'`.
    pub per_query_masks: Option<Array3<f64>>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(h: usize, w: usize) -> Array3<f32> {
        Array3::from_elem((h, w, 3), 0.5)
    }

    #[test]
    fn caption_only_sample() {
        let s = Sample::new("a", img(8, 8), None, None, Some("a red circle".into()), 4).unwrap();
        assert!(s.labeled_masks.is_none());
    }

    #[test]
    fn rejects_unannotated_and_bad_values() {
        assert!(matches!(
            Sample::new("a", img(8, 8), None, None, None, 4),
            Err(Error::MissingAnnotation { .. })
        ));
        let mut bad = img(8, 8);
        bad[(0, 0, 0)] = 1.5;
        assert!(Sample::new("a", bad, None, None, Some("x".into()), 4).is_err());
        assert!(Sample::new("", img(8, 8), None, None, Some("x".into()), 4).is_err());
    }

    #[test]
    fn masks_downscale_to_stride() {
        let mut m = Array3::<u8>::zeros((2, 8, 8));
        m.slice_mut(s![0, 0..4, 0..4]).fill(1);
        m.slice_mut(s![1, .., ..]).fill(1);
        m.slice_mut(s![1, 0..4, 0..4]).fill(0);
        let s = Sample::new("a", img(8, 8), Some(m), None, None, 4).unwrap();
        let l = s.labeled_masks.unwrap();
        assert_eq!((l.len(), l.height(), l.width()), (2, 2, 2));
        assert_eq!(l.masks()[(0, 0, 0)], 1);
        assert_eq!(l.masks()[(0, 1, 1)], 0);
        assert_eq!(l.masks()[(1, 1, 1)], 1);
    }

    #[test]
    fn vanished_masks_are_dropped_with_categories() {
        let mut m = Array3::<u8>::zeros((2, 8, 8));
        m[(0, 0, 0)] = 1; // not a sampled centre pixel
        m.slice_mut(s![1, .., ..]).fill(1);
        let cats = vec!["dot".to_string(), "background".to_string()];
        let s = Sample::new("a", img(8, 8), Some(m), Some(cats), None, 4).unwrap();
        assert_eq!(s.labeled_masks.as_ref().unwrap().len(), 1);
        assert_eq!(s.mask_categories.as_deref(), Some(&["background".to_string()][..]));
    }

    #[test]
    fn semantic_labels_paint_masks() {
        let mut m = Array3::<u8>::zeros((2, 4, 4));
        m.slice_mut(s![0, 0..2, ..]).fill(1);
        m.slice_mut(s![1, 2..4, ..]).fill(1);
        let cats = vec!["top".to_string(), "bottom".to_string()];
        let s = Sample::new("a", img(4, 4), Some(m), Some(cats), None, 2).unwrap();
        let lab = s
            .semantic_labels(|c| if c == "top" { Some(3) } else { Some(5) }, 0)
            .unwrap();
        assert_eq!(lab[(0, 0)], 3);
        assert_eq!(lab[(3, 3)], 5);
    }
}
