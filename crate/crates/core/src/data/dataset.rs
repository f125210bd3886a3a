//! On-disk dataset: a `manifest.json` array plus 8-bit RGB PNG images.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array3, Axis};
use serde::{Deserialize, Serialize};

use super::rle::{decode_rle, encode_rle, RleMask};
use super::types::Sample;
use crate::error::{Error, IoContext, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

/// One manifest entry. `categories`, when present, names the category of
/// each mask and is used only for evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub image_path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub masks: Option<Vec<RleMask>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub categories: Option<Vec<String>>,
}

pub type Manifest = Vec<ManifestRecord>;

pub fn read_png(path: &Path) -> Result<Array3<f32>> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
    Ok(Array3::from_shape_vec((h as usize, w as usize, 3), data).expect("rgb buffer"))
}

/// Quantizes `[0, 1]` values to 8 bits.
pub fn to_rgb8(image: &Array3<f32>) -> image::RgbImage {
    let (h, w, _) = image.dim();
    let raw = image
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    image::RgbImage::from_raw(w as u32, h as u32, raw).expect("rgb buffer")
}

pub fn write_png(path: &Path, image: &Array3<f32>) -> Result<()> {
    to_rgb8(image).save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let bytes = fs::read(&path).at(&path)?;
    Ok(serde_json::from_slice(&bytes)?)
}

pub fn write_manifest(dir: &Path, manifest: &Manifest) -> Result<()> {
    let path = dir.join(MANIFEST_FILE);
    let mut bytes = serde_json::to_vec_pretty(manifest)?;
    bytes.push(b'\n');
    fs::write(&path, bytes).at(&path)
}

/// Writes samples (images + manifest) into `dir`, using image-resolution masks.
pub fn write_dataset<'a>(dir: &Path, samples: impl IntoIterator<Item = &'a Sample>) -> Result<Manifest> {
    fs::create_dir_all(dir.join("images")).at(dir)?;
    let mut manifest = Vec::new();
    for s in samples {
        let rel = format!("images/{}.png", s.id);
        write_png(&dir.join(&rel), &s.image)?;
        let masks = match &s.full_masks {
            Some(m) => Some(
                m.masks()
                    .outer_iter()
                    .map(|v| encode_rle(v))
                    .collect::<Result<Vec<_>>>()?,
            ),
            None => None,
        };
        manifest.push(ManifestRecord {
            id: s.id.clone(),
            image_path: rel,
            caption: s.caption.clone(),
            masks,
            categories: s.mask_categories.clone(),
        });
    }
    write_manifest(dir, &manifest)?;
    Ok(manifest)
}

/// Lazily loads and validates the samples of a dataset directory in manifest
/// order.
pub struct DatasetReader {
    root: PathBuf,
    records: std::vec::IntoIter<ManifestRecord>,
    mask_stride: usize,
}

impl DatasetReader {
    pub fn records_left(&self) -> usize {
        self.records.len()
    }

    fn load(&self, rec: ManifestRecord) -> Result<Sample> {
        if rec.caption.is_none() && rec.masks.is_none() {
            return Err(Error::MissingAnnotation { id: rec.id });
        }
        let path = self.root.join(&rec.image_path);
        if !path.is_file() {
            return Err(Error::MissingImage { id: rec.id, path });
        }
        let image = read_png(&path)?;
        let (h, w, _) = image.dim();
        let masks = match &rec.masks {
            Some(list) if !list.is_empty() => {
                let mut decoded = Vec::with_capacity(list.len());
                for (index, rle) in list.iter().enumerate() {
                    let malformed = |reason: String| Error::MalformedMask {
                        id: rec.id.clone(),
                        index,
                        reason,
                    };
                    if rle.size != [h, w] {
                        return Err(malformed(format!(
                            "size {:?} differs from image {h}x{w}",
                            rle.size
                        )));
                    }
                    decoded.push(decode_rle(rle).map_err(|e| malformed(e.to_string()))?);
                }
                let views: Vec<_> = decoded.iter().map(|m| m.view()).collect();
                Some(ndarray::stack(Axis(0), &views).expect("equal shapes"))
            }
            Some(_) => {
                return Err(Error::MalformedMask {
                    id: rec.id,
                    index: 0,
                    reason: "mask list is empty".into(),
                })
            }
            None => None,
        };
        Sample::new(rec.id, image, masks, rec.categories, rec.caption, self.mask_stride)
    }
}

impl Iterator for DatasetReader {
    type Item = Result<Sample>;

    fn next(&mut self) -> Option<Self::Item> {
        let rec = self.records.next()?;
        Some(self.load(rec))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        self.records.size_hint()
    }
}

impl ExactSizeIterator for DatasetReader {}

pub fn load_dataset(dir: impl AsRef<Path>, mask_stride: usize) -> Result<DatasetReader> {
    let root = dir.as_ref().to_path_buf();
    let records = read_manifest(&root)?;
    Ok(DatasetReader {
        root,
        records: records.into_iter(),
        mask_stride,
    })
}

/// Eagerly loads every sample.
pub fn load_all(dir: impl AsRef<Path>, mask_stride: usize) -> Result<Vec<Sample>> {
    load_dataset(dir, mask_stride)?.collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::s;

    fn sample(id: &str, caption: Option<&str>, with_masks: bool) -> Sample {
        let image = Array3::from_shape_fn((8, 8, 3), |(i, j, c)| ((i + j + c) % 5) as f32 / 4.0);
        let masks = with_masks.then(|| {
            let mut m = Array3::<u8>::zeros((2, 8, 8));
            m.slice_mut(s![0, 0..4, ..]).fill(1);
            m.slice_mut(s![1, 4..8, ..]).fill(1);
            m
        });
        let cats = with_masks.then(|| vec!["top".into(), "bottom".into()]);
        Sample::new(id, image, masks, cats, caption.map(String::from), 4).unwrap()
    }

    #[test]
    fn empty_manifest_is_empty_sequence() {
        let dir = tempfile::tempdir().unwrap();
        write_manifest(dir.path(), &Vec::new()).unwrap();
        assert_eq!(load_dataset(dir.path(), 4).unwrap().count(), 0);
    }

    #[test]
    fn roundtrips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let samples = vec![sample("a", Some("a red circle"), true), sample("b", Some("x"), false)];
        write_dataset(dir.path(), &samples).unwrap();
        let loaded = load_all(dir.path(), 4).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded[0].id, "a");
        assert_eq!(loaded[0].full_masks, samples[0].full_masks);
        assert_eq!(loaded[0].mask_categories, samples[0].mask_categories);
        assert!(loaded[1].labeled_masks.is_none());
        let diff = (&loaded[0].image - &samples[0].image).mapv(f32::abs);
        assert!(diff.iter().all(|&d| d < 1.0 / 255.0));
    }

    #[test]
    fn caption_only_entry() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &[sample("c", Some("a blue bar"), false)]).unwrap();
        let s = load_all(dir.path(), 4).unwrap();
        assert_eq!(s.len(), 1);
        assert!(s[0].labeled_masks.is_none());
        assert_eq!(s[0].caption.as_deref(), Some("a blue bar"));
    }

    #[test]
    fn corrupt_rle_names_the_id() {
        let dir = tempfile::tempdir().unwrap();
        let mut manifest = write_dataset(dir.path(), &[sample("bad-one", None, true)]).unwrap();
        manifest[0].masks.as_mut().unwrap()[0].counts.push(3);
        write_manifest(dir.path(), &manifest).unwrap();
        let err = load_all(dir.path(), 4).unwrap_err();
        assert!(matches!(&err, Error::MalformedMask { id, index: 0, .. } if id == "bad-one"), "{err}");
    }

    #[test]
    fn distinct_errors_for_missing_image_and_annotation() {
        let dir = tempfile::tempdir().unwrap();
        let mut manifest = write_dataset(dir.path(), &[sample("m", Some("x"), false)]).unwrap();
        manifest[0].image_path = "images/nope.png".into();
        write_manifest(dir.path(), &manifest).unwrap();
        assert!(matches!(load_all(dir.path(), 4), Err(Error::MissingImage { id, .. }) if id == "m"));
        manifest[0].caption = None;
        write_manifest(dir.path(), &manifest).unwrap();
        assert!(matches!(load_all(dir.path(), 4), Err(Error::MissingAnnotation { id }) if id == "m"));
    }

    #[test]
    fn loading_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let samples: Vec<_> = (0..5).map(|i| sample(&format!("s{i}"), Some("x"), i % 2 == 0)).collect();
        write_dataset(dir.path(), &samples).unwrap();
        let ids = |_: ()| load_all(dir.path(), 4).unwrap().into_iter().map(|s| s.id).collect::<Vec<_>>();
        assert_eq!(ids(()), ids(()));
    }
}
