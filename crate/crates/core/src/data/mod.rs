//! Domain types, mask codecs, and the on-disk dataset format.

mod dataset;
mod rle;
mod types;

pub use dataset::{
    load_all, load_dataset, read_manifest, read_png, to_rgb8, write_dataset, write_manifest,
    write_png, DatasetReader, Manifest, ManifestRecord, MANIFEST_FILE,
};
pub use rle::{decode_rle, encode_rle, RleMask};
pub use types::{downscale_mask, LabeledMaskSet, MaskProposalSet, Sample, SegmentationResult};
