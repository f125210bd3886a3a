//! Image decoding, padding to the model's size multiple, and label overlays.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use maskground::model::SIZE_MULTIPLE;

/// Fixed overlay colours keyed by category index (modulo 32).
pub const PALETTE: [[u8; 3]; 32] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
    [0, 128, 128],
    [220, 190, 255],
    [170, 110, 40],
    [255, 250, 200],
    [128, 0, 0],
    [170, 255, 195],
    [128, 128, 0],
    [255, 215, 180],
    [0, 0, 128],
    [128, 128, 128],
    [255, 255, 255],
    [0, 0, 0],
    [100, 149, 237],
    [255, 99, 71],
    [46, 139, 87],
    [218, 165, 32],
    [199, 21, 133],
    [72, 61, 139],
    [0, 191, 255],
    [154, 205, 50],
    [205, 92, 92],
    [112, 128, 144],
];

pub fn palette_color(index: usize) -> [u8; 3] {
    PALETTE[index % PALETTE.len()]
}

/// Pixels added on each side to reach a multiple of 32.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Padding {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Padding {
    pub fn for_size(h: usize, w: usize) -> Self {
        let extra = |n: usize| n.div_ceil(SIZE_MULTIPLE).max(1) * SIZE_MULTIPLE - n;
        let (eh, ew) = (extra(h), extra(w));
        Self {
            top: eh / 2,
            bottom: eh - eh / 2,
            left: ew / 2,
            right: ew - ew / 2,
        }
    }

    pub fn is_zero(&self) -> bool {
        *self == Self::default()
    }
}

/// Mirror index into `0..n` without repeating the edge pixel; folds
/// repeatedly when the padding exceeds the image.
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

/// Reflect-pads an `H x W x 3` image.
pub fn pad_reflect(image: &Array3<f32>, pad: Padding) -> Array3<f32> {
    let (h, w, c) = image.dim();
    let (ph, pw) = (h + pad.top + pad.bottom, w + pad.left + pad.right);
    Array3::from_shape_fn((ph, pw, c), |(i, j, k)| {
        let si = reflect(i as isize - pad.top as isize, h);
        let sj = reflect(j as isize - pad.left as isize, w);
        image[(si, sj, k)]
    })
}

/// Removes `pad` from a label map.
pub fn crop_labels(labels: &Array2<u32>, pad: Padding) -> Array2<u32> {
    let (h, w) = labels.dim();
    labels
        .slice(ndarray::s![pad.top..h - pad.bottom, pad.left..w - pad.right])
        .to_owned()
}

/// Decodes PNG bytes into `H x W x 3` values in `[0, 1]`.
pub fn decode_png(bytes: &[u8]) -> Result<Array3<f32>, image::ImageError> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)?.to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| f32::from(v) / 255.0).collect();
    Ok(Array3::from_shape_vec((h as usize, w as usize, 3), data).expect("rgb buffer"))
}

/// Half-transparent palette colours over the image.
pub fn overlay(image: &Array3<f32>, labels: &Array2<u32>) -> image::RgbImage {
    let (h, w, _) = image.dim();
    assert_eq!(labels.dim(), (h, w), "label map must match the image");
    let mut out = maskground::data::to_rgb8(image);
    for (x, y, px) in out.enumerate_pixels_mut() {
        let c = palette_color(labels[(y as usize, x as usize)] as usize);
        for k in 0..3 {
            px.0[k] = ((u16::from(px.0[k]) + u16::from(c[k])) / 2) as u8;
        }
    }
    out
}

pub fn encode_png(img: &image::RgbImage) -> Vec<u8> {
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png).expect("in-memory PNG");
    buf.into_inner()
}
