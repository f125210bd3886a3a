//! Row-major run-length encoding of binary masks.
//!
//! Runs alternate zeros and ones and always start with a run of zeros, which
//! may be empty (`[0, 4]` is a full 2x2 mask).

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RleMask {
    /// `[height, width]`.
    pub size: [usize; 2],
    pub counts: Vec<u64>,
}

impl RleMask {
    pub fn height(&self) -> usize {
        self.size[0]
    }

    pub fn width(&self) -> usize {
        self.size[1]
    }

    /// Number of foreground pixels.
    pub fn area(&self) -> u64 {
        self.counts.iter().skip(1).step_by(2).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let expected = (self.size[0] * self.size[1]) as u64;
        let got: u64 = self.counts.iter().sum();
        if got != expected {
            return Err(Error::RleCountMismatch {
                height: self.size[0],
                width: self.size[1],
                got,
                expected,
            });
        }
        Ok(())
    }
}

pub fn encode_rle(mask: ArrayView2<'_, u8>) -> Result<RleMask> {
    let (h, w) = mask.dim();
    let mut counts = Vec::new();
    let mut current = 0u8;
    let mut run = 0u64;
    for (index, &v) in mask.iter().enumerate() {
        if v > 1 {
            return Err(Error::NonBinaryMask { value: v, index });
        }
        if v != current {
            counts.push(run);
            run = 0;
            current = v;
        }
        run += 1;
    }
    counts.push(run);
    Ok(RleMask {
        size: [h, w],
        counts,
    })
}

pub fn decode_rle(rle: &RleMask) -> Result<Array2<u8>> {
    rle.validate()?;
    let mut flat = Vec::with_capacity(rle.size[0] * rle.size[1]);
    for (i, &c) in rle.counts.iter().enumerate() {
        let v = (i % 2) as u8;
        flat.extend(std::iter::repeat_n(v, c as usize));
    }
    Ok(Array2::from_shape_vec((rle.size[0], rle.size[1]), flat).expect("validated length"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn encodes_hand_examples() {
        let zeros = Array2::<u8>::zeros((2, 2));
        assert_eq!(encode_rle(zeros.view()).unwrap().counts, vec![4]);
        let ones = Array2::<u8>::ones((2, 2));
        assert_eq!(encode_rle(ones.view()).unwrap().counts, vec![0, 4]);
        let diag = array![[0u8, 1], [1, 0]];
        assert_eq!(encode_rle(diag.view()).unwrap().counts, vec![1, 2, 1]);
    }

    #[test]
    fn decodes_hand_examples() {
        let z = decode_rle(&RleMask { size: [2, 2], counts: vec![4] }).unwrap();
        assert!(z.iter().all(|&v| v == 0));
        let o = decode_rle(&RleMask { size: [2, 2], counts: vec![0, 4] }).unwrap();
        assert!(o.iter().all(|&v| v == 1));
    }

    #[test]
    fn rejects_non_binary() {
        let m = array![[0u8, 2]];
        assert!(matches!(
            encode_rle(m.view()),
            Err(Error::NonBinaryMask { value: 2, index: 1 })
        ));
    }

    #[test]
    fn rejects_count_mismatch() {
        let bad = RleMask { size: [2, 2], counts: vec![1, 2] };
        assert!(matches!(decode_rle(&bad), Err(Error::RleCountMismatch { got: 3, .. })));
    }

    #[test]
    fn area_counts_foreground() {
        let m = array![[1u8, 1, 0], [0, 1, 1]];
        assert_eq!(encode_rle(m.view()).unwrap().area(), 4);
    }

    proptest! {
        #[test]
        fn roundtrip(h in 1usize..12, w in 1usize..12, bits in proptest::collection::vec(0u8..2, 144)) {
            let m = Array2::from_shape_vec((h, w), bits[..h * w].to_vec()).unwrap();
            let rle = encode_rle(m.view()).unwrap();
            prop_assert_eq!(rle.counts.iter().sum::<u64>(), (h * w) as u64);
            prop_assert_eq!(decode_rle(&rle).unwrap(), m);
        }
    }
}
