//! Image records, batching, and the two sources of data: annotated image
//! folders and a procedural synthetic corpus.
//!
//! Pixels are stored channels-last as `(h, w, 3)` values in `[−1, 1]`; the
//! networks consume NCHW batches built by [`to_nchw`].

pub mod annotated;
pub mod preprocess;
pub mod synthetic;

use ndarray::{Array3, ArrayD, Axis, IxDyn};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::{Error, Result};

pub use annotated::{load_annotated_folder, read_annotations, write_annotated_folder, Split};
pub use preprocess::{Crop, PreprocessSpec};
pub use synthetic::{make_synthetic, Hue, SyntheticLabels, SyntheticOracle, SyntheticSpec};

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub pixels: Array3<f64>,
    pub label: Vec<f64>,
    pub source_path: String,
}

impl ImageRecord {
    pub fn size(&self) -> (usize, usize) {
        let (h, w, _) = self.pixels.dim();
        (h, w)
    }
}

/// Maps a byte in `[0, 255]` to `[−1, 1]`.
pub fn normalize(p: u8) -> f64 {
    p as f64 / 127.5 - 1.0
}

/// Inverse of [`normalize`], rounding and clamping out-of-range values.
pub fn denormalize(v: f64) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// Index batches for one epoch: shuffled, fixed size, last partial batch
/// dropped.
pub fn batches<T, R: Rng + ?Sized>(set: &[T], batch_size: usize, rng: &mut R) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Data("batch size must be at least 1".into()));
    }
    if batch_size > set.len() {
        return Err(Error::Data(format!(
            "batch size {batch_size} exceeds the {} available records",
            set.len()
        )));
    }
    let mut order: Vec<usize> = (0..set.len()).collect();
    order.shuffle(rng);
    Ok(order
        .chunks_exact(batch_size)
        .map(<[usize]>::to_vec)
        .collect())
}

/// Stacks `(h, w, 3)` images into `[N, 3, h, w]`, mirroring the ones whose
/// `flip` flag is set.
pub fn to_nchw(images: &[&Array3<f64>], flip: &[bool]) -> ArrayD<f64> {
    assert_eq!(images.len(), flip.len());
    let (h, w, c) = images.first().map_or((0, 0, 3), |i| i.dim());
    let mut out = ArrayD::zeros(IxDyn(&[images.len(), c, h, w]));
    for (n, (img, &f)) in images.iter().zip(flip).enumerate() {
        assert_eq!(img.dim(), (h, w, c), "batch images differ in size");
        for y in 0..h {
            for x in 0..w {
                let sx = if f { w - 1 - x } else { x };
                for k in 0..c {
                    out[[n, k, y, x]] = img[[y, sx, k]];
                }
            }
        }
    }
    out
}

/// Splits an NCHW batch back into channels-last images.
pub fn from_nchw(batch: &ArrayD<f64>) -> Vec<Array3<f64>> {
    batch
        .axis_iter(Axis(0))
        .map(|img| {
            let s = img.shape();
            let (c, h, w) = (s[0], s[1], s[2]);
            Array3::from_shape_fn((h, w, c), |(y, x, k)| img[[k, y, x]])
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn batching_drops_partial_batch() {
        let set: Vec<u32> = (0..10).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let b = batches(&set, 4, &mut rng).unwrap();
        assert_eq!(b.len(), 2);
        assert!(b.iter().all(|x| x.len() == 4));
        let again = batches(&set, 4, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(b, again);
    }

    #[test]
    fn batches_cover_the_shuffled_prefix() {
        let set: Vec<u32> = (0..10).collect();
        let b = batches(&set, 4, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let mut order: Vec<usize> = (0..10).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(8));
        let union: Vec<usize> = b.concat();
        assert_eq!(union, order[..8].to_vec());
    }

    #[test]
    fn batching_rejects_oversized_batches() {
        let set = [1, 2, 3];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(batches(&set, 4, &mut rng).is_err());
        assert!(batches(&set, 0, &mut rng).is_err());
    }

    #[test]
    fn nchw_round_trip_and_flip() {
        let img = Array3::from_shape_fn((2, 3, 3), |(y, x, k)| (y * 9 + x * 3 + k) as f64);
        let b = to_nchw(&[&img], &[false]);
        assert_eq!(b.shape(), &[1, 3, 2, 3]);
        assert_eq!(from_nchw(&b)[0], img);
        let f = to_nchw(&[&img], &[true]);
        assert_eq!(f[[0, 1, 1, 0]], img[[1, 2, 1]]);
    }

    proptest! {
        #[test]
        fn normalization_round_trip(p in any::<u8>()) {
            let v = normalize(p);
            prop_assert!((-1.0..=1.0).contains(&v));
            prop_assert_eq!(denormalize(v), p);
        }
    }
}
