//! Trimap generation from binary masks and from predicted saliency.
//!
//! A trimap marks the band around object boundaries as uncertain. The band
//! is the difference between a dilation and an erosion of the mask by the
//! same square structuring element, so for side `k` it extends `k / 2`
//! pixels to either side of the boundary.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::datamodel::{dilate, erode};
use crate::error::{Error, Result};
use crate::raster::{BinaryMask, SaliencyMap, Trimap, TRIMAP_BACKGROUND, TRIMAP_SALIENT, TRIMAP_UNCERTAIN};

/// Structuring-element sides drawn when generating training targets.
pub const TRAINING_KERNELS: [usize; 5] = [5, 7, 9, 11, 13];

pub const DEFAULT_SALIENCY_THRESHOLD: f64 = 0.5;

pub fn trimap_from_mask(mask: &BinaryMask, kernel: usize) -> Result<Trimap> {
    let inner = erode(mask, kernel)?;
    let outer = dilate(mask, kernel)?;
    let labels = inner
        .as_slice()
        .iter()
        .zip(outer.as_slice())
        .map(|(&i, &o)| match (i, o) {
            (1, _) => TRIMAP_SALIENT,
            (_, 0) => TRIMAP_BACKGROUND,
            _ => TRIMAP_UNCERTAIN,
        })
        .collect();
    Ok(Trimap::from_raw(mask.height(), mask.width(), labels))
}

/// Draws the kernel uniformly from [`TRAINING_KERNELS`].
pub fn random_kernel(seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    TRAINING_KERNELS[rng.gen_range(0..TRAINING_KERNELS.len())]
}

pub fn random_trimap_from_mask(mask: &BinaryMask, seed: u64) -> Trimap {
    trimap_from_mask(mask, random_kernel(seed)).expect("training kernels are odd")
}

/// Binarizes `s` at `threshold` (inclusive) and builds the trimap of the result.
pub fn trimap_from_saliency(s: &SaliencyMap, threshold: f64, kernel: usize) -> Result<Trimap> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::param(format!("threshold must lie in (0,1), got {threshold}")));
    }
    trimap_from_mask(&s.binarize(threshold), kernel)
}

/// Foreground pixels with an in-raster 4-neighbour in the background.
///
/// Pixels outside the frame are ignored here, which matches the replicate
/// padding used by the morphology.
pub fn inner_boundary(mask: &BinaryMask) -> Vec<(usize, usize)> {
    let (h, w) = mask.dims();
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if mask.get(y, x) == 0 {
                continue;
            }
            let bg = (y > 0 && mask.get(y - 1, x) == 0)
                || (y + 1 < h && mask.get(y + 1, x) == 0)
                || (x > 0 && mask.get(y, x - 1) == 0)
                || (x + 1 < w && mask.get(y, x + 1) == 0);
            if bg {
                out.push((y, x));
            }
        }
    }
    out
}
