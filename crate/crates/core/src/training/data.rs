//! Sampling and augmentation of training batches.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::TrainConfig;
use crate::datamodel::DatasetRecord;
use crate::error::Result;
use crate::hrrn::HrrnInput;
use crate::raster::{BinaryMask, Image, Trimap, TRIMAP_UNCERTAIN};
use crate::trimap::random_trimap_from_mask;

/// Combines two seeds (splitmix64 finalizer over a golden-ratio offset).
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(a << 6).wrapping_add(a >> 2);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Walks the dataset in a fresh permutation every epoch.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    len: usize,
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    cursor: usize,
}

impl BatchSampler {
    pub fn new(len: usize, seed: u64) -> Self {
        let mut s = Self {
            len,
            seed,
            epoch: 0,
            order: Vec::new(),
            cursor: 0,
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.order = (0..self.len).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.seed, self.epoch));
        self.order.shuffle(&mut rng);
        self.cursor = 0;
    }

    /// Next `(epoch, index)` pair.
    pub fn next_index(&mut self) -> (u64, usize) {
        if self.cursor == self.len {
            self.epoch += 1;
            self.reshuffle();
        }
        let i = self.order[self.cursor];
        self.cursor += 1;
        (self.epoch, i)
    }
}

pub(super) struct LrscnBatch {
    pub images: Vec<Image>,
    pub masks: Vec<BinaryMask>,
    /// Ground-truth trimaps at input resolution.
    pub trimaps: Vec<Trimap>,
}

fn sample_seed(cfg: &TrainConfig, epoch: u64, index: usize) -> u64 {
    mix_seed(mix_seed(cfg.seed, epoch), index as u64)
}

pub(super) fn lrscn_batch(
    cfg: &TrainConfig,
    data: &[DatasetRecord],
    sampler: &mut BatchSampler,
    step: usize,
) -> Result<LrscnBatch> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed ^ 0x4C52, step as u64));
    let base = cfg.lrscn.backbone.input_size;
    let stride = cfg.lrscn.backbone.total_stride();
    let size = if cfg.augment.multiscale && !cfg.augment.scales.is_empty() {
        let s = cfg.augment.scales[rng.gen_range(0..cfg.augment.scales.len())];
        (((base as f64 * s) / stride as f64).round() as usize).max(1) * stride
    } else {
        base
    };
    let mut batch = LrscnBatch {
        images: Vec::with_capacity(cfg.batch_size),
        masks: Vec::with_capacity(cfg.batch_size),
        trimaps: Vec::with_capacity(cfg.batch_size),
    };
    for _ in 0..cfg.batch_size {
        let (epoch, idx) = sampler.next_index();
        let rec = &data[idx];
        let mut image = rec.image.resize_bilinear(size, size);
        let mut mask = rec.training_mask().resize_nearest(size, size);
        if cfg.augment.hflip && rng.gen_bool(0.5) {
            image = image.flip_horizontal();
            mask = mask.flip_horizontal();
        }
        batch.trimaps.push(random_trimap_from_mask(&mask, sample_seed(cfg, epoch, idx)));
        batch.images.push(image);
        batch.masks.push(mask);
    }
    Ok(batch)
}

pub(super) struct HrrnBatch {
    pub inputs: Vec<HrrnInput>,
    pub masks: Vec<BinaryMask>,
}

/// Trimap of a canonical-size mask as the first stage would hand it over:
/// drawn at `1/downscale` of the size, quantized to `grid` cells there and
/// brought back to the canonical size.
pub(super) fn coarse_trimap(mask: &BinaryMask, downscale: usize, grid: usize, seed: u64) -> Trimap {
    let (h, w) = mask.dims();
    let (sh, sw) = ((h / downscale).max(1), (w / downscale).max(1));
    let mut t = if downscale > 1 {
        random_trimap_from_mask(&mask.resize_nearest(sh, sw), seed)
    } else {
        random_trimap_from_mask(mask, seed)
    };
    if grid > 1 {
        t = t.resize_nearest((sh / grid).max(1), (sw / grid).max(1));
    }
    if t.dims() != (h, w) {
        t = t.resize_nearest(h, w);
    }
    t
}

fn crop_origin(rng: &mut ChaCha8Rng, trimap: &Trimap, crop: usize, band_probability: f64) -> (usize, usize) {
    let (h, w) = trimap.dims();
    let (max_y, max_x) = (h - crop, w - crop);
    if rng.gen_bool(band_probability.clamp(0.0, 1.0)) {
        let band: Vec<usize> = trimap
            .as_slice()
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == TRIMAP_UNCERTAIN)
            .map(|(i, _)| i)
            .collect();
        if let Some(&i) = band.choose(rng) {
            let (cy, cx) = (i / w, i % w);
            return (cy.saturating_sub(crop / 2).min(max_y), cx.saturating_sub(crop / 2).min(max_x));
        }
    }
    (rng.gen_range(0..=max_y), rng.gen_range(0..=max_x))
}

pub(super) fn hrrn_batch(
    cfg: &TrainConfig,
    data: &[DatasetRecord],
    sampler: &mut BatchSampler,
    step: usize,
) -> Result<HrrnBatch> {
    let d = &cfg.hrrn_data;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed ^ 0x4852, step as u64));
    let mut batch = HrrnBatch {
        inputs: Vec::with_capacity(cfg.batch_size),
        masks: Vec::with_capacity(cfg.batch_size),
    };
    for _ in 0..cfg.batch_size {
        let (epoch, idx) = sampler.next_index();
        let rec = &data[idx];
        let c = d.canonical_size;
        let image = rec.image.resize_bilinear(c, c);
        let mask = rec.training_mask().resize_nearest(c, c);
        let trimap = coarse_trimap(&mask, d.trimap_downscale, d.trimap_grid, sample_seed(cfg, epoch, idx));
        let (y0, x0) = crop_origin(&mut rng, &trimap, d.crop_size, d.band_crop_probability);
        let k = d.crop_size;
        let (mut image, mut mask, mut trimap) = (image.crop(y0, x0, k, k), mask.crop(y0, x0, k, k), trimap.crop(y0, x0, k, k));
        if cfg.augment.hflip && rng.gen_bool(0.5) {
            image = image.flip_horizontal();
            mask = mask.flip_horizontal();
            trimap = trimap.flip_horizontal();
        }
        batch.inputs.push(HrrnInput::new(image, trimap)?);
        batch.masks.push(mask);
    }
    Ok(batch)
}
