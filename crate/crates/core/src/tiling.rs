//! Quadrant tiling for high-resolution refinement: resize to a canonical
//! square, refine the four quadrants independently and stitch them back.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::hrrn::{Hrrn, HrrnInput, HrrnOutput};
use crate::lrscn::{predict_trimap, Lrscn};
use crate::raster::{Image, SaliencyMap, Trimap, UncertaintyMap, MIN_IMAGE_SIDE};

/// Tile order: top-left, top-right, bottom-left, bottom-right.
pub const TILE_COUNT: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TileLayout {
    pub canonical_size: usize,
    pub tile_size: usize,
    pub original_size: (usize, usize),
}

impl TileLayout {
    pub fn new(canonical_size: usize, original_size: (usize, usize)) -> Result<Self> {
        if canonical_size < 2 * MIN_IMAGE_SIDE || canonical_size % 2 != 0 {
            return Err(Error::param(format!("canonical size {canonical_size} must be even and >= 16")));
        }
        let (h, w) = original_size;
        if h < MIN_IMAGE_SIDE || w < MIN_IMAGE_SIDE {
            return Err(Error::param(format!("input {h}x{w} is smaller than {MIN_IMAGE_SIDE}")));
        }
        Ok(Self {
            canonical_size,
            tile_size: canonical_size / 2,
            original_size,
        })
    }

    /// Top-left corner of tile `index`.
    pub fn origin(&self, index: usize) -> (usize, usize) {
        ((index / 2) * self.tile_size, (index % 2) * self.tile_size)
    }

    /// Fails unless the tile side is divisible by `2^depth`.
    pub fn check_depth(&self, depth: usize) -> Result<()> {
        if self.tile_size % (1 << depth) != 0 {
            return Err(Error::param(format!(
                "tile size {} is not divisible by 2^{depth}",
                self.tile_size
            )));
        }
        Ok(())
    }
}

/// Resizes image and trimap to the canonical square and cuts the quadrants.
pub fn prepare(image: &Image, trimap: &Trimap, layout: &TileLayout) -> Result<Vec<HrrnInput>> {
    let (h, w) = image.dims();
    let (th, tw) = trimap.dims();
    if h < MIN_IMAGE_SIDE || w < MIN_IMAGE_SIDE || th == 0 || tw == 0 {
        return Err(Error::param(format!("degenerate input {h}x{w} / trimap {th}x{tw}")));
    }
    let c = layout.canonical_size;
    let image = image.resize_bilinear(c, c);
    let trimap = trimap.resize_nearest(c, c);
    let t = layout.tile_size;
    (0..TILE_COUNT)
        .map(|i| {
            let (y, x) = layout.origin(i);
            HrrnInput::new(image.crop(y, x, t, t), trimap.crop(y, x, t, t))
        })
        .collect()
}

fn stitch_planes(tiles: &[&[f64]], tile_dims: &[(usize, usize)], layout: &TileLayout) -> Result<Vec<f64>> {
    if tiles.len() != TILE_COUNT {
        return Err(Error::shape(format!("expected {TILE_COUNT} tiles, got {}", tiles.len())));
    }
    let t = layout.tile_size;
    if let Some(d) = tile_dims.iter().find(|&&d| d != (t, t)) {
        return Err(Error::shape(format!("tile is {}x{}, layout expects {t}x{t}", d.0, d.1)));
    }
    let c = layout.canonical_size;
    let mut canvas = vec![0.0; c * c];
    for (i, tile) in tiles.iter().enumerate() {
        let (y0, x0) = layout.origin(i);
        for y in 0..t {
            let dst = (y0 + y) * c + x0;
            canvas[dst..dst + t].copy_from_slice(&tile[y * t..(y + 1) * t]);
        }
    }
    Ok(canvas)
}

/// Places the four quadrant predictions on the canonical canvas.
pub fn stitch(tiles: &[SaliencyMap], layout: &TileLayout) -> Result<SaliencyMap> {
    let planes: Vec<&[f64]> = tiles.iter().map(|t| t.as_slice()).collect();
    let dims: Vec<_> = tiles.iter().map(|t| t.dims()).collect();
    let c = layout.canonical_size;
    Ok(SaliencyMap::from_raw(c, c, stitch_planes(&planes, &dims, layout)?))
}

pub fn stitch_logvar(tiles: &[UncertaintyMap], layout: &TileLayout) -> Result<UncertaintyMap> {
    let planes: Vec<&[f64]> = tiles.iter().map(|t| t.as_slice()).collect();
    let dims: Vec<_> = tiles.iter().map(|t| t.dims()).collect();
    let c = layout.canonical_size;
    Ok(UncertaintyMap::from_raw(c, c, stitch_planes(&planes, &dims, layout)?))
}

/// Mean absolute neighbour difference across the two seams divided by the
/// same quantity everywhere else. Values well above 1 indicate visible seams.
pub fn seam_ratio(canvas: &SaliencyMap) -> f64 {
    let (h, w) = canvas.dims();
    let (sy, sx) = (h / 2, w / 2);
    let (mut seam, mut ns, mut rest, mut nr) = (0.0, 0usize, 0.0, 0usize);
    for y in 0..h {
        for x in 0..w {
            let v = canvas.get(y, x);
            if x + 1 < w {
                let d = (canvas.get(y, x + 1) - v).abs();
                if x + 1 == sx {
                    seam += d;
                    ns += 1;
                } else {
                    rest += d;
                    nr += 1;
                }
            }
            if y + 1 < h {
                let d = (canvas.get(y + 1, x) - v).abs();
                if y + 1 == sy {
                    seam += d;
                    ns += 1;
                } else {
                    rest += d;
                    nr += 1;
                }
            }
        }
    }
    let seam = seam / ns.max(1) as f64;
    let rest = rest / nr.max(1) as f64;
    if rest == 0.0 {
        if seam == 0.0 {
            1.0
        } else {
            f64::INFINITY
        }
    } else {
        seam / rest
    }
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    /// Final saliency at the input resolution.
    pub saliency: SaliencyMap,
    /// LRSCN trimap at the input resolution.
    pub trimap: Trimap,
    /// Stitched refinement outputs at the canonical resolution.
    pub canonical: HrrnOutput,
}

/// Refines the four tiles, concurrently.
pub fn refine_tiles(hrrn: &Hrrn, tiles: &[HrrnInput]) -> Result<Vec<HrrnOutput>> {
    tiles.par_iter().map(|t| hrrn.forward(t)).collect()
}

/// Full two-stage inference at the input resolution.
pub fn run_pipeline(image: &Image, lrscn: &Lrscn, hrrn: &Hrrn, canonical_size: usize) -> Result<PipelineOutput> {
    let layout = TileLayout::new(canonical_size, image.dims())?;
    layout.check_depth(hrrn.config.depth)?;
    let s = lrscn.config.backbone.input_size;
    let small = if image.dims() == (s, s) {
        image.clone()
    } else {
        image.resize_bilinear(s, s)
    };
    let out = lrscn.forward(&small)?;
    let c = layout.canonical_size;
    let trimap = predict_trimap(&out, c, c)?;
    let tiles = prepare(image, &trimap, &layout)?;
    let refined = refine_tiles(hrrn, &tiles)?;
    let sal: Vec<SaliencyMap> = refined.iter().map(|r| r.saliency.clone()).collect();
    let lv: Vec<UncertaintyMap> = refined.iter().map(|r| r.logvar.clone()).collect();
    let canvas = stitch(&sal, &layout)?;
    let (h, w) = layout.original_size;
    Ok(PipelineOutput {
        saliency: canvas.resize_bilinear(h, w),
        trimap: trimap.resize_nearest(h, w),
        canonical: HrrnOutput {
            saliency: canvas,
            logvar: stitch_logvar(&lv, &layout)?,
        },
    })
}
