//! PNG codecs, synthetic scenes, annotation corruption and dataset layout.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageReader, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::raster::{BinaryMask, Image, Trimap};

/// Image, clean annotation and (optionally) a corrupted copy of it.
#[derive(Debug, Clone)]
pub struct DatasetRecord {
    pub image: Image,
    pub mask: BinaryMask,
    pub noisy_mask: Option<BinaryMask>,
    pub identifier: String,
}

impl DatasetRecord {
    pub fn new(identifier: impl Into<String>, image: Image, mask: BinaryMask) -> Result<Self> {
        if image.dims() != mask.dims() {
            return Err(Error::shape(format!(
                "image {:?} and mask {:?} differ",
                image.dims(),
                mask.dims()
            )));
        }
        Ok(Self {
            image,
            mask,
            noisy_mask: None,
            identifier: identifier.into(),
        })
    }

    /// The annotation used for training: the corrupted one when present.
    pub fn training_mask(&self) -> &BinaryMask {
        self.noisy_mask.as_ref().unwrap_or(&self.mask)
    }
}

fn open_png(path: &Path) -> Result<image::DynamicImage> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let reader = ImageReader::open(path)?.with_guessed_format()?;
    Ok(reader.decode()?)
}

fn unsupported(path: &Path, detail: impl Into<String>) -> Error {
    Error::UnsupportedFormat {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

/// Loads an 8-bit RGB PNG; values become `raw / 255`.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let img = open_png(path)?;
    let rgb = match img {
        image::DynamicImage::ImageRgb8(rgb) => rgb,
        other => return Err(unsupported(path, format!("expected 8-bit RGB, found {:?}", other.color()))),
    };
    let (w, h) = rgb.dimensions();
    let data = rgb.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
    Image::new(h as usize, w as usize, data)
}

/// Writes an image, rounding `v * 255` to the nearest byte.
pub fn save_image(image: &Image, path: impl AsRef<Path>) -> Result<()> {
    let bytes: Vec<u8> = image.as_slice().iter().map(|&v| to_byte(v)).collect();
    let buf = RgbImage::from_raw(image.width() as u32, image.height() as u32, bytes)
        .expect("buffer length matches dimensions");
    buf.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

fn load_gray(path: &Path) -> Result<GrayImage> {
    match open_png(path)? {
        image::DynamicImage::ImageLuma8(g) => Ok(g),
        other => Err(unsupported(
            path,
            format!("expected single-channel 8-bit, found {:?}", other.color()),
        )),
    }
}

fn save_gray(height: usize, width: usize, bytes: Vec<u8>, path: &Path) -> Result<()> {
    let buf = GrayImage::from_raw(width as u32, height as u32, bytes).expect("buffer length matches dimensions");
    buf.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

#[inline]
fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub const MASK_THRESHOLD: u8 = 128;

/// Loads a grayscale mask; raw values `>= 128` are foreground.
pub fn load_mask(path: impl AsRef<Path>) -> Result<BinaryMask> {
    let g = load_gray(path.as_ref())?;
    let (w, h) = g.dimensions();
    let data = g.into_raw().into_iter().map(|v| (v >= MASK_THRESHOLD) as u8).collect();
    BinaryMask::new(h as usize, w as usize, data)
}

pub fn save_mask(mask: &BinaryMask, path: impl AsRef<Path>) -> Result<()> {
    let bytes = mask.as_slice().iter().map(|&v| if v == 1 { 255 } else { 0 }).collect();
    save_gray(mask.height(), mask.width(), bytes, path.as_ref())
}

/// Saves a saliency map as an 8-bit grayscale PNG.
pub fn save_saliency(map: &crate::raster::SaliencyMap, path: impl AsRef<Path>) -> Result<()> {
    let bytes = map.as_slice().iter().map(|&v| to_byte(v)).collect();
    save_gray(map.height(), map.width(), bytes, path.as_ref())
}

/// Loads a grayscale PNG as a saliency map (`raw / 255`).
pub fn load_saliency(path: impl AsRef<Path>) -> Result<crate::raster::SaliencyMap> {
    let g = load_gray(path.as_ref())?;
    let (w, h) = g.dimensions();
    let data = g.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
    crate::raster::SaliencyMap::new(h as usize, w as usize, data)
}

const TRIMAP_GRAY: [u8; 3] = [0, 128, 255];

pub fn encode_trimap(trimap: &Trimap, path: impl AsRef<Path>) -> Result<()> {
    let bytes = trimap.as_slice().iter().map(|&l| TRIMAP_GRAY[l as usize]).collect();
    save_gray(trimap.height(), trimap.width(), bytes, path.as_ref())
}

#[inline]
pub fn trimap_label_from_gray(v: u8) -> u8 {
    match v {
        0..=63 => 0,
        64..=191 => 1,
        _ => 2,
    }
}

pub fn decode_trimap(path: impl AsRef<Path>) -> Result<Trimap> {
    let g = load_gray(path.as_ref())?;
    let (w, h) = g.dimensions();
    let data = g.into_raw().into_iter().map(trimap_label_from_gray).collect();
    Trimap::new(h as usize, w as usize, data)
}

// ---------------------------------------------------------------------------
// Morphology

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Extremum {
    Min,
    Max,
}

/// Separable square-window min/max filter with replicate padding.
fn square_filter(mask: &BinaryMask, side: usize, op: Extremum) -> BinaryMask {
    let (h, w) = mask.dims();
    let r = (side / 2) as isize;
    let pick = |a: u8, b: u8| match op {
        Extremum::Min => a.min(b),
        Extremum::Max => a.max(b),
    };
    let src = mask.as_slice();
    let mut rows = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = src[y * w + x];
            for d in -r..=r {
                let xx = (x as isize + d).clamp(0, w as isize - 1) as usize;
                acc = pick(acc, src[y * w + xx]);
            }
            rows[y * w + x] = acc;
        }
    }
    let mut out = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = rows[y * w + x];
            for d in -r..=r {
                let yy = (y as isize + d).clamp(0, h as isize - 1) as usize;
                acc = pick(acc, rows[yy * w + x]);
            }
            out[y * w + x] = acc;
        }
    }
    BinaryMask::from_raw(h, w, out)
}

pub(crate) fn check_odd_kernel(kernel: usize) -> Result<()> {
    if kernel < 3 || kernel % 2 == 0 {
        return Err(Error::param(format!(
            "structuring element side must be odd and >= 3, got {kernel}"
        )));
    }
    Ok(())
}

/// Erosion by a `kernel x kernel` square.
pub fn erode(mask: &BinaryMask, kernel: usize) -> Result<BinaryMask> {
    check_odd_kernel(kernel)?;
    Ok(square_filter(mask, kernel, Extremum::Min))
}

/// Dilation by a `kernel x kernel` square.
pub fn dilate(mask: &BinaryMask, kernel: usize) -> Result<BinaryMask> {
    check_odd_kernel(kernel)?;
    Ok(square_filter(mask, kernel, Extremum::Max))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorruptMode {
    Erode,
    Dilate,
    /// Erode or dilate with equal probability, drawn from the seed.
    Random,
}

/// Simulates boundary annotation noise by eroding or dilating a mask.
pub fn corrupt_mask(mask: &BinaryMask, kernel: usize, mode: CorruptMode, seed: u64) -> Result<BinaryMask> {
    check_odd_kernel(kernel)?;
    let mode = match mode {
        CorruptMode::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            if rng.gen_bool(0.5) {
                CorruptMode::Erode
            } else {
                CorruptMode::Dilate
            }
        }
        m => m,
    };
    match mode {
        CorruptMode::Erode => erode(mask, kernel),
        _ => dilate(mask, kernel),
    }
}

// ---------------------------------------------------------------------------
// Synthetic scenes

pub const SCENE_NOISE_SIGMA: f64 = 0.05;
pub const MIN_FG_FRACTION: f64 = 0.05;
pub const MAX_FG_FRACTION: f64 = 0.60;
const MAX_SCENE_ATTEMPTS: usize = 10_000;

#[derive(Debug, Clone)]
enum Shape {
    Ellipse { cy: f64, cx: f64, ry: f64, rx: f64, angle: f64 },
    Polygon { vertices: Vec<(f64, f64)> },
}

impl Shape {
    fn random(rng: &mut ChaCha8Rng, size: f64) -> Self {
        let cy = rng.gen_range(0.2..0.8) * size;
        let cx = rng.gen_range(0.2..0.8) * size;
        if rng.gen_bool(0.5) {
            Shape::Ellipse {
                cy,
                cx,
                ry: rng.gen_range(0.08..0.3) * size,
                rx: rng.gen_range(0.08..0.3) * size,
                angle: rng.gen_range(0.0..PI),
            }
        } else {
            let n = rng.gen_range(5..=8);
            let radius = rng.gen_range(0.1..0.3) * size;
            let phase = rng.gen_range(0.0..2.0 * PI);
            let vertices = (0..n)
                .map(|i| {
                    let t = phase + 2.0 * PI * i as f64 / n as f64 + rng.gen_range(-0.25..0.25);
                    let r = radius * rng.gen_range(0.6..1.0);
                    (cy + r * t.sin(), cx + r * t.cos())
                })
                .collect();
            Shape::Polygon { vertices }
        }
    }

    fn contains(&self, y: f64, x: f64) -> bool {
        match self {
            Shape::Ellipse { cy, cx, ry, rx, angle } => {
                let (s, c) = angle.sin_cos();
                let dy = y - cy;
                let dx = x - cx;
                let u = c * dx + s * dy;
                let v = -s * dx + c * dy;
                (u / rx).powi(2) + (v / ry).powi(2) <= 1.0
            }
            Shape::Polygon { vertices } => {
                // even-odd ray casting
                let mut inside = false;
                let n = vertices.len();
                let mut j = n - 1;
                for i in 0..n {
                    let (yi, xi) = vertices[i];
                    let (yj, xj) = vertices[j];
                    if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
                        inside = !inside;
                    }
                    j = i;
                }
                inside
            }
        }
    }
}

fn random_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95)]
}

/// Smooth additive texture: a sum of two low-frequency plane waves.
struct Texture {
    waves: [(f64, f64, f64, f64); 2],
}

impl Texture {
    fn random(rng: &mut ChaCha8Rng, size: f64, amplitude: f64) -> Self {
        let mut wave = || {
            let freq = rng.gen_range(0.5..2.0) * 2.0 * PI / size;
            let dir = rng.gen_range(0.0..2.0 * PI);
            (freq * dir.sin(), freq * dir.cos(), rng.gen_range(0.0..2.0 * PI), amplitude * rng.gen_range(0.5..1.0))
        };
        Self {
            waves: [wave(), wave()],
        }
    }

    fn at(&self, y: f64, x: f64) -> f64 {
        self.waves.iter().map(|&(fy, fx, ph, a)| a * (fy * y + fx * x + ph).sin()).sum()
    }
}

/// Renders a deterministic scene of `n_shapes` filled ellipses/polygons on a
/// textured background. Shapes are redrawn until the foreground covers
/// between 5% and 60% of the frame.
pub fn gen_synthetic_scene(seed: u64, size: usize, n_shapes: usize) -> Result<(Image, BinaryMask)> {
    if size < 32 {
        return Err(Error::param(format!("scene size must be >= 32, got {size}")));
    }
    if n_shapes < 1 {
        return Err(Error::param("n_shapes must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size as f64;
    let mut mask = None;
    for _ in 0..MAX_SCENE_ATTEMPTS {
        let shapes: Vec<Shape> = (0..n_shapes).map(|_| Shape::random(&mut rng, s)).collect();
        let m = BinaryMask::from_fn(size, size, |y, x| {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            shapes.iter().any(|sh| sh.contains(py, px))
        });
        let frac = m.count_ones() as f64 / (size * size) as f64;
        if (MIN_FG_FRACTION..=MAX_FG_FRACTION).contains(&frac) {
            mask = Some(m);
            break;
        }
    }
    let mask = mask.ok_or_else(|| Error::param("could not place shapes within the foreground bounds"))?;

    let bg = random_color(&mut rng);
    let fg = loop {
        let c = random_color(&mut rng);
        let diff: f64 = c.iter().zip(&bg).map(|(a, b)| (a - b).abs()).sum::<f64>() / 3.0;
        if diff >= 0.3 {
            break c;
        }
    };
    let bg_tex = Texture::random(&mut rng, s, 0.08);
    let fg_tex = Texture::random(&mut rng, s, 0.04);
    let noise = Normal::new(0.0, SCENE_NOISE_SIGMA).expect("valid sigma");

    let mut data = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let (base, tex) = if mask.get(y, x) == 1 { (&fg, &fg_tex) } else { (&bg, &bg_tex) };
            let t = tex.at(y as f64, x as f64);
            for &c in base.iter() {
                data.push((c + t + noise.sample(&mut rng)).clamp(0.0, 1.0));
            }
        }
    }
    Ok((Image::from_raw(size, size, data), mask))
}

/// Seed of the `index`-th scene of a dataset synthesized from `base_seed`.
pub fn scene_seed(base_seed: u64, index: usize) -> u64 {
    base_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index as u64)
}

/// Generates `count` scenes with 1-3 shapes each.
pub fn synthesize_dataset(base_seed: u64, count: usize, size: usize) -> Result<Vec<DatasetRecord>> {
    (0..count)
        .map(|i| {
            let seed = scene_seed(base_seed, i);
            let n_shapes = 1 + (seed % 3) as usize;
            let (image, mask) = gen_synthetic_scene(seed, size, n_shapes)?;
            DatasetRecord::new(format!("scene_{i:05}"), image, mask)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Dataset directories: `images/<stem>.png` + `masks/<stem>.png`

pub const IMAGES_DIR: &str = "images";
pub const MASKS_DIR: &str = "masks";

/// Lists `*.png` stems of a directory, sorted.
pub fn png_stems(dir: &Path) -> Result<Vec<String>> {
    if !dir.is_dir() {
        return Err(Error::MissingFile(dir.to_path_buf()));
    }
    let mut stems = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("png") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                stems.push(stem.to_string());
            }
        }
    }
    stems.sort();
    Ok(stems)
}

pub fn write_dataset(dir: impl AsRef<Path>, records: &[DatasetRecord]) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir.join(IMAGES_DIR))?;
    fs::create_dir_all(dir.join(MASKS_DIR))?;
    for r in records {
        save_image(&r.image, dir.join(IMAGES_DIR).join(format!("{}.png", r.identifier)))?;
        save_mask(&r.mask, dir.join(MASKS_DIR).join(format!("{}.png", r.identifier)))?;
    }
    Ok(())
}

/// Loads every image/mask pair whose stems match; unmatched files are skipped.
pub fn read_dataset(dir: impl AsRef<Path>) -> Result<Vec<DatasetRecord>> {
    let dir = dir.as_ref();
    let image_dir: PathBuf = dir.join(IMAGES_DIR);
    let mask_dir: PathBuf = dir.join(MASKS_DIR);
    let masks = png_stems(&mask_dir)?;
    let mut out = Vec::new();
    for stem in png_stems(&image_dir)? {
        if masks.binary_search(&stem).is_err() {
            log::warn!("no mask for image {stem}; skipped");
            continue;
        }
        let image = load_image(image_dir.join(format!("{stem}.png")))?;
        let mask = load_mask(mask_dir.join(format!("{stem}.png")))?;
        out.push(DatasetRecord::new(stem, image, mask)?);
    }
    Ok(out)
}
