//! Raster types shared by every stage of the pipeline.
//!
//! All rasters are stored row-major. [`Image`] interleaves its three channels
//! per pixel (`HWC`); the single-channel types store one value per pixel.

use crate::error::{Error, Result};

macro_rules! plane_type {
    ($(#[$meta:meta])* $name:ident, $elem:ty) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq)]
        pub struct $name {
            height: usize,
            width: usize,
            data: Vec<$elem>,
        }

        impl $name {
            pub fn height(&self) -> usize {
                self.height
            }

            pub fn width(&self) -> usize {
                self.width
            }

            pub fn dims(&self) -> (usize, usize) {
                (self.height, self.width)
            }

            pub fn len(&self) -> usize {
                self.data.len()
            }

            pub fn is_empty(&self) -> bool {
                self.data.is_empty()
            }

            pub fn as_slice(&self) -> &[$elem] {
                &self.data
            }

            pub fn into_vec(self) -> Vec<$elem> {
                self.data
            }

            #[inline]
            pub fn get(&self, y: usize, x: usize) -> $elem {
                self.data[y * self.width + x]
            }

            pub(crate) fn from_raw(height: usize, width: usize, data: Vec<$elem>) -> Self {
                debug_assert_eq!(data.len(), height * width);
                Self { height, width, data }
            }
        }
    };
}

plane_type!(
    /// Ground-truth annotation with values in `{0, 1}`.
    BinaryMask,
    u8
);
plane_type!(
    /// Predicted saliency in `[0, 1]`.
    SaliencyMap,
    f64
);
plane_type!(
    /// Per-pixel labels: 0 background, 1 uncertain, 2 salient.
    Trimap,
    u8
);
plane_type!(
    /// Per-pixel log-variance `s = log σ²`.
    UncertaintyMap,
    f64
);

pub const TRIMAP_BACKGROUND: u8 = 0;
pub const TRIMAP_UNCERTAIN: u8 = 1;
pub const TRIMAP_SALIENT: u8 = 2;

fn check_len(height: usize, width: usize, len: usize, what: &str) -> Result<()> {
    if height * width != len {
        return Err(Error::shape(format!(
            "{what}: {height}x{width} raster needs {} values, got {len}",
            height * width
        )));
    }
    Ok(())
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        check_len(height, width, data.len(), "BinaryMask")?;
        if let Some(v) = data.iter().find(|&&v| v > 1) {
            return Err(Error::InvalidValue(format!("mask value {v} not in {{0,1}}")));
        }
        Ok(Self::from_raw(height, width, data))
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::from_raw(height, width, vec![0; height * width])
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self::from_raw(height, width, vec![1; height * width])
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x) as u8);
            }
        }
        Self::from_raw(height, width, data)
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn to_saliency(&self) -> SaliencyMap {
        SaliencyMap::from_raw(
            self.height,
            self.width,
            self.data.iter().map(|&v| v as f64).collect(),
        )
    }

    pub fn flip_horizontal(&self) -> Self {
        Self::from_raw(self.height, self.width, flip_plane(self.height, self.width, &self.data))
    }
}

impl SaliencyMap {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        check_len(height, width, data.len(), "SaliencyMap")?;
        if let Some(v) = data.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::InvalidValue(format!("saliency value {v} not in [0,1]")));
        }
        Ok(Self::from_raw(height, width, data))
    }

    pub fn constant(height: usize, width: usize, value: f64) -> Self {
        Self::from_raw(height, width, vec![value.clamp(0.0, 1.0); height * width])
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x).clamp(0.0, 1.0));
            }
        }
        Self::from_raw(height, width, data)
    }

    /// Pixels with `s >= threshold` become foreground.
    pub fn binarize(&self, threshold: f64) -> BinaryMask {
        BinaryMask::from_raw(
            self.height,
            self.width,
            self.data.iter().map(|&v| (v >= threshold) as u8).collect(),
        )
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len().max(1) as f64
    }

    pub fn resize_bilinear(&self, height: usize, width: usize) -> Self {
        let data = resize_bilinear_plane(&self.data, self.height, self.width, height, width);
        Self::from_raw(height, width, data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect())
    }
}

impl Trimap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        check_len(height, width, data.len(), "Trimap")?;
        if let Some(v) = data.iter().find(|&&v| v > 2) {
            return Err(Error::InvalidValue(format!("trimap label {v} not in {{0,1,2}}")));
        }
        Ok(Self::from_raw(height, width, data))
    }

    pub fn filled(height: usize, width: usize, label: u8) -> Self {
        assert!(label <= 2, "trimap label {label} out of range");
        Self::from_raw(height, width, vec![label; height * width])
    }

    /// Number of pixels carrying each label.
    pub fn histogram(&self) -> [usize; 3] {
        let mut h = [0usize; 3];
        for &v in &self.data {
            h[v as usize] += 1;
        }
        h
    }

    pub fn resize_nearest(&self, height: usize, width: usize) -> Self {
        Self::from_raw(height, width, resize_nearest_plane(&self.data, self.height, self.width, height, width))
    }

    pub fn flip_horizontal(&self) -> Self {
        Self::from_raw(self.height, self.width, flip_plane(self.height, self.width, &self.data))
    }

    /// One-hot encoding, channel-major (`3 x H x W`).
    pub fn one_hot(&self) -> Vec<f64> {
        let n = self.data.len();
        let mut out = vec![0.0; 3 * n];
        for (i, &v) in self.data.iter().enumerate() {
            out[v as usize * n + i] = 1.0;
        }
        out
    }
}

impl BinaryMask {
    pub fn resize_nearest(&self, height: usize, width: usize) -> Self {
        Self::from_raw(height, width, resize_nearest_plane(&self.data, self.height, self.width, height, width))
    }
}

impl UncertaintyMap {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        check_len(height, width, data.len(), "UncertaintyMap")?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("log-variance".into()));
        }
        Ok(Self::from_raw(height, width, data))
    }

    pub fn constant(height: usize, width: usize, value: f64) -> Self {
        Self::from_raw(height, width, vec![value; height * width])
    }

    pub fn resize_bilinear(&self, height: usize, width: usize) -> Self {
        Self::from_raw(
            height,
            width,
            resize_bilinear_plane(&self.data, self.height, self.width, height, width),
        )
    }
}

/// RGB raster with values in `[0, 1]`, stored `HWC`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

pub const MIN_IMAGE_SIDE: usize = 8;

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height < MIN_IMAGE_SIDE || width < MIN_IMAGE_SIDE {
            return Err(Error::shape(format!(
                "image {height}x{width} smaller than {MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE}"
            )));
        }
        if data.len() != height * width * 3 {
            return Err(Error::shape(format!(
                "image {height}x{width}x3 needs {} values, got {}",
                height * width * 3,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::InvalidValue(format!("image value {v} not in [0,1]")));
        }
        Ok(Self { height, width, data })
    }

    pub(crate) fn from_raw(height: usize, width: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), height * width * 3);
        Self { height, width, data }
    }

    pub fn constant(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            data.extend_from_slice(&rgb);
        }
        Self::from_raw(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Channel-major copy (`3 x H x W`), the layout the networks consume.
    pub fn to_chw(&self) -> Vec<f64> {
        let n = self.height * self.width;
        let mut out = vec![0.0; 3 * n];
        for i in 0..n {
            for c in 0..3 {
                out[c * n + i] = self.data[i * 3 + c];
            }
        }
        out
    }

    pub fn resize_bilinear(&self, height: usize, width: usize) -> Self {
        let planes = self.to_chw();
        let n = self.height * self.width;
        let resized: Vec<Vec<f64>> = (0..3)
            .map(|c| resize_bilinear_plane(&planes[c * n..(c + 1) * n], self.height, self.width, height, width))
            .collect();
        let mut data = Vec::with_capacity(height * width * 3);
        for i in 0..height * width {
            for plane in &resized {
                data.push(plane[i].clamp(0.0, 1.0));
            }
        }
        Self::from_raw(height, width, data)
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut data = vec![0.0; self.data.len()];
        for y in 0..self.height {
            for x in 0..self.width {
                let src = (y * self.width + x) * 3;
                let dst = (y * self.width + (self.width - 1 - x)) * 3;
                data[dst..dst + 3].copy_from_slice(&self.data[src..src + 3]);
            }
        }
        Self::from_raw(self.height, self.width, data)
    }

    /// Copies the `h x w` window whose top-left corner is `(y0, x0)`.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Self {
        let mut data = Vec::with_capacity(h * w * 3);
        for y in y0..y0 + h {
            let start = (y * self.width + x0) * 3;
            data.extend_from_slice(&self.data[start..start + w * 3]);
        }
        Self::from_raw(h, w, data)
    }
}

macro_rules! plane_crop {
    ($name:ident) => {
        impl $name {
            /// Copies the `h x w` window whose top-left corner is `(y0, x0)`.
            pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Self {
                let mut data = Vec::with_capacity(h * w);
                for y in y0..y0 + h {
                    let start = y * self.width + x0;
                    data.extend_from_slice(&self.data[start..start + w]);
                }
                Self::from_raw(h, w, data)
            }
        }
    };
}

plane_crop!(BinaryMask);
plane_crop!(SaliencyMap);
plane_crop!(Trimap);
plane_crop!(UncertaintyMap);

fn flip_plane<T: Copy>(height: usize, width: usize, data: &[T]) -> Vec<T> {
    let mut out = Vec::with_capacity(data.len());
    for y in 0..height {
        let row = &data[y * width..(y + 1) * width];
        out.extend(row.iter().rev());
    }
    out
}

/// Nearest-neighbour source index with half-pixel centres. For integer
/// upscaling this is exact block replication.
#[inline]
pub(crate) fn nearest_index(dst: usize, src_len: usize, dst_len: usize) -> usize {
    let s = ((dst as f64 + 0.5) * src_len as f64 / dst_len as f64).floor() as usize;
    s.min(src_len - 1)
}

pub(crate) fn resize_nearest_plane<T: Copy>(
    src: &[T],
    sh: usize,
    sw: usize,
    dh: usize,
    dw: usize,
) -> Vec<T> {
    let xs: Vec<usize> = (0..dw).map(|x| nearest_index(x, sw, dw)).collect();
    let mut out = Vec::with_capacity(dh * dw);
    for y in 0..dh {
        let sy = nearest_index(y, sh, dh);
        let row = &src[sy * sw..(sy + 1) * sw];
        out.extend(xs.iter().map(|&sx| row[sx]));
    }
    out
}

/// Bilinear resampling with half-pixel centres and edge clamping.
pub(crate) fn resize_bilinear_plane(src: &[f64], sh: usize, sw: usize, dh: usize, dw: usize) -> Vec<f64> {
    if sh == dh && sw == dw {
        return src.to_vec();
    }
    let taps = |dst_len: usize, src_len: usize| -> Vec<(usize, usize, f64)> {
        let scale = src_len as f64 / dst_len as f64;
        (0..dst_len)
            .map(|d| {
                let pos = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (pos.floor() as usize).min(src_len - 1);
                let i1 = (i0 + 1).min(src_len - 1);
                (i0, i1, pos - i0 as f64)
            })
            .collect()
    };
    let ty = taps(dh, sh);
    let tx = taps(dw, sw);
    let mut out = Vec::with_capacity(dh * dw);
    for &(y0, y1, fy) in &ty {
        for &(x0, x1, fx) in &tx {
            let a = src[y0 * sw + x0] * (1.0 - fx) + src[y0 * sw + x1] * fx;
            let b = src[y1 * sw + x0] * (1.0 - fx) + src[y1 * sw + x1] * fx;
            out.push(a * (1.0 - fy) + b * fy);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_integer_upscale_replicates_blocks() {
        let src: Vec<u8> = (0..4).collect();
        let up = resize_nearest_plane(&src, 2, 2, 4, 4);
        assert_eq!(up, vec![0, 0, 1, 1, 0, 0, 1, 1, 2, 2, 3, 3, 2, 2, 3, 3]);
    }

    #[test]
    fn bilinear_constant_is_constant() {
        let src = vec![0.25; 12];
        let out = resize_bilinear_plane(&src, 3, 4, 7, 5);
        assert!(out.iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn validating_constructors_reject_bad_values() {
        assert!(BinaryMask::new(1, 2, vec![0, 2]).is_err());
        assert!(Trimap::new(1, 2, vec![0, 3]).is_err());
        assert!(SaliencyMap::new(1, 1, vec![1.5]).is_err());
        assert!(UncertaintyMap::new(1, 1, vec![f64::NAN]).is_err());
        assert!(Image::new(4, 8, vec![0.0; 96]).is_err());
    }

    #[test]
    fn one_hot_is_channel_major() {
        let t = Trimap::new(1, 3, vec![0, 1, 2]).unwrap();
        assert_eq!(t.one_hot(), vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]);
    }
}
