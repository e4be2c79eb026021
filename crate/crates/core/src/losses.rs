//! Training objectives for both stages.
//!
//! Every loss has a `*_grad` form over flat row-major slices returning the
//! value together with its analytic gradient; the typed wrappers drop the
//! gradient. All reductions run in row-major order.

use crate::error::{Error, Result};
use crate::raster::{BinaryMask, SaliencyMap, Trimap, UncertaintyMap, TRIMAP_UNCERTAIN};

pub const BCE_CLAMP: f64 = 1e-7;
pub const FMEASURE_EPS: f64 = 1e-7;
pub const BETA_SQ: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    pub value: f64,
    /// Pixels that contributed to the value.
    pub pixel_count: usize,
}

impl LossValue {
    pub fn new(value: f64, pixel_count: usize) -> Self {
        Self { value, pixel_count }
    }

    pub fn zero() -> Self {
        Self::new(0.0, 0)
    }
}

impl std::ops::Add for LossValue {
    type Output = LossValue;

    fn add(self, rhs: LossValue) -> LossValue {
        LossValue::new(self.value + rhs.value, self.pixel_count + rhs.pixel_count)
    }
}

/// Sliding-window parameters of the region (SSIM) term.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SsimConfig {
    pub window: usize,
    pub stride: usize,
    pub c1: f64,
    pub c2: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self {
            window: 11,
            stride: 11,
            c1: 1e-4,
            c2: 9e-4,
        }
    }
}

impl SsimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window < 3 || self.window % 2 == 0 {
            return Err(Error::param(format!("SSIM window must be odd and >= 3, got {}", self.window)));
        }
        if self.stride == 0 {
            return Err(Error::param("SSIM stride must be >= 1"));
        }
        if !(self.c1 > 0.0 && self.c2 > 0.0) {
            return Err(Error::param("SSIM constants must be positive"));
        }
        Ok(())
    }

    /// Shrinks the window (and stride) to the largest odd side that fits a
    /// `height x width` raster. Used for the coarse supervision levels.
    pub fn fitted_to(&self, height: usize, width: usize) -> Self {
        let side = height.min(width).max(1);
        if side >= self.window {
            return *self;
        }
        let window = if side % 2 == 0 { side - 1 } else { side };
        Self {
            window,
            stride: self.stride.min(window).max(1),
            ..*self
        }
    }
}

fn same_len(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::shape(format!("{what}: {a} vs {b} values")));
    }
    Ok(())
}

fn check_dims(a: (usize, usize), b: (usize, usize), what: &str) -> Result<()> {
    if a != b {
        return Err(Error::shape(format!("{what}: {a:?} vs {b:?}")));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Saliency terms

pub fn bce_pixel_grad(s: &[f64], g: &[f64]) -> Result<(LossValue, Vec<f64>)> {
    same_len(s.len(), g.len(), "bce")?;
    let n = s.len() as f64;
    let mut total = 0.0;
    let mut grad = vec![0.0; s.len()];
    for (i, (&si, &gi)) in s.iter().zip(g).enumerate() {
        let c = si.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
        total -= gi * c.ln() + (1.0 - gi) * (1.0 - c).ln();
        if si > BCE_CLAMP && si < 1.0 - BCE_CLAMP {
            grad[i] = (-gi / c + (1.0 - gi) / (1.0 - c)) / n;
        }
    }
    Ok((LossValue::new(total / n, s.len()), grad))
}

pub fn bce_pixel_loss(s: &SaliencyMap, g: &BinaryMask) -> Result<LossValue> {
    check_dims(s.dims(), g.dims(), "bce")?;
    Ok(bce_pixel_grad(s.as_slice(), &g.to_saliency().into_vec())?.0)
}

/// Region loss `1 - mean(SSIM)` over windows tiled with the configured
/// stride. Windows that would cross the raster edge are dropped.
pub fn ssim_region_grad(
    s: &[f64],
    g: &[f64],
    height: usize,
    width: usize,
    cfg: &SsimConfig,
) -> Result<(LossValue, Vec<f64>)> {
    same_len(s.len(), g.len(), "ssim")?;
    same_len(s.len(), height * width, "ssim raster")?;
    let k = cfg.window;
    if height < k || width < k {
        return Err(Error::shape(format!("{height}x{width} raster smaller than SSIM window {k}")));
    }
    let n = (k * k) as f64;
    let mut grad = vec![0.0; s.len()];
    let mut ssd_sum = 0.0;
    let mut windows = 0usize;
    let mut y0 = 0;
    while y0 + k <= height {
        let mut x0 = 0;
        while x0 + k <= width {
            let (mut ss, mut sg, mut sss, mut sgg, mut ssg) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for y in y0..y0 + k {
                for x in x0..x0 + k {
                    let (a, b) = (s[y * width + x], g[y * width + x]);
                    ss += a;
                    sg += b;
                    sss += a * a;
                    sgg += b * b;
                    ssg += a * b;
                }
            }
            let mu_s = ss / n;
            let mu_g = sg / n;
            let var_s = sss / n - mu_s * mu_s;
            let var_g = sgg / n - mu_g * mu_g;
            let cov = ssg / n - mu_s * mu_g;
            let a = 2.0 * mu_s * mu_g + cfg.c1;
            let b = 2.0 * cov + cfg.c2;
            let c = mu_s * mu_s + mu_g * mu_g + cfg.c1;
            let d = var_s + var_g + cfg.c2;
            let ssd = a * b / (c * d);
            ssd_sum += ssd;
            windows += 1;

            for y in y0..y0 + k {
                for x in x0..x0 + k {
                    let i = y * width + x;
                    let da = 2.0 * mu_g / n;
                    let db = 2.0 * (g[i] - mu_g) / n;
                    let dc = 2.0 * mu_s / n;
                    let dd = 2.0 * (s[i] - mu_s) / n;
                    let num = da * b + a * db;
                    let den = dc * d + c * dd;
                    grad[i] -= num / (c * d) - a * b * den / (c * d * c * d);
                }
            }
            x0 += cfg.stride;
        }
        y0 += cfg.stride;
    }
    let m = windows as f64;
    for v in &mut grad {
        *v /= m;
    }
    Ok((LossValue::new(1.0 - ssd_sum / m, windows * k * k), grad))
}

pub fn ssim_region_loss(s: &SaliencyMap, g: &BinaryMask, cfg: &SsimConfig) -> Result<LossValue> {
    cfg.validate()?;
    check_dims(s.dims(), g.dims(), "ssim")?;
    let gs = g.to_saliency();
    Ok(ssim_region_grad(s.as_slice(), gs.as_slice(), s.height(), s.width(), cfg)?.0)
}

/// `1 - F_beta` with soft precision and recall.
pub fn fmeasure_grad(s: &[f64], g: &[f64]) -> Result<(LossValue, Vec<f64>)> {
    same_len(s.len(), g.len(), "fmeasure")?;
    let tp: f64 = s.iter().zip(g).map(|(a, b)| a * b).sum();
    let sum_s: f64 = s.iter().sum();
    let sum_g: f64 = g.iter().sum();
    let ps = sum_s + FMEASURE_EPS;
    let pg = sum_g + FMEASURE_EPS;
    let precision = tp / ps;
    let recall = tp / pg;
    let denom = BETA_SQ * precision + recall;
    if denom <= 0.0 {
        return Ok((LossValue::new(1.0, s.len()), vec![0.0; s.len()]));
    }
    let f = (1.0 + BETA_SQ) * precision * recall / denom;
    let df_dp = (1.0 + BETA_SQ) * recall * recall / (denom * denom);
    let df_dr = (1.0 + BETA_SQ) * BETA_SQ * precision * precision / (denom * denom);
    let grad = g
        .iter()
        .map(|&gi| {
            let dp = gi / ps - tp / (ps * ps);
            let dr = gi / pg;
            -(df_dp * dp + df_dr * dr)
        })
        .collect();
    Ok((LossValue::new(1.0 - f, s.len()), grad))
}

pub fn fmeasure_loss(s: &SaliencyMap, g: &BinaryMask) -> Result<LossValue> {
    check_dims(s.dims(), g.dims(), "fmeasure")?;
    Ok(fmeasure_grad(s.as_slice(), g.to_saliency().as_slice())?.0)
}

/// Per-level weight `1 / 2^(i-1)`, level 1 being the finest.
pub fn level_weight(level_index: usize) -> f64 {
    0.5f64.powi(level_index as i32)
}

/// Object + region + pixel loss of one level, with its gradient.
pub fn level_loss_grad(
    s: &[f64],
    g: &[f64],
    height: usize,
    width: usize,
    cfg: &SsimConfig,
) -> Result<(LossValue, Vec<f64>)> {
    let cfg = cfg.fitted_to(height, width);
    let (lo, go) = fmeasure_grad(s, g)?;
    let (lr, gr) = ssim_region_grad(s, g, height, width, &cfg)?;
    let (lp, gp) = bce_pixel_grad(s, g)?;
    let grad = go.iter().zip(&gr).zip(&gp).map(|((a, b), c)| a + b + c).collect();
    Ok((LossValue::new(lo.value + lr.value + lp.value, s.len()), grad))
}

/// Multi-level saliency loss. The mask is nearest-resized to each level's
/// resolution when the sizes differ.
pub fn saliency_loss_grad(levels: &[(SaliencyMap, BinaryMask)], cfg: &SsimConfig) -> Result<(LossValue, Vec<Vec<f64>>)> {
    if levels.is_empty() || levels.len() > 4 {
        return Err(Error::param(format!("saliency loss needs 1-4 levels, got {}", levels.len())));
    }
    let mut total = LossValue::zero();
    let mut grads = Vec::with_capacity(levels.len());
    for (i, (s, g)) in levels.iter().enumerate() {
        let g = if g.dims() == s.dims() {
            g.clone()
        } else {
            g.resize_nearest(s.height(), s.width())
        };
        let gs = g.to_saliency();
        let (l, mut grad) = level_loss_grad(s.as_slice(), gs.as_slice(), s.height(), s.width(), cfg)?;
        let w = level_weight(i);
        grad.iter_mut().for_each(|v| *v *= w);
        total = total + LossValue::new(w * l.value, l.pixel_count);
        grads.push(grad);
    }
    Ok((total, grads))
}

pub fn saliency_loss(levels: &[(SaliencyMap, BinaryMask)]) -> Result<LossValue> {
    Ok(saliency_loss_grad(levels, &SsimConfig::default())?.0)
}

// ---------------------------------------------------------------------------
// Trimap classification

/// Softmax cross-entropy; `logits` is channel-major `3 x N`.
pub fn trimap_ce_grad(logits: &[f64], labels: &[u8]) -> Result<(LossValue, Vec<f64>)> {
    let n = labels.len();
    same_len(logits.len(), 3 * n, "trimap logits")?;
    let mut total = 0.0;
    let mut grad = vec![0.0; logits.len()];
    for (i, &label) in labels.iter().enumerate() {
        let z = [logits[i], logits[n + i], logits[2 * n + i]];
        let m = z[0].max(z[1]).max(z[2]);
        let e = [(z[0] - m).exp(), (z[1] - m).exp(), (z[2] - m).exp()];
        let sum = e[0] + e[1] + e[2];
        total -= z[label as usize] - m - sum.ln();
        for c in 0..3 {
            let p = e[c] / sum;
            grad[c * n + i] = (p - (c == label as usize) as u8 as f64) / n as f64;
        }
    }
    Ok((LossValue::new(total / n as f64, n), grad))
}

/// `logits` holds three `H x W` planes (background, uncertain, salient).
pub fn trimap_ce_loss(logits: &[f64], t: &Trimap) -> Result<LossValue> {
    Ok(trimap_ce_grad(logits, t.as_slice())?.0)
}

pub fn lrscn_loss(levels: &[(SaliencyMap, BinaryMask)], logits: &[f64], t_gt: &Trimap) -> Result<LossValue> {
    Ok(saliency_loss(levels)? + trimap_ce_loss(logits, t_gt)?)
}

// ---------------------------------------------------------------------------
// Refinement terms

/// Mean `|s - g|` over definite pixels (trimap label 0 or 2).
pub fn l1_definite_grad(s: &[f64], g: &[f64], labels: &[u8]) -> Result<(LossValue, Vec<f64>)> {
    same_len(s.len(), g.len(), "l1")?;
    same_len(s.len(), labels.len(), "l1 trimap")?;
    let count = labels.iter().filter(|&&l| l != TRIMAP_UNCERTAIN).count();
    let mut grad = vec![0.0; s.len()];
    if count == 0 {
        return Ok((LossValue::zero(), grad));
    }
    let e = count as f64;
    let mut total = 0.0;
    for i in 0..s.len() {
        if labels[i] == TRIMAP_UNCERTAIN {
            continue;
        }
        let d = s[i] - g[i];
        total += d.abs();
        grad[i] = if d > 0.0 {
            1.0 / e
        } else if d < 0.0 {
            -1.0 / e
        } else {
            0.0
        };
    }
    Ok((LossValue::new(total / e, count), grad))
}

pub fn l1_definite_loss(s: &SaliencyMap, g: &BinaryMask, t: &Trimap) -> Result<LossValue> {
    check_dims(s.dims(), g.dims(), "l1")?;
    check_dims(s.dims(), t.dims(), "l1 trimap")?;
    Ok(l1_definite_grad(s.as_slice(), g.to_saliency().as_slice(), t.as_slice())?.0)
}

/// Gaussian negative log-likelihood over uncertain pixels, parameterized by
/// the log-variance: `mean(0.5 * r * exp(-s) + 0.5 * s)` with `r = (S - G)^2`.
///
/// Returns the value and the gradients with respect to the prediction and
/// the log-variance.
pub fn uncertainty_grad(
    s: &[f64],
    g: &[f64],
    logvar: &[f64],
    labels: &[u8],
) -> Result<(LossValue, Vec<f64>, Vec<f64>)> {
    same_len(s.len(), g.len(), "uncertainty")?;
    same_len(s.len(), logvar.len(), "uncertainty logvar")?;
    same_len(s.len(), labels.len(), "uncertainty trimap")?;
    if logvar.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("log-variance".into()));
    }
    let count = labels.iter().filter(|&&l| l == TRIMAP_UNCERTAIN).count();
    let mut gs = vec![0.0; s.len()];
    let mut glv = vec![0.0; s.len()];
    if count == 0 {
        return Ok((LossValue::zero(), gs, glv));
    }
    let u = count as f64;
    let mut total = 0.0;
    for i in 0..s.len() {
        if labels[i] != TRIMAP_UNCERTAIN {
            continue;
        }
        let d = s[i] - g[i];
        let inv_var = (-logvar[i]).exp();
        total += 0.5 * d * d * inv_var + 0.5 * logvar[i];
        gs[i] = d * inv_var / u;
        glv[i] = (0.5 - 0.5 * d * d * inv_var) / u;
    }
    Ok((LossValue::new(total / u, count), gs, glv))
}

pub fn uncertainty_loss(s: &SaliencyMap, g: &BinaryMask, logvar: &UncertaintyMap, t: &Trimap) -> Result<LossValue> {
    check_dims(s.dims(), g.dims(), "uncertainty")?;
    check_dims(s.dims(), logvar.dims(), "uncertainty logvar")?;
    check_dims(s.dims(), t.dims(), "uncertainty trimap")?;
    Ok(uncertainty_grad(s.as_slice(), g.to_saliency().as_slice(), logvar.as_slice(), t.as_slice())?.0)
}

pub fn hrrn_loss(s: &SaliencyMap, g: &BinaryMask, logvar: &UncertaintyMap, t: &Trimap) -> Result<LossValue> {
    Ok(uncertainty_loss(s, g, logvar, t)? + l1_definite_loss(s, g, t)?)
}

// ---------------------------------------------------------------------------
// Gradient checking

/// Compares an analytic gradient against central differences and returns
/// the largest relative error `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn grad_check<F>(loss_fn: F, inputs: &[f64], epsilon: f64) -> Result<f64>
where
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    if !(1e-6..=1e-3).contains(&epsilon) {
        return Err(Error::param(format!("epsilon {epsilon} outside [1e-6, 1e-3]")));
    }
    let (value, analytic) = loss_fn(inputs)?;
    if !value.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    same_len(analytic.len(), inputs.len(), "gradient")?;
    let mut x = inputs.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + epsilon;
        let (fp, _) = loss_fn(&x)?;
        x[i] = orig - epsilon;
        let (fm, _) = loss_fn(&x)?;
        x[i] = orig;
        if !(fp.is_finite() && fm.is_finite()) {
            return Err(Error::NonFinite("loss during finite differences".into()));
        }
        let numeric = (fp - fm) / (2.0 * epsilon);
        let a = analytic[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}
