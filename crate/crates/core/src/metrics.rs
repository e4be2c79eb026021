//! Evaluation metrics: MAE, precision-recall and F-measure, boundary
//! displacement error and the Canny-based edge misalignment score.

use std::collections::VecDeque;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datamodel::{load_mask, load_saliency, png_stems};
use crate::error::{Error, Result};
use crate::losses::BETA_SQ;
use crate::raster::{BinaryMask, SaliencyMap};

/// Number of PR thresholds `k / 255`.
pub const PR_LEVELS: usize = 256;
pub const ADAPTIVE_CAP: f64 = 1.0 - 1e-6;
pub const BDE_THRESHOLD: f64 = 0.5;

/// Binary edge raster.
pub type EdgeMap = BinaryMask;

fn check_dims(a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a != b {
        return Err(Error::shape(format!("prediction {a:?} vs ground truth {b:?}")));
    }
    Ok(())
}

pub fn mae(s: &SaliencyMap, g: &BinaryMask) -> Result<f64> {
    check_dims(s.dims(), g.dims())?;
    let sum: f64 = s
        .as_slice()
        .iter()
        .zip(g.as_slice())
        .map(|(&a, &b)| (a - b as f64).abs())
        .sum();
    Ok(sum / s.len() as f64)
}

/// F-measure from precision and recall; 0 when both vanish.
pub fn f_from_pr(precision: f64, recall: f64) -> f64 {
    let den = BETA_SQ * precision + recall;
    if den == 0.0 {
        0.0
    } else {
        (1.0 + BETA_SQ) * precision * recall / den
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub thresholds: Vec<f64>,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
}

impl PrCurve {
    pub fn f_measures(&self) -> Vec<f64> {
        self.precision.iter().zip(&self.recall).map(|(&p, &r)| f_from_pr(p, r)).collect()
    }

    /// Threshold-wise mean of several curves.
    pub fn mean(curves: &[PrCurve]) -> Option<PrCurve> {
        let first = curves.first()?;
        let n = curves.len() as f64;
        let avg = |f: fn(&PrCurve) -> &Vec<f64>| -> Vec<f64> {
            (0..PR_LEVELS)
                .map(|k| curves.iter().map(|c| f(c)[k]).sum::<f64>() / n)
                .collect()
        };
        Some(PrCurve {
            thresholds: first.thresholds.clone(),
            precision: avg(|c| &c.precision),
            recall: avg(|c| &c.recall),
        })
    }
}

/// Largest `k` with `k / 255 <= v`, or `None` when `v < 0`.
fn threshold_level(v: f64) -> Option<usize> {
    if v < 0.0 {
        return None;
    }
    let mut k = ((v * 255.0).floor() as usize).min(PR_LEVELS - 1);
    while k > 0 && k as f64 / 255.0 > v {
        k -= 1;
    }
    while k + 1 < PR_LEVELS && (k + 1) as f64 / 255.0 <= v {
        k += 1;
    }
    Some(k)
}

pub fn pr_curve(s: &SaliencyMap, g: &BinaryMask) -> Result<PrCurve> {
    check_dims(s.dims(), g.dims())?;
    let positives = g.count_ones();
    if positives == 0 {
        return Err(Error::param("ground truth has no salient pixel"));
    }
    // hist[k]: pixels whose highest passed threshold is k
    let mut hist_tp = [0usize; PR_LEVELS];
    let mut hist_all = [0usize; PR_LEVELS];
    for (&v, &m) in s.as_slice().iter().zip(g.as_slice()) {
        if let Some(k) = threshold_level(v) {
            hist_all[k] += 1;
            hist_tp[k] += m as usize;
        }
    }
    let mut precision = vec![0.0; PR_LEVELS];
    let mut recall = vec![0.0; PR_LEVELS];
    let (mut tp, mut pred) = (0usize, 0usize);
    for k in (0..PR_LEVELS).rev() {
        tp += hist_tp[k];
        pred += hist_all[k];
        precision[k] = if pred == 0 { 1.0 } else { tp as f64 / pred as f64 };
        recall[k] = tp as f64 / positives as f64;
    }
    Ok(PrCurve {
        thresholds: (0..PR_LEVELS).map(|k| k as f64 / 255.0).collect(),
        precision,
        recall,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FMode {
    /// Threshold at `min(2 * mean(s), 1 - 1e-6)`.
    Adaptive,
    /// Best F over the PR thresholds.
    Max,
}

/// F-measure of `s >= threshold` against `g`.
pub fn f_at_threshold(s: &SaliencyMap, g: &BinaryMask, threshold: f64) -> Result<f64> {
    check_dims(s.dims(), g.dims())?;
    let positives = g.count_ones();
    if positives == 0 {
        return Err(Error::param("ground truth has no salient pixel"));
    }
    let (mut tp, mut pred) = (0usize, 0usize);
    for (&v, &m) in s.as_slice().iter().zip(g.as_slice()) {
        if v >= threshold {
            pred += 1;
            tp += m as usize;
        }
    }
    let precision = if pred == 0 { 1.0 } else { tp as f64 / pred as f64 };
    Ok(f_from_pr(precision, tp as f64 / positives as f64))
}

pub fn f_beta(s: &SaliencyMap, g: &BinaryMask, mode: FMode) -> Result<f64> {
    match mode {
        FMode::Adaptive => f_at_threshold(s, g, (2.0 * s.mean()).min(ADAPTIVE_CAP)),
        FMode::Max => Ok(pr_curve(s, g)?.f_measures().into_iter().fold(0.0, f64::max)),
    }
}

// ---------------------------------------------------------------------------
// Boundary displacement error

/// Boundary pixels as `(x, y)` in row-major order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BoundarySet {
    pub points: Vec<(usize, usize)>,
}

impl BoundarySet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Foreground pixels with a background 4-neighbour; outside the raster
/// counts as background.
pub fn extract_boundary(mask: &BinaryMask) -> BoundarySet {
    let (h, w) = mask.dims();
    let on = |y: isize, x: isize| {
        y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && mask.get(y as usize, x as usize) == 1
    };
    let mut points = Vec::new();
    for y in 0..h as isize {
        for x in 0..w as isize {
            if on(y, x) && !(on(y - 1, x) && on(y + 1, x) && on(y, x - 1) && on(y, x + 1)) {
                points.push((x as usize, y as usize));
            }
        }
    }
    BoundarySet { points }
}

/// Exact squared Euclidean distance to the nearest seed, computed with the
/// separable lower-envelope transform.
fn squared_distance_field(h: usize, w: usize, seeds: &BoundarySet) -> Vec<f64> {
    const FAR: f64 = 1e18;
    let mut f = vec![FAR; h * w];
    for &(x, y) in &seeds.points {
        f[y * w + x] = 0.0;
    }
    let mut col = vec![0.0; h];
    for x in 0..w {
        for y in 0..h {
            col[y] = f[y * w + x];
        }
        let d = envelope_1d(&col);
        for y in 0..h {
            f[y * w + x] = d[y];
        }
    }
    for y in 0..h {
        let d = envelope_1d(&f[y * w..(y + 1) * w]);
        f[y * w..(y + 1) * w].copy_from_slice(&d);
    }
    f
}

fn envelope_1d(f: &[f64]) -> Vec<f64> {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0; n + 1];
    let mut k = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let inter = |q: usize, p: usize| {
        let (q2, p2) = ((q * q) as f64, (p * p) as f64);
        ((f[q] + q2) - (f[p] + p2)) / (2.0 * (q as f64 - p as f64))
    };
    for q in 1..n {
        let mut s = inter(q, v[k]);
        while s <= z[k] {
            k -= 1;
            s = inter(q, v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    let mut d = vec![0.0; n];
    k = 0;
    for (q, dq) in d.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let diff = q as f64 - v[k] as f64;
        *dq = diff * diff + f[v[k]];
    }
    d
}

fn mean_nearest(from: &BoundarySet, field: &[f64], w: usize) -> f64 {
    let sum: f64 = from.points.iter().map(|&(x, y)| field[y * w + x].sqrt()).sum();
    sum / from.len() as f64
}

/// Symmetric mean nearest-boundary distance, halved per direction.
pub fn bde(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    check_dims(pred.dims(), gt.dims())?;
    let bx = extract_boundary(pred);
    let by = extract_boundary(gt);
    if bx.is_empty() {
        return Err(Error::EmptyBoundary("prediction"));
    }
    if by.is_empty() {
        return Err(Error::EmptyBoundary("ground truth"));
    }
    let (h, w) = pred.dims();
    let to_y = squared_distance_field(h, w, &by);
    let to_x = squared_distance_field(h, w, &bx);
    Ok(mean_nearest(&bx, &to_y, w) / 2.0 + mean_nearest(&by, &to_x, w) / 2.0)
}

// ---------------------------------------------------------------------------
// Canny edges and B_mu

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CannyParams {
    pub sigma: f64,
    pub kernel: usize,
    /// Hysteresis thresholds relative to the maximum gradient magnitude.
    pub low: f64,
    pub high: f64,
}

impl Default for CannyParams {
    fn default() -> Self {
        Self {
            sigma: 1.4,
            kernel: 5,
            low: 0.1,
            high: 0.2,
        }
    }
}

fn clamp_idx(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

fn blur(src: &[f64], h: usize, w: usize, p: &CannyParams) -> Vec<f64> {
    let r = (p.kernel / 2) as isize;
    let mut k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * p.sigma * p.sigma)).exp()).collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(j, kv)| kv * src[y * w + clamp_idx(x as isize + j as isize - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(j, kv)| kv * tmp[clamp_idx(y as isize + j as isize - r, h) * w + x])
                .sum();
        }
    }
    out
}

/// Canny detector on a single-channel raster.
pub fn canny_edges_with(values: &[f64], h: usize, w: usize, p: &CannyParams) -> EdgeMap {
    let b = blur(values, h, w, p);
    let at = |y: isize, x: isize| b[clamp_idx(y, h) * w + clamp_idx(x, w)];
    let mut gx = vec![0.0; h * w];
    let mut gy = vec![0.0; h * w];
    let mut mag = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let i = y as usize * w + x as usize;
            gx[i] = (at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y, x - 1) + at(y + 1, x - 1));
            gy[i] = (at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y - 1, x) + at(y - 1, x + 1));
            mag[i] = gx[i].hypot(gy[i]);
        }
    }
    let max = mag.iter().cloned().fold(0.0, f64::max);
    let mut out = vec![0u8; h * w];
    if max <= 1e-12 {
        return BinaryMask::from_raw(h, w, out);
    }

    let m = |y: isize, x: isize| {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            mag[y as usize * w + x as usize]
        }
    };
    let mut thin = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let i = y as usize * w + x as usize;
            if mag[i] == 0.0 {
                continue;
            }
            let angle = gy[i].atan2(gx[i]).to_degrees().rem_euclid(180.0);
            let (dy, dx) = if !(22.5..157.5).contains(&angle) {
                (0, 1)
            } else if angle < 67.5 {
                (1, 1)
            } else if angle < 112.5 {
                (1, 0)
            } else {
                (1, -1)
            };
            // strict on one side so flat-topped ridges stay one pixel wide
            if mag[i] > m(y - dy, x - dx) && mag[i] >= m(y + dy, x + dx) {
                thin[i] = mag[i];
            }
        }
    }

    let (low, high) = (p.low * max, p.high * max);
    let mut queue = VecDeque::new();
    for (i, &v) in thin.iter().enumerate() {
        if v >= high {
            out[i] = 1;
            queue.push_back(i);
        }
    }
    while let Some(i) = queue.pop_front() {
        let (y, x) = ((i / w) as isize, (i % w) as isize);
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (ny, nx) = (y + dy, x + dx);
                if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if out[j] == 0 && thin[j] >= low {
                    out[j] = 1;
                    queue.push_back(j);
                }
            }
        }
    }
    BinaryMask::from_raw(h, w, out)
}

pub fn canny_edges(raster: &SaliencyMap) -> EdgeMap {
    canny_edges_with(raster.as_slice(), raster.height(), raster.width(), &CannyParams::default())
}

/// `1 - 2 Σ(a·b) / Σ(a² + b²)`, or 0 when both maps are empty.
pub fn b_mu_from_edges(a: &EdgeMap, b: &EdgeMap) -> Result<f64> {
    check_dims(a.dims(), b.dims())?;
    let (mut both, mut total) = (0usize, 0usize);
    for (&x, &y) in a.as_slice().iter().zip(b.as_slice()) {
        both += (x & y) as usize;
        total += x as usize + y as usize;
    }
    if total == 0 {
        return Ok(0.0);
    }
    Ok(1.0 - 2.0 * both as f64 / total as f64)
}

pub fn b_mu(s: &SaliencyMap, g: &BinaryMask) -> Result<f64> {
    check_dims(s.dims(), g.dims())?;
    b_mu_from_edges(&canny_edges(s), &canny_edges(&g.to_saliency()))
}

// ---------------------------------------------------------------------------
// Directory evaluation

pub const CSV_HEADER: [&str; 6] = ["id", "mae", "f_beta", "f_beta_max", "bde", "b_mu"];
pub const MEAN_ROW_ID: &str = "__mean__";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub id: String,
    pub mae: f64,
    pub f_beta: f64,
    pub f_beta_max: f64,
    /// Undefined when either boundary is empty.
    pub bde: Option<f64>,
    pub b_mu: f64,
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub rows: Vec<MetricRow>,
    pub mean: MetricRow,
    pub pr: PrCurve,
    pub unmatched: Vec<String>,
}

/// All metrics of one prediction; the prediction is resized to the mask
/// size when they differ.
pub fn evaluate_pair(id: &str, pred: &SaliencyMap, gt: &BinaryMask) -> Result<(MetricRow, PrCurve)> {
    let pred = if pred.dims() == gt.dims() {
        pred.clone()
    } else {
        pred.resize_bilinear(gt.height(), gt.width())
    };
    let bde = match bde(&pred.binarize(BDE_THRESHOLD), gt) {
        Ok(v) => Some(v),
        Err(Error::EmptyBoundary(side)) => {
            log::warn!("{id}: BDE undefined, {side} boundary is empty");
            None
        }
        Err(e) => return Err(e),
    };
    let pr = pr_curve(&pred, gt)?;
    let row = MetricRow {
        id: id.to_string(),
        mae: mae(&pred, gt)?,
        f_beta: f_beta(&pred, gt, FMode::Adaptive)?,
        f_beta_max: pr.f_measures().into_iter().fold(0.0, f64::max),
        bde,
        b_mu: b_mu(&pred, gt)?,
    };
    Ok((row, pr))
}

/// Column means; BDE averages only the rows where it is defined.
pub fn mean_row(rows: &[MetricRow]) -> MetricRow {
    let n = rows.len().max(1) as f64;
    let avg = |f: fn(&MetricRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
    let bdes: Vec<f64> = rows.iter().filter_map(|r| r.bde).collect();
    MetricRow {
        id: MEAN_ROW_ID.to_string(),
        mae: avg(|r| r.mae),
        f_beta: avg(|r| r.f_beta),
        f_beta_max: avg(|r| r.f_beta_max),
        bde: (!bdes.is_empty()).then(|| bdes.iter().sum::<f64>() / bdes.len() as f64),
        b_mu: avg(|r| r.b_mu),
    }
}

/// Pairs files by stem and evaluates them in parallel; rows are sorted by stem.
pub fn evaluate_directory(pred_dir: &Path, gt_dir: &Path) -> Result<EvalReport> {
    let preds = png_stems(pred_dir)?;
    let gts = png_stems(gt_dir)?;
    let matched: Vec<&String> = preds.iter().filter(|s| gts.binary_search(s).is_ok()).collect();
    let unmatched: Vec<String> = preds
        .iter()
        .chain(&gts)
        .filter(|s| preds.binary_search(s).is_err() || gts.binary_search(s).is_err())
        .cloned()
        .collect();
    for s in &unmatched {
        log::warn!("no counterpart for {s}; skipped");
    }
    if matched.is_empty() {
        return Err(Error::param(format!(
            "no matching file stems between {} and {}",
            pred_dir.display(),
            gt_dir.display()
        )));
    }
    let results: Vec<(MetricRow, PrCurve)> = matched
        .par_iter()
        .map(|stem| {
            let pred = load_saliency(pred_dir.join(format!("{stem}.png")))?;
            let gt = load_mask(gt_dir.join(format!("{stem}.png")))?;
            evaluate_pair(stem, &pred, &gt)
        })
        .collect::<Result<_>>()?;
    let (rows, curves): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    Ok(EvalReport {
        mean: mean_row(&rows),
        pr: PrCurve::mean(&curves).expect("at least one curve"),
        rows,
        unmatched,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl EvalReport {
    /// Per-image rows followed by the mean row.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        w.write_record(CSV_HEADER).map_err(csv_err)?;
        for r in self.rows.iter().chain(std::iter::once(&self.mean)) {
            w.write_record([
                r.id.clone(),
                r.mae.to_string(),
                r.f_beta.to_string(),
                r.f_beta_max.to_string(),
                fmt_opt(r.bde),
                r.b_mu.to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for r in self.rows.iter().chain(std::iter::once(&self.mean)) {
            serde_json::to_writer(&mut w, r).map_err(|e| Error::Io(e.into()))?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_pr_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        w.write_record(["threshold", "precision", "recall"]).map_err(csv_err)?;
        for k in 0..PR_LEVELS {
            w.write_record([
                self.pr.thresholds[k].to_string(),
                self.pr.precision[k].to_string(),
                self.pr.recall[k].to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn half_mask(h: usize, w: usize) -> BinaryMask {
        BinaryMask::from_fn(h, w, |_, x| x < w / 2)
    }

    #[test]
    fn mae_cases() {
        let g = half_mask(4, 4);
        assert_eq!(mae(&g.to_saliency(), &g).unwrap(), 0.0);
        assert_eq!(mae(&SaliencyMap::constant(4, 4, 0.5), &g).unwrap(), 0.5);
        assert!((mae(&SaliencyMap::constant(4, 4, 0.2), &g).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn pr_curve_cases() {
        let g = half_mask(6, 6);
        let pr = pr_curve(&g.to_saliency(), &g).unwrap();
        for k in 1..PR_LEVELS {
            assert_eq!((pr.precision[k], pr.recall[k]), (1.0, 1.0));
        }
        let ones = pr_curve(&SaliencyMap::constant(6, 6, 1.0), &g).unwrap();
        assert!(ones.recall.iter().all(|&r| r == 1.0));
        assert!(ones.precision.iter().all(|&p| p == 0.5));
        assert!(pr_curve(&SaliencyMap::constant(6, 6, 1.0), &BinaryMask::zeros(6, 6)).is_err());
    }

    #[test]
    fn threshold_levels_are_exact() {
        for k in 0..PR_LEVELS {
            let t = k as f64 / 255.0;
            assert_eq!(threshold_level(t), Some(k));
        }
        assert_eq!(threshold_level(-0.1), None);
        assert_eq!(threshold_level(2.0), Some(255));
    }

    #[test]
    fn f_beta_cases() {
        let g = half_mask(4, 4);
        assert_eq!(f_beta(&g.to_saliency(), &g, FMode::Adaptive).unwrap(), 1.0);
        assert_eq!(f_beta(&g.to_saliency(), &g, FMode::Max).unwrap(), 1.0);
        let f = f_beta(&SaliencyMap::constant(4, 4, 1.0), &g, FMode::Adaptive).unwrap();
        assert!((f - 0.65 / 1.15).abs() < 1e-12);
    }

    #[test]
    fn boundary_of_square() {
        let sq = BinaryMask::from_fn(9, 9, |y, x| (2..7).contains(&y) && (2..7).contains(&x));
        assert_eq!(extract_boundary(&sq).len(), 16);
        let dot = BinaryMask::from_fn(5, 5, |y, x| y == 1 && x == 3);
        assert_eq!(extract_boundary(&dot).points, vec![(3, 1)]);
        assert!(extract_boundary(&BinaryMask::zeros(5, 5)).is_empty());
        // edge-touching foreground is boundary because outside counts as 0
        assert_eq!(extract_boundary(&BinaryMask::ones(3, 3)).len(), 8);
    }

    #[test]
    fn bde_cases() {
        let a = BinaryMask::from_fn(10, 10, |y, x| y == 1 && x == 1);
        let b = BinaryMask::from_fn(10, 10, |y, x| y == 5 && x == 4);
        assert!((bde(&a, &b).unwrap() - 5.0).abs() < 1e-12);
        assert_eq!(bde(&a, &a).unwrap(), 0.0);
        assert!(matches!(bde(&a, &BinaryMask::zeros(10, 10)), Err(Error::EmptyBoundary(_))));
    }

    #[test]
    fn canny_cases() {
        assert_eq!(canny_edges(&SaliencyMap::constant(16, 16, 0.3)).count_ones(), 0);
        let step = SaliencyMap::from_fn(20, 20, |_, x| if x < 10 { 0.0 } else { 1.0 });
        let e = canny_edges(&step);
        assert!(e.count_ones() >= 20);
        for y in 0..20 {
            for x in 0..20 {
                if e.get(y, x) == 1 {
                    assert!((9..=10).contains(&x), "edge at column {x}");
                }
            }
        }
    }

    #[test]
    fn b_mu_cases() {
        let mk = |idx: &[usize]| BinaryMask::from_fn(5, 5, |y, x| idx.contains(&(y * 5 + x)));
        let a = mk(&[0, 1, 2, 3, 4, 5, 6, 7, 8, 9]);
        let b = mk(&[5, 6, 7, 8, 9, 10, 11, 12, 13, 14]);
        assert_eq!(b_mu_from_edges(&a, &b).unwrap(), 0.5);
        assert_eq!(b_mu_from_edges(&a, &a).unwrap(), 0.0);
        assert_eq!(b_mu_from_edges(&a, &mk(&[20])).unwrap(), 1.0);
        let z = BinaryMask::zeros(5, 5);
        assert_eq!(b_mu_from_edges(&z, &z).unwrap(), 0.0);
    }
}
