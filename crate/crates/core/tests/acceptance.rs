//! Acceptance suite. Prints one PASS/FAIL line per criterion and fails if
//! any criterion fails. Criterion 8 takes hours on a CPU and only runs when
//! `DISENT_SOD_SLOW=1`; otherwise its line reads SKIP.

use std::time::Instant;

use disent_sod::config::{Stage, TrainConfig};
use disent_sod::datamodel::{gen_synthetic_scene, synthesize_dataset, DatasetRecord};
use disent_sod::hrrn::{Hrrn, HrrnConfig};
use disent_sod::losses::*;
use disent_sod::lrscn::{Lrscn, LrscnConfig};
use disent_sod::metrics::{b_mu_from_edges, bde, extract_boundary, f_beta, f_from_pr, FMode};
use disent_sod::raster::{TRIMAP_BACKGROUND, TRIMAP_SALIENT, TRIMAP_UNCERTAIN};
use disent_sod::tiling::{prepare, run_pipeline, stitch, TileLayout, TILE_COUNT};
use disent_sod::training::{ablate_noise_with, evaluate_models, train_hrrn, train_lrscn, AblationConfig, Arm};
use disent_sod::trimap::trimap_from_mask;
use disent_sod::{BinaryMask, Image, SaliencyMap, Trimap, UncertaintyMap};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn close(what: &str, got: f64, want: f64, tol: f64) -> Result<(), String> {
    ensure((got - want).abs() <= tol, || format!("{what}: got {got}, want {want} +- {tol}"))
}

fn e<E: std::fmt::Display>(err: E) -> String {
    err.to_string()
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_saliency(r: &mut ChaCha8Rng, h: usize, w: usize) -> SaliencyMap {
    SaliencyMap::new(h, w, (0..h * w).map(|_| r.gen_range(0.05..0.95)).collect()).unwrap()
}

fn random_mask(r: &mut ChaCha8Rng, h: usize, w: usize, density: f64) -> BinaryMask {
    BinaryMask::new(h, w, (0..h * w).map(|_| r.gen_bool(density) as u8).collect()).unwrap()
}

// ---------------------------------------------------------------------------
// 1. losses

/// Central-difference check of an analytic gradient.
fn fd_check(what: &str, x: &[f64], analytic: &[f64], f: impl Fn(&[f64]) -> f64) -> Result<f64, String> {
    const H: f64 = 1e-6;
    let mut worst = 0.0f64;
    let mut p = x.to_vec();
    for i in 0..x.len() {
        p[i] = x[i] + H;
        let up = f(&p);
        p[i] = x[i] - H;
        let down = f(&p);
        p[i] = x[i];
        let num = (up - down) / (2.0 * H);
        let a = analytic[i];
        worst = worst.max((a - num).abs() / a.abs().max(num.abs()).max(1e-8));
    }
    ensure(worst < 1e-4, || format!("{what}: gradient relative error {worst:e}"))?;
    Ok(worst)
}

/// Windowed SSIM written out per window with two-pass statistics.
fn ssim_oracle(s: &[f64], g: &[f64], h: usize, w: usize, k: usize, stride: usize, c1: f64, c2: f64) -> f64 {
    let mut vals = Vec::new();
    let mut y0 = 0;
    while y0 + k <= h {
        let mut x0 = 0;
        while x0 + k <= w {
            let idx: Vec<usize> = (y0..y0 + k).flat_map(|y| (x0..x0 + k).map(move |x| y * w + x)).collect();
            let n = idx.len() as f64;
            let ms = idx.iter().map(|&i| s[i]).sum::<f64>() / n;
            let mg = idx.iter().map(|&i| g[i]).sum::<f64>() / n;
            let vs = idx.iter().map(|&i| (s[i] - ms).powi(2)).sum::<f64>() / n;
            let vg = idx.iter().map(|&i| (g[i] - mg).powi(2)).sum::<f64>() / n;
            let cv = idx.iter().map(|&i| (s[i] - ms) * (g[i] - mg)).sum::<f64>() / n;
            vals.push((2.0 * ms * mg + c1) * (2.0 * cv + c2) / ((ms * ms + mg * mg + c1) * (vs + vg + c2)));
            x0 += stride;
        }
        y0 += stride;
    }
    1.0 - vals.iter().sum::<f64>() / vals.len() as f64
}

fn criterion_1() -> Outcome {
    let ln2 = std::f64::consts::LN_2;
    let mut r = rng(1);
    let g = random_mask(&mut r, 12, 12, 0.5);
    let gs = g.to_saliency();
    let uniform = SaliencyMap::constant(12, 12, 0.5);

    close("bce s=g", bce_pixel_loss(&gs, &g).map_err(e)?.value, 0.0, 1.1e-7)?;
    close("bce 0.5", bce_pixel_loss(&uniform, &g).map_err(e)?.value, ln2, 1e-12)?;
    let one = BinaryMask::ones(1, 1);
    close("bce 0.9", bce_pixel_loss(&SaliencyMap::constant(1, 1, 0.9), &one).map_err(e)?.value, -(0.9f64.ln()), 1e-12)?;

    let cfg = SsimConfig::default();
    let tex = BinaryMask::from_fn(22, 22, |y, x| (x * 7 + y * 3) % 5 < 2);
    close("ssim s=g", ssim_region_loss(&tex.to_saliency(), &tex, &cfg).map_err(e)?.value, 0.0, 1e-12)?;
    let zeros = SaliencyMap::constant(22, 22, 0.0);
    let c1 = cfg.c1;
    close("ssim 0 vs 1", ssim_region_loss(&zeros, &BinaryMask::ones(22, 22), &cfg).map_err(e)?.value, 1.0 - c1 / (1.0 + c1), 1e-12)?;
    let win8 = SsimConfig { window: 8, stride: 8, ..cfg };
    for t in 0..5 {
        let s = random_saliency(&mut r, 16, 16);
        let gg = random_mask(&mut r, 16, 16, 0.4).to_saliency();
        let got = ssim_region_grad(s.as_slice(), gg.as_slice(), 16, 16, &win8).map_err(e)?.0.value;
        let want = ssim_oracle(s.as_slice(), gg.as_slice(), 16, 16, 8, 8, cfg.c1, cfg.c2);
        close(&format!("ssim oracle #{t}"), got, want, 1e-10)?;
    }

    close("fmeasure s=g", fmeasure_loss(&gs, &g).map_err(e)?.value, 0.0, 1e-6)?;
    let half = BinaryMask::from_fn(4, 4, |_, x| x < 2);
    close(
        "fmeasure half",
        fmeasure_loss(&SaliencyMap::constant(4, 4, 1.0), &half).map_err(e)?.value,
        1.0 - 0.65 / 1.15,
        1e-6,
    )?;
    close("fmeasure zero", fmeasure_loss(&SaliencyMap::constant(4, 4, 0.0), &half).map_err(e)?.value, 1.0, 1e-6)?;

    let big = BinaryMask::from_fn(24, 24, |y, x| (4..18).contains(&y) && (6..20).contains(&x));
    let bs = big.to_saliency();
    close("saliency s=g", saliency_loss(&[(bs.clone(), big.clone())]).map_err(e)?.value, 0.0, 1e-6)?;
    let p = random_saliency(&mut r, 24, 24);
    let single = saliency_loss(&[(p.clone(), big.clone())]).map_err(e)?.value;
    let two = saliency_loss(&[(p.clone(), big.clone()), (p.clone(), big.clone())]).map_err(e)?.value;
    close("two identical levels", two, 1.5 * single, 1e-12)?;
    let levels: Vec<(SaliencyMap, BinaryMask)> =
        (0..4).map(|i| (random_saliency(&mut r, 24 >> i, 24 >> i), big.clone())).collect();
    let per: Vec<f64> = levels.iter().map(|l| saliency_loss(std::slice::from_ref(l)).unwrap().value).collect();
    close(
        "four levels",
        saliency_loss(&levels).map_err(e)?.value,
        per[0] + per[1] / 2.0 + per[2] / 4.0 + per[3] / 8.0,
        1e-12,
    )?;

    let t = Trimap::new(2, 2, vec![0, 1, 2, 1]).unwrap();
    close("ce uniform", trimap_ce_loss(&[0.0; 12], &t).map_err(e)?.value, 3f64.ln(), 1e-12)?;
    let mut sat = vec![0.0; 12];
    for (i, &l) in t.as_slice().iter().enumerate() {
        sat[l as usize * 4 + i] = 20.0;
    }
    ensure(trimap_ce_loss(&sat, &t).map_err(e)?.value <= 1e-8, || "ce saturated".into())?;
    let t1 = Trimap::new(1, 1, vec![2]).unwrap();
    close("ce (0,0,ln2)", trimap_ce_loss(&[0.0, 0.0, ln2], &t1).map_err(e)?.value, ln2, 1e-12)?;

    let t_unc = Trimap::filled(12, 12, TRIMAP_UNCERTAIN);
    let t_def = Trimap::filled(12, 12, TRIMAP_SALIENT);
    close("l1 s=g", l1_definite_loss(&gs, &g, &t_def).map_err(e)?.value, 0.0, 0.0)?;
    let l = l1_definite_loss(&p.resize_bilinear(12, 12), &g, &t_unc).map_err(e)?;
    ensure(l.value == 0.0 && l.pixel_count == 0, || "l1 all-uncertain".into())?;
    let s2 = SaliencyMap::new(1, 3, vec![0.2, 0.6, 0.9]).unwrap();
    let g2 = BinaryMask::new(1, 3, vec![0, 1, 0]).unwrap();
    let t2 = Trimap::new(1, 3, vec![0, 2, 1]).unwrap();
    close("l1 two pixels", l1_definite_loss(&s2, &g2, &t2).map_err(e)?.value, 0.3, 1e-12)?;

    let q = random_saliency(&mut r, 12, 12);
    let mean_r = q.as_slice().iter().zip(gs.as_slice()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / 144.0;
    let lv0 = UncertaintyMap::constant(12, 12, 0.0);
    close("unc logvar 0", uncertainty_loss(&q, &g, &lv0, &t_unc).map_err(e)?.value, 0.5 * mean_r, 1e-12)?;
    let re = std::f64::consts::E.sqrt();
    // squared residual e with log-variance 1; the raw form takes any residual
    let got = uncertainty_grad(&[re], &[0.0], &[1.0], &[TRIMAP_UNCERTAIN]).map_err(e)?.0.value;
    close("unc r=e", got, 1.0, 1e-12)?;

    close("hrrn s=g", hrrn_loss(&gs, &g, &lv0, &t_unc).map_err(e)?.value, 0.0, 0.0)?;
    close(
        "hrrn all definite",
        hrrn_loss(&q, &g, &lv0, &t_def).map_err(e)?.value,
        l1_definite_loss(&q, &g, &t_def).map_err(e)?.value,
        0.0,
    )?;
    close(
        "hrrn all uncertain",
        hrrn_loss(&q, &g, &lv0, &t_unc).map_err(e)?.value,
        uncertainty_loss(&q, &g, &lv0, &t_unc).map_err(e)?.value,
        0.0,
    )?;
    let t24 = Trimap::filled(24, 24, TRIMAP_BACKGROUND);
    close(
        "lrscn perfect + uniform",
        lrscn_loss(&[(bs.clone(), big.clone())], &vec![0.0; 3 * 576], &t24).map_err(e)?.value,
        3f64.ln(),
        1e-6,
    )?;

    // gradients on random 8x8 to 16x16 inputs
    let mut worst = 0.0f64;
    let mut checks = 0;
    for trial in 0..6u64 {
        let mut r = rng(100 + trial);
        let (h, w) = (r.gen_range(8..=16), r.gen_range(8..=16));
        let n = h * w;
        let s = random_saliency(&mut r, h, w).into_vec();
        let gm = random_mask(&mut r, h, w, 0.4).to_saliency().into_vec();
        let labels: Vec<u8> = (0..n).map(|_| r.gen_range(0..3u8)).collect();
        let lv: Vec<f64> = (0..n).map(|_| r.gen_range(-2.0..2.0)).collect();
        let logits: Vec<f64> = (0..3 * n).map(|_| r.gen_range(-3.0..3.0)).collect();
        let ssim = SsimConfig { window: 7, stride: 4, ..SsimConfig::default() };

        let mut run = |name: &str, x: &[f64], a: Vec<f64>, f: &dyn Fn(&[f64]) -> f64| -> Result<(), String> {
            worst = worst.max(fd_check(&format!("{name} {h}x{w}"), x, &a, f)?);
            checks += 1;
            Ok(())
        };
        run("bce", &s, bce_pixel_grad(&s, &gm).unwrap().1, &|x| bce_pixel_grad(x, &gm).unwrap().0.value)?;
        run("ssim", &s, ssim_region_grad(&s, &gm, h, w, &ssim).unwrap().1, &|x| {
            ssim_region_grad(x, &gm, h, w, &ssim).unwrap().0.value
        })?;
        run("fmeasure", &s, fmeasure_grad(&s, &gm).unwrap().1, &|x| fmeasure_grad(x, &gm).unwrap().0.value)?;
        run("level", &s, level_loss_grad(&s, &gm, h, w, &ssim).unwrap().1, &|x| {
            level_loss_grad(x, &gm, h, w, &ssim).unwrap().0.value
        })?;
        run("trimap ce", &logits, trimap_ce_grad(&logits, &labels).unwrap().1, &|x| {
            trimap_ce_grad(x, &labels).unwrap().0.value
        })?;
        run("l1", &s, l1_definite_grad(&s, &gm, &labels).unwrap().1, &|x| {
            l1_definite_grad(x, &gm, &labels).unwrap().0.value
        })?;
        let (_, gs_u, glv_u) = uncertainty_grad(&s, &gm, &lv, &labels).unwrap();
        run("uncertainty/s", &s, gs_u, &|x| uncertainty_grad(x, &gm, &lv, &labels).unwrap().0.value)?;
        run("uncertainty/logvar", &lv, glv_u, &|x| uncertainty_grad(&s, &gm, x, &labels).unwrap().0.value)?;
        let mask = BinaryMask::new(h, w, gm.iter().map(|&v| v as u8).collect()).unwrap();
        let sm = SaliencyMap::new(h, w, s.clone()).unwrap();
        let coarse = sm.resize_bilinear(h / 2, w / 2);
        let multi = |fine: &[f64]| {
            let levels = vec![
                (SaliencyMap::new(h, w, fine.to_vec()).unwrap(), mask.clone()),
                (coarse.clone(), mask.clone()),
            ];
            saliency_loss_grad(&levels, &SsimConfig::default().fitted_to(h / 2, w / 2)).unwrap()
        };
        run("saliency", &s, multi(&s).1[0].clone(), &|x| multi(x).0.value)?;
    }
    Ok(format!("analytic examples hold; {checks} gradient checks, worst relative error {worst:.1e}"))
}

// ---------------------------------------------------------------------------
// 2. stationarity

fn criterion_2() -> Outcome {
    let mut details = Vec::new();
    for r in [0.01f64, 0.25, 1.0] {
        let d = r.sqrt();
        let loss = |lv: f64| uncertainty_grad(&[d], &[0.0], &[lv], &[TRIMAP_UNCERTAIN]).unwrap();
        let (mut best, mut best_v) = (f64::NAN, f64::INFINITY);
        let mut k = -10_000i64;
        while k <= 5_000 {
            let lv = k as f64 * 1e-3;
            let v = loss(lv).0.value;
            if v < best_v {
                best_v = v;
                best = lv;
            }
            k += 1;
        }
        close(&format!("argmin for r={r}"), best, r.ln(), 2e-3)?;
        let deriv = loss(r.ln()).2[0];
        ensure(deriv.abs() <= 1e-8, || format!("derivative {deriv:e} at ln r for r={r}"))?;
        close(&format!("minimum value for r={r}"), loss(r.ln()).0.value, 0.5 + 0.5 * r.ln(), 1e-12)?;
        details.push(format!("r={r}: argmin {best:.3}"));
    }
    Ok(details.join(", "))
}

// ---------------------------------------------------------------------------
// 3. trimap invariants

fn morph_oracle(m: &BinaryMask, k: usize, erode: bool) -> Vec<u8> {
    let (h, w) = m.dims();
    let r = (k / 2) as isize;
    let mut out = vec![0u8; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut acc = erode;
            for dy in -r..=r {
                for dx in -r..=r {
                    let yy = (y + dy).clamp(0, h as isize - 1) as usize;
                    let xx = (x + dx).clamp(0, w as isize - 1) as usize;
                    let v = m.get(yy, xx) == 1;
                    acc = if erode { acc && v } else { acc || v };
                }
            }
            out[y as usize * w + x as usize] = acc as u8;
        }
    }
    out
}

fn criterion_3() -> Outcome {
    const KERNELS: [usize; 5] = [5, 7, 9, 11, 13];
    let mut r = rng(3);
    let mut band_pixels = 0usize;
    for i in 0..500u64 {
        let size = r.gen_range(32..=64);
        let (_, mask) = gen_synthetic_scene(1000 + i, size, 1 + (i % 3) as usize).map_err(e)?;
        let (h, w) = mask.dims();
        let boundary: Vec<usize> = (0..h)
            .flat_map(|y| (0..w).map(move |x| (y, x)))
            .filter(|&(y, x)| {
                mask.get(y, x) == 1
                    && [(0isize, 1isize), (0, -1), (1, 0), (-1, 0)].iter().any(|&(dy, dx)| {
                        let (yy, xx) = (y as isize + dy, x as isize + dx);
                        yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w && mask.get(yy as usize, xx as usize) == 0
                    })
            })
            .map(|(y, x)| y * w + x)
            .collect();
        let mut prev_band: Option<Vec<bool>> = None;
        for k in KERNELS {
            let t = trimap_from_mask(&mask, k).map_err(e)?;
            let labels = t.as_slice();
            let hist = t.histogram();
            ensure(hist.iter().sum::<usize>() == h * w, || format!("mask {i} k={k}: labels do not partition"))?;
            for &b in &boundary {
                ensure(labels[b] == TRIMAP_UNCERTAIN, || format!("mask {i} k={k}: boundary pixel {b} not uncertain"))?;
            }
            for (j, &l) in labels.iter().enumerate() {
                let m = mask.as_slice()[j];
                ensure(!(l == TRIMAP_SALIENT && m == 0), || format!("mask {i} k={k}: label 2 outside mask"))?;
                ensure(!(l == TRIMAP_BACKGROUND && m == 1), || format!("mask {i} k={k}: label 0 inside mask"))?;
            }
            let band: Vec<bool> = labels.iter().map(|&l| l == TRIMAP_UNCERTAIN).collect();
            if let Some(p) = &prev_band {
                ensure(p.iter().zip(&band).all(|(&a, &b)| !a || b), || format!("mask {i}: band shrank at k={k}"))?;
            }
            if i < 40 {
                let er = morph_oracle(&mask, k, true);
                let di = morph_oracle(&mask, k, false);
                for j in 0..h * w {
                    let want = match (er[j], di[j]) {
                        (1, _) => TRIMAP_SALIENT,
                        (_, 0) => TRIMAP_BACKGROUND,
                        _ => TRIMAP_UNCERTAIN,
                    };
                    ensure(labels[j] == want, || format!("mask {i} k={k}: morphology oracle differs at {j}"))?;
                }
            }
            band_pixels += hist[1];
            prev_band = Some(band);
        }
    }
    Ok(format!("500 masks x 5 kernels, {band_pixels} band pixels checked; 40 masks match a brute-force morphology oracle"))
}

// ---------------------------------------------------------------------------
// 4. metric oracles

fn boundary_oracle(m: &BinaryMask) -> Vec<(usize, usize)> {
    let (h, w) = m.dims();
    let get = |y: isize, x: isize| -> u8 {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0
        } else {
            m.get(y as usize, x as usize)
        }
    };
    let mut out = Vec::new();
    for y in 0..h as isize {
        for x in 0..w as isize {
            if get(y, x) == 1 && (get(y - 1, x) == 0 || get(y + 1, x) == 0 || get(y, x - 1) == 0 || get(y, x + 1) == 0) {
                out.push((x as usize, y as usize));
            }
        }
    }
    out
}

fn bde_oracle(a: &[(usize, usize)], b: &[(usize, usize)]) -> f64 {
    let dir = |from: &[(usize, usize)], to: &[(usize, usize)]| {
        let sum: f64 = from
            .iter()
            .map(|&(x1, y1)| {
                to.iter()
                    .map(|&(x2, y2)| {
                        let (dx, dy) = (x1 as f64 - x2 as f64, y1 as f64 - y2 as f64);
                        (dx * dx + dy * dy).sqrt()
                    })
                    .fold(f64::INFINITY, f64::min)
            })
            .sum();
        sum / from.len() as f64
    };
    dir(a, b) / 2.0 + dir(b, a) / 2.0
}

fn criterion_4() -> Outcome {
    let mut r = rng(4);
    let mut pairs = 0;
    while pairs < 200 {
        let (h, w) = (r.gen_range(1..=16), r.gen_range(1..=16));
        let da = r.gen_range(0.1..0.9);
        let db = r.gen_range(0.1..0.9);
        let (a, b) = (random_mask(&mut r, h, w, da), random_mask(&mut r, h, w, db));
        let (oa, ob) = (boundary_oracle(&a), boundary_oracle(&b));
        ensure(extract_boundary(&a).points == oa, || format!("boundary differs on pair {pairs}"))?;
        ensure(extract_boundary(&b).points == ob, || format!("boundary differs on pair {pairs}"))?;
        if oa.is_empty() || ob.is_empty() {
            ensure(bde(&a, &b).is_err(), || "empty boundary must be an error".into())?;
            continue;
        }
        let (got, want) = (bde(&a, &b).map_err(e)?, bde_oracle(&oa, &ob));
        ensure(got == want, || format!("bde {got} != oracle {want} on {h}x{w} pair {pairs}"))?;
        ensure(bde(&b, &a).map_err(e)? == got, || "bde not symmetric".into())?;
        pairs += 1;
    }

    let edges = |idx: &[usize]| BinaryMask::from_fn(8, 8, |y, x| idx.contains(&(y * 8 + x)));
    let a: Vec<usize> = (0..10).collect();
    let b: Vec<usize> = (5..15).collect();
    let c: Vec<usize> = (40..50).collect();
    ensure(b_mu_from_edges(&edges(&a), &edges(&a)).map_err(e)? == 0.0, || "b_mu identical".into())?;
    ensure(b_mu_from_edges(&edges(&a), &edges(&c)).map_err(e)? == 1.0, || "b_mu disjoint".into())?;
    ensure(b_mu_from_edges(&edges(&a), &edges(&b)).map_err(e)? == 0.5, || "b_mu half shared".into())?;

    for (p, rc) in [(0.5, 1.0), (0.8, 0.6), (0.3, 0.9), (1.0, 1.0)] {
        close(&format!("F({p},{rc})"), f_from_pr(p, rc), 1.3 * p * rc / (0.3 * p + rc), 1e-10)?;
    }
    let half = BinaryMask::from_fn(8, 8, |_, x| x < 4);
    let ones = SaliencyMap::constant(8, 8, 1.0);
    close("F max s=1", f_beta(&ones, &half, FMode::Max).map_err(e)?, 0.65 / 1.15, 1e-10)?;
    close("F adaptive s=1", f_beta(&ones, &half, FMode::Adaptive).map_err(e)?, 0.65 / 1.15, 1e-10)?;
    Ok("200 random pairs match brute-force BDE and boundaries exactly; B_mu 0/1/0.5 and F arithmetic hold".into())
}

// ---------------------------------------------------------------------------
// 5. spectral normalization

/// Worst `|sigma_max - 1|` over the layers of `model` after `iterations`
/// more power-iteration steps, with the offending layer.
fn spectral_error(model: &Hrrn, iterations: usize) -> (f64, String, usize) {
    let mut model = model.clone();
    model.power_iterate(iterations);
    let mut worst = (0.0f64, String::new());
    let layers = model.spectral_layers();
    for (name, w, u) in &layers {
        let rows = w.shape[0];
        let m = DMatrix::from_row_slice(rows, w.numel() / rows, &w.data);
        let sigma_hat = (m.transpose() * nalgebra::DVector::from_column_slice(u)).norm();
        let err = ((m / sigma_hat).singular_values().max() - 1.0).abs();
        if err > worst.0 {
            worst = (err, name.clone());
        }
    }
    (worst.0, worst.1, layers.len())
}

/// Checked on the trained desk model, whose `u` has been advanced once per
/// training step; a fresh random `u` is reported for reference.
fn criterion_5(trained: &Hrrn) -> Outcome {
    let (fresh, fresh_layer, _) = spectral_error(&Hrrn::new(HrrnConfig::desk(), 5).map_err(e)?, 50);
    let (err, layer, n) = spectral_error(trained, 50);
    let detail = format!(
        "{n} layers of the trained model, worst |sigma_max - 1| = {err:.1e} ({layer}); \
         from a fresh random u: {fresh:.1e} ({fresh_layer})"
    );
    ensure(err <= 1e-3, || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------------------
// 6. tiling

fn criterion_6() -> Outcome {
    let mut r = rng(6);
    for canonical in [64usize, 128, 256] {
        let layout = TileLayout::new(canonical, (canonical, canonical)).map_err(e)?;
        let canvas = random_saliency(&mut r, canonical, canonical);
        let t = layout.tile_size;
        let tiles: Vec<SaliencyMap> = (0..TILE_COUNT)
            .map(|i| {
                let (y, x) = layout.origin(i);
                canvas.crop(y, x, t, t)
            })
            .collect();
        ensure(stitch(&tiles, &layout).map_err(e)? == canvas, || format!("split/stitch not exact at {canonical}"))?;

        let labels: Vec<u8> = (0..canonical * canonical).map(|_| r.gen_range(0..3)).collect();
        let trimap = Trimap::new(canonical, canonical, labels).unwrap();
        let image = Image::constant(canonical, canonical, [0.2, 0.4, 0.6]);
        let inputs = prepare(&image, &trimap, &layout).map_err(e)?;
        let back: Vec<SaliencyMap> = inputs
            .iter()
            .map(|i| SaliencyMap::new(t, t, i.trimap.as_slice().iter().map(|&l| l as f64 / 2.0).collect()).unwrap())
            .collect();
        let want = SaliencyMap::new(canonical, canonical, trimap.as_slice().iter().map(|&l| l as f64 / 2.0).collect()).unwrap();
        ensure(stitch(&back, &layout).map_err(e)? == want, || "trimap quadrants do not reassemble".into())?;
    }
    let lrscn = Lrscn::new(LrscnConfig::desk(), 1).map_err(e)?;
    let hrrn = Hrrn::new(HrrnConfig::desk(), 1).map_err(e)?;
    let mut sizes = Vec::new();
    for _ in 0..5 {
        let (h, w) = (r.gen_range(40..300), r.gen_range(40..300));
        let img = Image::new(h, w, (0..h * w * 3).map(|_| r.gen::<f64>()).collect()).unwrap();
        let out = run_pipeline(&img, &lrscn, &hrrn, 256).map_err(e)?;
        ensure(out.saliency.dims() == (h, w), || format!("pipeline output {:?} for {h}x{w}", out.saliency.dims()))?;
        ensure(out.trimap.dims() == (h, w), || "trimap dims".into())?;
        sizes.push(format!("{h}x{w}"));
    }
    Ok(format!("split/stitch exact at 64/128/256; pipeline preserves {}", sizes.join(", ")))
}

// ---------------------------------------------------------------------------
// 7 and 9. end-to-end training

struct Trained {
    lrscn: Lrscn,
    hrrn: Hrrn,
    test: Vec<DatasetRecord>,
    summary: String,
    seconds: f64,
}

fn train_desk() -> Result<Trained, String> {
    let start = Instant::now();
    let train = synthesize_dataset(0, 200, 128).map_err(e)?;
    let test = synthesize_dataset(0xACCE, 50, 128).map_err(e)?;
    let mut lc = TrainConfig::desk(Stage::Lrscn);
    lc.log_every = 250;
    let l = train_lrscn(&lc, &train, &mut |_| {}).map_err(e)?;
    let mut hc = TrainConfig::desk(Stage::Hrrn);
    hc.log_every = 250;
    let h = train_hrrn(&hc, &train, &mut |_| {}).map_err(e)?;
    let drop = |r: &disent_sod::training::TrainReport| r.final_loss(50).unwrap() / r.initial_loss().unwrap();
    let summary = format!(
        "LRSCN loss ratio {:.2} ({:.0}s), HRRN loss {:.3} -> {:.3} ({:.0}s)",
        drop(&l.report),
        l.report.seconds,
        h.report.initial_loss().unwrap(),
        h.report.final_loss(50).unwrap(),
        h.report.seconds
    );
    Ok(Trained {
        lrscn: l.model,
        hrrn: h.model,
        test,
        summary,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn criterion_7(t: &Trained) -> Outcome {
    let (_, mean) = evaluate_models(&t.lrscn, &t.hrrn, &t.test, 256).map_err(e)?;
    let all_salient = t
        .test
        .iter()
        .map(|r| {
            let img = r.image.resize_bilinear(128, 128);
            t.hrrn.refine(&img, &Trimap::filled(128, 128, TRIMAP_SALIENT)).map(|o| o.saliency.mean())
        })
        .collect::<Result<Vec<_>, _>>()
        .map_err(e)?;
    let all_salient = all_salient.iter().sum::<f64>() / all_salient.len() as f64;
    let detail = format!(
        "held-out F_beta {:.4} (>= 0.9), MAE {:.4} (<= 0.05), F_beta_max {:.4}, BDE {:.3}, B_mu {:.3}; \
         all-salient trimap mean saliency {all_salient:.3}; {}; total {:.0}s",
        mean.f_beta,
        mean.mae,
        mean.f_beta_max,
        mean.bde.unwrap_or(f64::NAN),
        mean.b_mu,
        t.summary,
        t.seconds
    );
    ensure(mean.f_beta >= 0.9 && mean.mae <= 0.05, || detail.clone())?;
    Ok(detail)
}

fn criterion_9(t: &Trained) -> Outcome {
    let mut higher = 0;
    let mut gaps = Vec::new();
    for r in &t.test {
        let out = run_pipeline(&r.image, &t.lrscn, &t.hrrn, 256).map_err(e)?;
        let (h, w) = out.trimap.dims();
        let lv = out.canonical.logvar.resize_bilinear(h, w);
        let (mut band, mut def) = ((0.0, 0usize), (0.0, 0usize));
        for (&l, &v) in out.trimap.as_slice().iter().zip(lv.as_slice()) {
            let acc = if l == TRIMAP_UNCERTAIN { &mut band } else { &mut def };
            acc.0 += v;
            acc.1 += 1;
        }
        if band.1 > 0 && def.1 > 0 {
            let gap = band.0 / band.1 as f64 - def.0 / def.1 as f64;
            gaps.push(gap);
            if gap > 0.0 {
                higher += 1;
            }
        }
    }
    let frac = higher as f64 / t.test.len() as f64;
    gaps.sort_by(f64::total_cmp);
    let detail = format!(
        "band log-variance above definite on {higher}/{} images ({:.0}%, need >= 90%); median gap {:.3}",
        t.test.len(),
        100.0 * frac,
        gaps.get(gaps.len() / 2).copied().unwrap_or(f64::NAN)
    );
    ensure(frac >= 0.9, || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------------------
// 8. label-noise ablation

fn criterion_8(t: &Trained) -> Outcome {
    let cfg = AblationConfig::default();
    let report = ablate_noise_with(&cfg, &t.lrscn, &mut |l| eprintln!("  ablation: {l}")).map_err(e)?;
    let dir = std::env::temp_dir().join("disent_sod_ablation");
    std::fs::create_dir_all(&dir).map_err(e)?;
    report.write_long_csv(std::fs::File::create(dir.join("ablation_long.csv")).map_err(e)?).map_err(e)?;
    report.write_median_csv(std::fs::File::create(dir.join("ablation_median.csv")).map_err(e)?).map_err(e)?;
    let med = |k, arm, m| report.median(k, arm, m).unwrap_or(f64::NAN);
    let mut problems = Vec::new();
    for &k in cfg.kernels.iter().filter(|&&k| k >= 5) {
        for m in ["bde", "b_mu"] {
            let (u, l) = (med(k, Arm::Uncertainty, m), med(k, Arm::L1, m));
            if !(u <= l) {
                problems.push(format!("k={k} {m}: uncertainty {u:.4} > l1 {l:.4}"));
            }
        }
    }
    let small: Vec<f64> = [3, 5, 7].iter().map(|&k| med(k, Arm::Uncertainty, "bde")).collect();
    let lo = small.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = small.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let spread = (hi - lo) / lo;
    if !(spread <= 0.25) {
        problems.push(format!("uncertainty BDE spread over k<=7 is {:.0}%", 100.0 * spread));
    }
    let detail = format!(
        "{} rows; BDE spread k<=7 {:.0}%; tables in {}",
        report.rows.len(),
        100.0 * spread,
        dir.display()
    );
    if problems.is_empty() {
        Ok(detail)
    } else {
        Err(format!("{detail}; {}", problems.join("; ")))
    }
}

fn main() {
    let mut lines = std::collections::BTreeMap::new();
    let mut report = |n: usize, name: &str, outcome: Outcome| {
        let (status, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        eprintln!("criterion {n} done: {status}");
        lines.insert(n, (status, format!("criterion {n} ({name}): {status} - {detail}")));
    };
    report(1, "loss correctness", criterion_1());
    report(2, "uncertainty stationarity", criterion_2());
    report(3, "trimap invariants", criterion_3());
    report(4, "metric oracles", criterion_4());
    report(6, "tiling identity", criterion_6());
    let trained = train_desk();
    let with_model = |f: &dyn Fn(&Trained) -> Outcome| match &trained {
        Ok(t) => f(t),
        Err(err) => Err(format!("desk training failed: {err}")),
    };
    report(5, "spectral normalization", with_model(&|t| criterion_5(&t.hrrn)));
    report(7, "end-to-end desk training", with_model(&criterion_7));
    if std::env::var("DISENT_SOD_SLOW").is_ok_and(|v| v == "1") {
        report(8, "label-noise ablation", with_model(&criterion_8));
    }
    report(9, "uncertainty on the band", with_model(&criterion_9));
    lines.entry(8).or_insert((
        "SKIP",
        "criterion 8 (label-noise ablation): SKIP - runs for hours; set DISENT_SOD_SLOW=1".into(),
    ));

    for (_, line) in lines.values() {
        println!("{line}");
    }
    let failed: Vec<usize> = lines.iter().filter(|(_, (s, _))| *s == "FAIL").map(|(n, _)| *n).collect();
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
