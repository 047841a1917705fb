//! Reference image metrics on [0,1] tensors: PSNR, windowed SSIM, and an
//! edge-consistency F1 that scores a super-resolved image against the
//! ground-truth edge map.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// SSIM window geometry and stabilizers, fixed on the unit value range.
const SSIM_WINDOW: usize = 8;
const SSIM_STRIDE: usize = 4;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

const OTSU_BINS: usize = 256;
/// Saturation constant for gradient contrast: magnitudes map through
/// m/(m+SAT), so every genuine color boundary lands in one tight high
/// cluster regardless of which color pair meets there, while smooth
/// shading stays low. Without this, Otsu can split between weak and
/// strong boundaries instead of between boundaries and flat regions.
const GRAD_SATURATION: f64 = 0.05;
/// GT edge pixels match detected ones within this Chebyshev radius.
const MATCH_RADIUS: i64 = 1;

fn check_pair(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "metric inputs disagree: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    for &v in a.data().iter().chain(b.data().iter()) {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::domain(format!("metric input value {v} outside [0,1]")));
        }
    }
    Ok(())
}

/// Mean squared error over all elements.
pub fn mse(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    check_pair(a, b)?;
    let n = a.numel() as f64;
    Ok(a.data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| {
            let d = (x - y) as f64;
            d * d
        })
        .sum::<f64>()
        / n)
}

/// 10·log10(1/mse) dB on the unit range; identical inputs give +∞.
pub fn psnr(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    let e = mse(a, b)?;
    if e == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / e).log10())
}

/// Mean SSIM over 8×8 windows at stride 4, computed per channel.
/// Inputs are (h, w, c) or (h, w); both sides of every window pair use
/// population statistics.
pub fn ssim(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    check_pair(a, b)?;
    let s = a.shape();
    let (h, w, c) = match s.len() {
        2 => (s[0], s[1], 1),
        3 => (s[0], s[1], s[2]),
        _ => return Err(Error::shape(format!("ssim expects an image, got {s:?}"))),
    };
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::shape(format!(
            "image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} ssim window"
        )));
    }
    let (ad, bd) = (a.data(), b.data());
    let at = |y: usize, x: usize, ch: usize, d: &[f32]| d[(y * w + x) * c + ch] as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    let nw = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let mut y0 = 0;
    while y0 + SSIM_WINDOW <= h {
        let mut x0 = 0;
        while x0 + SSIM_WINDOW <= w {
            for ch in 0..c {
                let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for y in y0..y0 + SSIM_WINDOW {
                    for x in x0..x0 + SSIM_WINDOW {
                        let (va, vb) = (at(y, x, ch, ad), at(y, x, ch, bd));
                        sa += va;
                        sb += vb;
                        saa += va * va;
                        sbb += vb * vb;
                        sab += va * vb;
                    }
                }
                let (ma, mb) = (sa / nw, sb / nw);
                let va = saa / nw - ma * ma;
                let vb = sbb / nw - mb * mb;
                let cov = sab / nw - ma * mb;
                total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                    / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
                count += 1;
            }
            x0 += SSIM_STRIDE;
        }
        y0 += SSIM_STRIDE;
    }
    Ok(total / count as f64)
}

/// Saturated color-gradient magnitude per pixel: central differences
/// with replicated borders, summed in quadrature over channels, then
/// contrast-normalized (see `GRAD_SATURATION`).
fn gradient_magnitude(img: &Tensor<f32>) -> Result<Vec<f64>> {
    let s = img.shape();
    let (h, w, c) = match s.len() {
        2 => (s[0], s[1], 1),
        3 => (s[0], s[1], s[2]),
        _ => return Err(Error::shape(format!("expected an image, got {s:?}"))),
    };
    let d = img.data();
    let at = |y: usize, x: usize, ch: usize| d[(y * w + x) * c + ch] as f64;
    let mut mag = vec![0.0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for ch in 0..c {
                let gx = (at(y, (x + 1).min(w - 1), ch) - at(y, x.max(1) - 1, ch)) / 2.0;
                let gy = (at((y + 1).min(h - 1), x, ch) - at(y.max(1) - 1, x, ch)) / 2.0;
                acc += gx * gx + gy * gy;
            }
            let m = acc.sqrt();
            mag[y * w + x] = m / (m + GRAD_SATURATION);
        }
    }
    Ok(mag)
}

/// Otsu's threshold over a 256-bin histogram of `values` spanning
/// [0, max]; returns the upper edge of the chosen bin. A constant input
/// yields the span's top, classifying nothing as an edge.
fn otsu_threshold(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(0.0f64, f64::max);
    if max <= 0.0 {
        return 0.0;
    }
    let width = max / OTSU_BINS as f64;
    let mut hist = [0u64; OTSU_BINS];
    for &v in values {
        let b = ((v / max) * OTSU_BINS as f64) as usize;
        hist[b.min(OTSU_BINS - 1)] += 1;
    }
    let n = values.len() as f64;
    let total_mean: f64 =
        hist.iter().enumerate().map(|(i, &c)| (i as f64 + 0.5) * c as f64).sum::<f64>() / n;
    let (mut best_k, mut best_var) = (OTSU_BINS - 1, -1.0);
    let (mut w0, mut sum0) = (0.0f64, 0.0f64);
    for k in 0..OTSU_BINS - 1 {
        w0 += hist[k] as f64 / n;
        sum0 += (k as f64 + 0.5) * hist[k] as f64 / n;
        if w0 <= 0.0 || w0 >= 1.0 {
            continue;
        }
        let m0 = sum0 / w0;
        let m1 = (total_mean - sum0) / (1.0 - w0);
        let between = w0 * (1.0 - w0) * (m0 - m1) * (m0 - m1);
        if between > best_var {
            best_var = between;
            best_k = k;
        }
    }
    (best_k as f64 + 1.0) * width
}

/// Detected edge mask of an image: gradient magnitude above the Otsu
/// threshold.
pub fn detect_edges(img: &Tensor<f32>) -> Result<Vec<bool>> {
    let mag = gradient_magnitude(img)?;
    let t = otsu_threshold(&mag);
    Ok(mag.iter().map(|&v| v > t).collect())
}

/// Edge-consistency F1: edges detected in `sr` matched against the
/// ground-truth binary edge map within radius 1. Both-empty scores 1,
/// one-empty scores 0.
pub fn edge_f1(sr: &Tensor<f32>, gt_edges: &Tensor<f32>) -> Result<f64> {
    let ss = sr.shape();
    if ss.len() != 3 {
        return Err(Error::shape(format!("sr image must be (h, w, c), got {ss:?}")));
    }
    let (h, w) = (ss[0], ss[1]);
    let gs = gt_edges.shape();
    let gt_ok = (gs.len() == 2 && gs == [h, w]) || (gs.len() == 3 && gs == [h, w, 1]);
    if !gt_ok {
        return Err(Error::shape(format!("edge map {gs:?} does not cover a {h}x{w} image")));
    }
    let mut gt = vec![false; h * w];
    for (i, &v) in gt_edges.data().iter().enumerate() {
        gt[i] = match v {
            v if v == 0.0 => false,
            v if v == 1.0 => true,
            _ => return Err(Error::domain(format!("edge map value {v} is not binary"))),
        };
    }
    let det = detect_edges(sr)?;
    let has_near = |mask: &[bool], y: usize, x: usize| -> bool {
        let (yy, xx) = (y as i64, x as i64);
        for dy in -MATCH_RADIUS..=MATCH_RADIUS {
            for dx in -MATCH_RADIUS..=MATCH_RADIUS {
                let (ny, nx) = (yy + dy, xx + dx);
                if ny >= 0 && nx >= 0 && (ny as usize) < h && (nx as usize) < w {
                    if mask[ny as usize * w + nx as usize] {
                        return true;
                    }
                }
            }
        }
        false
    };
    let (mut n_det, mut n_gt, mut det_matched, mut gt_matched) = (0u64, 0u64, 0u64, 0u64);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if det[i] {
                n_det += 1;
                if has_near(&gt, y, x) {
                    det_matched += 1;
                }
            }
            if gt[i] {
                n_gt += 1;
                if has_near(&det, y, x) {
                    gt_matched += 1;
                }
            }
        }
    }
    if n_det == 0 && n_gt == 0 {
        return Ok(1.0);
    }
    if n_det == 0 || n_gt == 0 {
        return Ok(0.0);
    }
    let precision = det_matched as f64 / n_det as f64;
    let recall = gt_matched as f64 / n_gt as f64;
    if precision + recall == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * precision * recall / (precision + recall))
}

/// The standard triple reported everywhere a sample is scored.
#[derive(Debug, Clone)]
pub struct MetricReport {
    pub psnr: f64,
    pub ssim: f64,
    pub edge_f1: f64,
    pub notes: String,
}

impl MetricReport {
    pub fn compute(sr: &Tensor<f32>, hr: &Tensor<f32>, gt_edges: &Tensor<f32>) -> Result<Self> {
        Ok(MetricReport {
            psnr: psnr(sr, hr)?,
            ssim: ssim(sr, hr)?,
            edge_f1: edge_f1(sr, gt_edges)?,
            notes: String::new(),
        })
    }
}

/// Format a metric value for CSV/log lines; infinity prints as "inf".
pub fn fmt_metric(v: f64) -> String {
    if v.is_infinite() {
        "inf".to_string()
    } else {
        format!("{v:.4}")
    }
}
