//! Reconstruction-quality and video-property metrics.
//!
//! PSNR and SSIM are computed per frame and averaged over frames. The
//! dynamics magnitude is the log of the mean per-pixel RGB distance between
//! consecutive frames; the frequency magnitude is the mean Sobel gradient
//! magnitude. All metric math runs in f64.

use crate::data::Video;
use crate::error::{Error, Result};
use std::io::Write;

/// PSNR cap for zero-MSE frames, in dB.
pub const PSNR_CAP: f64 = 100.0;
/// Epsilon inside the dynamics log.
pub const DYNAMICS_EPS: f64 = 1e-8;

/// Frame-averaged PSNR in dB.
pub fn psnr(a: &Video, b: &Video, max_val: f64) -> Result<f64> {
    check_same(a, b)?;
    let fs = a.h * a.w * a.c;
    let mut acc = 0.0;
    for t in 0..a.t {
        let (fa, fb) = (a.frame(t), b.frame(t));
        let mse: f64 = fa
            .iter()
            .zip(fb)
            .map(|(x, y)| {
                let d = *x as f64 - *y as f64;
                d * d
            })
            .sum::<f64>()
            / fs as f64;
        acc += if mse == 0.0 {
            PSNR_CAP
        } else {
            (10.0 * (max_val * max_val / mse).log10()).min(PSNR_CAP)
        };
    }
    Ok(acc / a.t as f64)
}

/// Frame-averaged single-scale SSIM: 11x11 Gaussian window (sigma 1.5),
/// K1 = 0.01, K2 = 0.03, dynamic range 1, channel-averaged, valid windows.
pub fn ssim(a: &Video, b: &Video) -> Result<f64> {
    check_same(a, b)?;
    const WIN: usize = 11;
    if a.h < WIN || a.w < WIN {
        return Err(Error::Input(format!(
            "ssim: frames {}x{} smaller than {}x{} window",
            a.h, a.w, WIN, WIN
        )));
    }
    let kernel = gaussian_kernel(WIN, 1.5);
    let c1 = (0.01f64).powi(2);
    let c2 = (0.03f64).powi(2);
    let mut total = 0.0;
    for t in 0..a.t {
        let mut per_frame = 0.0;
        for c in 0..a.c {
            let plane = |v: &Video, y: usize, x: usize| v.at(t, y, x, c) as f64;
            let mut acc = 0.0;
            let mut count = 0usize;
            for y0 in 0..=a.h - WIN {
                for x0 in 0..=a.w - WIN {
                    let (mut mu_a, mut mu_b) = (0.0, 0.0);
                    let (mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0);
                    for dy in 0..WIN {
                        for dx in 0..WIN {
                            let w = kernel[dy] * kernel[dx];
                            let va = plane(a, y0 + dy, x0 + dx);
                            let vb = plane(b, y0 + dy, x0 + dx);
                            mu_a += w * va;
                            mu_b += w * vb;
                            aa += w * va * va;
                            bb += w * vb * vb;
                            ab += w * va * vb;
                        }
                    }
                    let var_a = aa - mu_a * mu_a;
                    let var_b = bb - mu_b * mu_b;
                    let cov = ab - mu_a * mu_b;
                    let s = ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2))
                        / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
                    acc += s;
                    count += 1;
                }
            }
            per_frame += acc / count as f64;
        }
        total += per_frame / a.c as f64;
    }
    Ok(total / a.t as f64)
}

/// log(mean over consecutive-frame pairs of the mean per-pixel RGB l2
/// distance, + 1e-8).
pub fn dynamics_magnitude(v: &Video) -> Result<f64> {
    if v.t < 2 {
        return Err(Error::Input("dynamics_magnitude: need at least 2 frames".into()));
    }
    let mut pair_sum = 0.0;
    for t in 0..v.t - 1 {
        let mut px_sum = 0.0;
        for y in 0..v.h {
            for x in 0..v.w {
                let mut d2 = 0.0;
                for c in 0..v.c {
                    let d = v.at(t + 1, y, x, c) as f64 - v.at(t, y, x, c) as f64;
                    d2 += d * d;
                }
                px_sum += d2.sqrt();
            }
        }
        pair_sum += px_sum / (v.h * v.w) as f64;
    }
    Ok((pair_sum / (v.t - 1) as f64 + DYNAMICS_EPS).ln())
}

/// Per-pixel Sobel gradient magnitude of a grayscale frame (replicate
/// padding). `frame` is H x W x C; returns H x W.
pub fn sobel_edge_map(frame: &[f32], h: usize, w: usize, c: usize) -> Vec<f64> {
    let gray: Vec<f64> = (0..h * w)
        .map(|i| {
            let base = i * c;
            frame[base..base + c].iter().map(|v| *v as f64).sum::<f64>() / c as f64
        })
        .collect();
    let gx_k = [-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0];
    let gy_k = [-1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0];
    let clamp = |v: isize, hi: usize| v.clamp(0, hi as isize - 1) as usize;
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let (mut gx, mut gy) = (0.0, 0.0);
            for dy in 0..3 {
                let sy = clamp(y as isize + dy as isize - 1, h);
                for dx in 0..3 {
                    let sx = clamp(x as isize + dx as isize - 1, w);
                    let v = gray[sy * w + sx];
                    gx += gx_k[dy * 3 + dx] * v;
                    gy += gy_k[dy * 3 + dx] * v;
                }
            }
            out[y * w + x] = (gx * gx + gy * gy).sqrt();
        }
    }
    out
}

/// Mean Sobel gradient magnitude over pixels, averaged over frames.
pub fn frequency_magnitude(v: &Video) -> Result<f64> {
    if v.h < 3 || v.w < 3 {
        return Err(Error::Input("frequency_magnitude: frames must be at least 3x3".into()));
    }
    let mut acc = 0.0;
    for t in 0..v.t {
        let map = sobel_edge_map(v.frame(t), v.h, v.w, v.c);
        acc += map.iter().sum::<f64>() / map.len() as f64;
    }
    Ok(acc / v.t as f64)
}

/// Sample Pearson correlation coefficient.
pub fn pearson_r(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::Input(format!(
            "pearson_r: need two equal-length series of >= 2 points, got {} and {}",
            xs.len(),
            ys.len()
        )));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
        sxy += (x - mx) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Input("pearson_r: zero variance, correlation undefined".into()));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Min-max standardization to [0, 100], used only for reporting.
pub fn standardize_0_100(xs: &[f64]) -> Vec<f64> {
    let lo = xs.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        return vec![0.0; xs.len()];
    }
    xs.iter().map(|x| 100.0 * (x - lo) / (hi - lo)).collect()
}

/// Per-video metric rows plus corpus means.
#[derive(Debug, Clone, Default)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
}

#[derive(Debug, Clone)]
pub struct MetricRow {
    pub id: String,
    pub psnr: f64,
    pub ssim: f64,
    pub dynamics: f64,
    pub frequency: f64,
}

impl MetricReport {
    pub fn push(&mut self, row: MetricRow) {
        self.rows.push(row);
    }

    pub fn mean(&self, f: impl Fn(&MetricRow) -> f64) -> f64 {
        if self.rows.is_empty() {
            return f64::NAN;
        }
        self.rows.iter().map(&f).sum::<f64>() / self.rows.len() as f64
    }

    /// One row per video plus a trailing summary row of arithmetic means.
    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "id,psnr,ssim,dynamics,frequency")?;
        for r in &self.rows {
            writeln!(out, "{},{},{},{},{}", r.id, r.psnr, r.ssim, r.dynamics, r.frequency)?;
        }
        writeln!(
            out,
            "mean,{},{},{},{}",
            self.mean(|r| r.psnr),
            self.mean(|r| r.ssim),
            self.mean(|r| r.dynamics),
            self.mean(|r| r.frequency)
        )
    }
}

fn check_same(a: &Video, b: &Video) -> Result<()> {
    if (a.t, a.h, a.w, a.c) != (b.t, b.h, b.w, b.c) {
        return Err(Error::Shape(format!(
            "videos differ: {}x{}x{}x{} vs {}x{}x{}x{}",
            a.t, a.h, a.w, a.c, b.t, b.h, b.w, b.c
        )));
    }
    Ok(())
}

fn gaussian_kernel(n: usize, sigma: f64) -> Vec<f64> {
    let mid = (n as f64 - 1.0) / 2.0;
    let mut k: Vec<f64> = (0..n)
        .map(|i| (-((i as f64 - mid).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    for v in &mut k {
        *v /= s;
    }
    k
}
