//! Full-reference metrics (PSNR, SSIM), the high-frequency-energy realism
//! proxy, Spearman rank correlation, and the timestep-sweep evaluator.

use rayon::prelude::*;
use serde::Serialize;

use crate::degrade::ImagePair;
use crate::error::{Error, Result};
use crate::nets::student_forward;
use crate::params::ParamStore;
use crate::tensor::{reflect, resize_bilinear, Tensor};

/// Peak signal-to-noise ratio in dB over [0,1] data. Identical inputs
/// return +infinity; serialized reports cap it via [`psnr_logged`].
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!(
            "psnr: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mse: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        / a.numel() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

/// The value written to logs and CSV: infinity becomes 99.0 dB.
pub fn psnr_logged(p: f64) -> f64 {
    if p.is_finite() {
        p
    } else {
        99.0
    }
}

const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_WIN: usize = 11;

fn ssim_window(win: usize) -> Vec<f64> {
    let r = (win / 2) as i64;
    let inv = 1.0 / (2.0 * SSIM_SIGMA * SSIM_SIGMA);
    let mut w = Vec::with_capacity(win * win);
    for i in -r..=r {
        for j in -r..=r {
            w.push((-(i * i + j * j) as f64 * inv).exp());
        }
    }
    let s: f64 = w.iter().sum();
    for v in &mut w {
        *v /= s;
    }
    w
}

/// Structural similarity with an 11x11 Gaussian window (sigma 1.5,
/// K1=0.01, K2=0.03, unit dynamic range), averaged over valid window
/// positions and channels. On images smaller than the window the window
/// shrinks to the largest odd size that fits; below 3x3 it is an error.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!(
            "ssim: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (c, h, w) = (a.channels(), a.height(), a.width());
    let min_dim = h.min(w);
    if min_dim < 3 {
        return Err(Error::InvalidParam(format!(
            "image too small for ssim: {h}x{w}"
        )));
    }
    let win = if min_dim >= SSIM_WIN {
        SSIM_WIN
    } else if min_dim % 2 == 1 {
        min_dim
    } else {
        min_dim - 1
    };
    let weights = ssim_window(win);
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);

    let mut acc = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        for y0 in 0..=(h - win) {
            for x0 in 0..=(w - win) {
                let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                let mut wi = 0;
                for dy in 0..win {
                    for dx in 0..win {
                        let wv = weights[wi];
                        wi += 1;
                        let xv = a.at(ch, y0 + dy, x0 + dx) as f64;
                        let yv = b.at(ch, y0 + dy, x0 + dx) as f64;
                        mx += wv * xv;
                        my += wv * yv;
                        sxx += wv * xv * xv;
                        syy += wv * yv * yv;
                        sxy += wv * xv * yv;
                    }
                }
                let vx = sxx - mx * mx;
                let vy = syy - my * my;
                let cov = sxy - mx * my;
                let val = ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                    / ((mx * mx + my * my + c1) * (vx + vy + c2));
                acc += val;
                count += 1;
            }
        }
    }
    Ok(acc / count as f64)
}

/// Mean squared response of the 3x3 Laplacian (reflect padding): a
/// self-contained stand-in for learned no-reference realism metrics.
/// Zero on constants, decreases under blur, increases under sharpening.
pub fn hf_energy(x: &Tensor) -> f64 {
    let (c, h, w) = (x.channels(), x.height(), x.width());
    let mut acc = 0.0f64;
    for ch in 0..c {
        for y in 0..h as i64 {
            for xx in 0..w as i64 {
                let v = |dy: i64, dx: i64| {
                    x.at(ch, reflect(y + dy, h as i64), reflect(xx + dx, w as i64)) as f64
                };
                let lap = v(-1, 0) + v(1, 0) + v(0, -1) + v(0, 1) - 4.0 * v(0, 0);
                acc += lap * lap;
            }
        }
    }
    acc / (c * h * w) as f64
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let rx = ranks(xs);
    let ry = ranks(ys);
    pearson(&rx, &ry)
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let n = v.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap());
    let mut out = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    sxy / (sxx * syy).sqrt()
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalRow {
    pub label: String,
    pub psnr_mean: f64,
    pub ssim_mean: f64,
    pub hf_energy_mean: f64,
    pub n: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn row(&self, label: &str) -> Option<&EvalRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    /// CSV with header `ts,psnr,ssim,hf_energy,n`; one row per timestep plus
    /// the two baseline rows. Infinite PSNR is written as 99.0.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("ts,psnr,ssim,hf_energy,n\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{:.6},{:.6},{:.6e},{}\n",
                r.label,
                psnr_logged(r.psnr_mean),
                r.ssim_mean,
                r.hf_energy_mean,
                r.n
            ));
        }
        s
    }

    /// Spearman correlations (psnr, hf_energy) against the numeric ts rows.
    pub fn trends(&self) -> Option<(f64, f64)> {
        let pts: Vec<(f64, f64, f64)> = self
            .rows
            .iter()
            .filter_map(|r| {
                r.label
                    .parse::<f64>()
                    .ok()
                    .map(|ts| (ts, r.psnr_mean, r.hf_energy_mean))
            })
            .collect();
        if pts.len() < 2 {
            return None;
        }
        let ts: Vec<f64> = pts.iter().map(|p| p.0).collect();
        let ps: Vec<f64> = pts.iter().map(|p| p.1).collect();
        let hf: Vec<f64> = pts.iter().map(|p| p.2).collect();
        Some((spearman(&ts, &ps), spearman(&ts, &hf)))
    }
}

pub const BASELINE_BILINEAR: &str = "baseline_bilinear";
pub const BASELINE_IDENTITY: &str = "baseline_identity";

/// Run one-step inference at each conditioning timestep over the eval set
/// and aggregate the metrics, plus bilinear-upsample and identity baseline
/// rows. The checkpoint is never mutated (enforced by hash in tests).
pub fn sweep_ts(
    store: &ParamStore,
    eval_set: &[ImagePair],
    ts_values: &[usize],
) -> Result<EvalReport> {
    if eval_set.is_empty() {
        return Err(Error::InvalidParam("empty eval set".into()));
    }
    let mut rows = Vec::new();
    for &t_s in ts_values {
        let per_pair: Result<Vec<(f64, f64, f64)>> = eval_set
            .par_iter()
            .map(|pair| {
                let out = student_forward(&pair.lq, t_s, store)?;
                Ok((
                    psnr(&out, &pair.hq)?,
                    ssim(&out, &pair.hq)?,
                    hf_energy(&out),
                ))
            })
            .collect();
        rows.push(mean_row(t_s.to_string(), &per_pair?));
    }
    // bilinear 4x baseline
    let per_pair: Result<Vec<(f64, f64, f64)>> = eval_set
        .par_iter()
        .map(|pair| {
            let up = resize_bilinear(&pair.lq, pair.hq.height(), pair.hq.width());
            Ok((psnr(&up, &pair.hq)?, ssim(&up, &pair.hq)?, hf_energy(&up)))
        })
        .collect();
    rows.push(mean_row(BASELINE_BILINEAR.to_string(), &per_pair?));
    // identity (HQ against itself: metric ceiling + reference HF level)
    let per_pair: Result<Vec<(f64, f64, f64)>> = eval_set
        .par_iter()
        .map(|pair| {
            Ok((
                psnr(&pair.hq, &pair.hq)?,
                ssim(&pair.hq, &pair.hq)?,
                hf_energy(&pair.hq),
            ))
        })
        .collect();
    rows.push(mean_row(BASELINE_IDENTITY.to_string(), &per_pair?));
    Ok(EvalReport { rows })
}

fn mean_row(label: String, vals: &[(f64, f64, f64)]) -> EvalRow {
    let n = vals.len();
    let psnr_mean = vals.iter().map(|v| v.0).sum::<f64>() / n as f64;
    let ssim_mean = vals.iter().map(|v| v.1).sum::<f64>() / n as f64;
    let hf_mean = vals.iter().map(|v| v.2).sum::<f64>() / n as f64;
    EvalRow {
        label,
        psnr_mean,
        ssim_mean,
        hf_energy_mean: hf_mean,
        n,
    }
}
