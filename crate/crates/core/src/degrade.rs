//! Procedural HQ image synthesis and the seeded second-order degradation
//! pipeline that produces LQ/HQ training pairs.
//!
//! Everything here is a pure function of `(seed, config)` built on the
//! counter-based streams of [`crate::rng`], using only arithmetic that is
//! bit-exact across platforms (+,-,*,/, sqrt, floor/round and the
//! deterministic exp inside Gaussian kernels). Per-pair stream layout:
//!
//! - pair i of a dataset draws its seed as `Rng(base).derive(TAG_PAIR).u64_at(i)`
//! - HQ synthesis uses `Rng(seed).derive(TAG_HQ)`
//! - degradation order k uses `Rng(seed).derive(TAG_DEGRADE).derive(k)`,
//!   draw 0 = blur sigma, 1 = resize scale, 2 = noise sigma, 3 = quantize
//!   levels, and noise values come from `.derive(TAG_NOISE).gauss12_at(pixel)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{blur_gaussian, resize_bilinear, Tensor};

const TAG_HQ: u64 = 0x4851;
const TAG_DEGRADE: u64 = 0xde64;
const TAG_NOISE: u64 = 0x401e;
const TAG_PAIR: u64 = 0x9a13;

/// Seeded specification of the two-order blur/resize/noise/quantize pipeline.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DegradationConfig {
    pub orders: usize,
    pub blur_sigma_range: [f64; 2],
    pub resize_scale_range: [f64; 2],
    pub noise_sigma_range: [f64; 2],
    /// JPEG surrogate: uniform per-channel quantization to this many levels;
    /// 256 or more is a no-op (the 8-bit grid).
    pub quantize_levels_range: [u32; 2],
    pub final_scale: usize,
}

impl Default for DegradationConfig {
    fn default() -> Self {
        DegradationConfig {
            orders: 2,
            blur_sigma_range: [0.2, 2.0],
            resize_scale_range: [0.5, 1.0],
            noise_sigma_range: [0.0, 0.05],
            quantize_levels_range: [16, 256],
            final_scale: 4,
        }
    }
}

impl DegradationConfig {
    pub fn validate(&self) -> Result<()> {
        let ranges_ok = self.blur_sigma_range[0] <= self.blur_sigma_range[1]
            && self.resize_scale_range[0] <= self.resize_scale_range[1]
            && self.noise_sigma_range[0] <= self.noise_sigma_range[1]
            && self.quantize_levels_range[0] <= self.quantize_levels_range[1];
        if !ranges_ok {
            return Err(Error::InvalidParam(
                "degradation ranges must have lo <= hi".into(),
            ));
        }
        if self.blur_sigma_range[0] < 0.0
            || self.resize_scale_range[0] <= 0.0
            || self.noise_sigma_range[0] < 0.0
            || self.quantize_levels_range[0] < 2
        {
            return Err(Error::InvalidParam("degradation range out of domain".into()));
        }
        if self.final_scale == 0 {
            return Err(Error::InvalidParam("final_scale must be >= 1".into()));
        }
        Ok(())
    }

    /// Degenerate configuration that leaves the image untouched until the
    /// final downsample.
    pub fn identity() -> Self {
        DegradationConfig {
            orders: 2,
            blur_sigma_range: [0.0, 0.0],
            resize_scale_range: [1.0, 1.0],
            noise_sigma_range: [0.0, 0.0],
            quantize_levels_range: [256, 256],
            final_scale: 4,
        }
    }
}

/// Parameters actually sampled for one degradation order.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AppliedOrder {
    pub blur_sigma: f64,
    pub resize_scale: f64,
    pub resize_to: [usize; 2],
    pub noise_sigma: f64,
    pub quantize_levels: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
pub struct AppliedParams {
    pub orders: Vec<AppliedOrder>,
}

/// One training example: the clean image, its degraded low-resolution
/// counterpart, and the full record of how it was produced.
#[derive(Debug, Clone)]
pub struct ImagePair {
    pub hq: Tensor,
    pub lq: Tensor,
    pub seed: u64,
    pub applied: AppliedParams,
}

// ---- HQ synthesis -----------------------------------------------------------

fn unit_dir(r: &Rng, k0: u64) -> (f64, f64) {
    let dx = r.range_at(k0, -1.0, 1.0);
    let dy = r.range_at(k0 + 1, -1.0, 1.0);
    let n = (dx * dx + dy * dy).sqrt();
    if n < 1e-6 {
        (1.0, 0.0)
    } else {
        (dx / n, dy / n)
    }
}

fn blend(img: &mut [f64], size: usize, color: [f64; 3], alpha: f64, cov: impl Fn(f64, f64) -> f64) {
    let plane = size * size;
    for y in 0..size {
        let py = y as f64 + 0.5;
        for x in 0..size {
            let px = x as f64 + 0.5;
            let a = alpha * cov(px, py);
            if a <= 0.0 {
                continue;
            }
            let idx = y * size + x;
            for c in 0..3 {
                let v = img[c * plane + idx];
                img[c * plane + idx] = v + (color[c] - v) * a;
            }
        }
    }
}

/// Deterministic composition of 3-8 anti-aliased primitives (gradient
/// background, rectangles, circles, stripe bands, gradient overlays) with
/// random colors. Values in [0,1], with real edge content in every image.
pub fn gen_hq(seed: u64, size: usize) -> Result<Tensor> {
    if size % 4 != 0 || size == 0 {
        return Err(Error::InvalidParam(format!(
            "HQ size must be a positive multiple of 4, got {size}"
        )));
    }
    let rng = Rng::new(seed).derive(TAG_HQ);
    let plane = size * size;
    let mut img = vec![0.0f64; 3 * plane];

    // background: linear gradient between two colors
    let c0 = [rng.f64_at(0), rng.f64_at(1), rng.f64_at(2)];
    let c1 = [rng.f64_at(3), rng.f64_at(4), rng.f64_at(5)];
    let (dx, dy) = unit_dir(&rng, 6);
    let half = size as f64 * 0.5;
    for y in 0..size {
        for x in 0..size {
            let proj = ((x as f64 + 0.5 - half) * dx + (y as f64 + 0.5 - half) * dy)
                / (size as f64 * 1.415);
            let t = (proj + 0.5).clamp(0.0, 1.0);
            for c in 0..3 {
                img[c * plane + y * size + x] = c0[c] + (c1[c] - c0[c]) * t;
            }
        }
    }

    let n_prims = 3 + rng.index_at(8, 6); // 3..=8
    for k in 0..n_prims {
        let p = rng.derive(16 + k as u64);
        // the first primitive is always hard-edged so every image carries
        // high-frequency content
        let kind = if k == 0 { p.index_at(0, 3) } else { p.index_at(0, 4) };
        let alpha = p.range_at(1, 0.6, 1.0);
        let color = [p.f64_at(2), p.f64_at(3), p.f64_at(4)];
        let s = size as f64;
        match kind {
            0 => {
                // axis-aligned rectangle with 1px anti-aliased border
                let cx = p.range_at(5, 0.0, s);
                let cy = p.range_at(6, 0.0, s);
                let hw = p.range_at(7, 0.08, 0.35) * s;
                let hh = p.range_at(8, 0.08, 0.35) * s;
                blend(&mut img, size, color, alpha, |px, py| {
                    let fx = (hw - (px - cx).abs() + 0.5).clamp(0.0, 1.0);
                    let fy = (hh - (py - cy).abs() + 0.5).clamp(0.0, 1.0);
                    fx * fy
                });
            }
            1 => {
                let cx = p.range_at(5, 0.0, s);
                let cy = p.range_at(6, 0.0, s);
                let r = p.range_at(7, 0.08, 0.30) * s;
                blend(&mut img, size, color, alpha, |px, py| {
                    let d = ((px - cx) * (px - cx) + (py - cy) * (py - cy)).sqrt();
                    (r - d + 0.5).clamp(0.0, 1.0)
                });
            }
            2 => {
                // stripe bands along a random direction (triangle-wave mask
                // sharpened to ~1px transitions)
                let (sx, sy) = unit_dir(&p, 5);
                let period = p.range_at(7, 4.0, 16.0);
                let phase = p.f64_at(8);
                blend(&mut img, size, color, alpha, |px, py| {
                    let u = (px * sx + py * sy) / period + phase;
                    let tri = (2.0 * (u - u.floor()) - 1.0).abs();
                    ((tri - 0.5) * (period * 0.5) + 0.5).clamp(0.0, 1.0)
                });
            }
            _ => {
                let (gx, gy) = unit_dir(&p, 5);
                blend(&mut img, size, color, alpha * 0.7, |px, py| {
                    (((px - half) * gx + (py - half) * gy) / (s * 1.415) + 0.5).clamp(0.0, 1.0)
                });
            }
        }
    }

    let data: Vec<f32> = img.iter().map(|&v| (v.clamp(0.0, 1.0)) as f32).collect();
    Tensor::from_vec(&[3, size, size], data)
}

// ---- degradation ------------------------------------------------------------

fn quantize(t: &mut Tensor, levels: u32) {
    if levels >= 256 {
        return;
    }
    let l = (levels - 1) as f64;
    for v in t.data_mut() {
        *v = ((*v as f64 * l).round() / l) as f32;
    }
}

/// Apply the two-order pipeline: per order Gaussian blur, bilinear resize by
/// a sampled scale (relative to the HQ size), additive clamped Gaussian
/// noise and uniform quantization; then a final resize to exactly
/// HQ/final_scale. Every sampled value is recorded.
pub fn degrade(hq: &Tensor, cfg: &DegradationConfig, seed: u64) -> Result<ImagePair> {
    cfg.validate()?;
    let (h0, w0) = (hq.height(), hq.width());
    let (lq_h, lq_w) = (h0 / cfg.final_scale, w0 / cfg.final_scale);
    if lq_h == 0 || lq_w == 0 || lq_h * cfg.final_scale != h0 || lq_w * cfg.final_scale != w0 {
        return Err(Error::InvalidParam(format!(
            "HQ dims {h0}x{w0} not divisible by final_scale {}",
            cfg.final_scale
        )));
    }
    let root = Rng::new(seed).derive(TAG_DEGRADE);
    let mut img = hq.clone();
    let mut applied = AppliedParams::default();

    for order in 0..cfg.orders {
        let s = root.derive(order as u64);
        let blur_sigma = s.range_at(0, cfg.blur_sigma_range[0], cfg.blur_sigma_range[1]);
        let resize_scale = s.range_at(1, cfg.resize_scale_range[0], cfg.resize_scale_range[1]);
        let noise_sigma = s.range_at(2, cfg.noise_sigma_range[0], cfg.noise_sigma_range[1]);
        let span = cfg.quantize_levels_range[1] - cfg.quantize_levels_range[0];
        let quantize_levels = cfg.quantize_levels_range[0]
            + if span == 0 { 0 } else { s.index_at(3, span as usize + 1) as u32 };

        if blur_sigma > 0.0 {
            img = blur_gaussian(&img, blur_sigma);
        }
        // resize relative to the original HQ size, never below the LQ size
        let nh = ((h0 as f64 * resize_scale).round() as usize).clamp(lq_h, 4 * h0);
        let nw = ((w0 as f64 * resize_scale).round() as usize).clamp(lq_w, 4 * w0);
        img = resize_bilinear(&img, nh, nw);

        if noise_sigma > 0.0 {
            let ns = s.derive(TAG_NOISE);
            for (i, v) in img.data_mut().iter_mut().enumerate() {
                *v = (*v as f64 + noise_sigma * ns.gauss12_at(i as u64)).clamp(0.0, 1.0) as f32;
            }
        }
        quantize(&mut img, quantize_levels);

        applied.orders.push(AppliedOrder {
            blur_sigma,
            resize_scale,
            resize_to: [nh, nw],
            noise_sigma,
            quantize_levels,
        });
    }

    let lq = resize_bilinear(&img, lq_h, lq_w).clamp01();
    Ok(ImagePair {
        hq: hq.clone(),
        lq,
        seed,
        applied,
    })
}

/// Seed of pair `i` in a dataset stream.
pub fn pair_seed(base_seed: u64, index: usize) -> u64 {
    Rng::new(base_seed).derive(TAG_PAIR).u64_at(index as u64)
}

/// Generate pair `i` of the dataset stream rooted at `base_seed`.
pub fn make_pair(index: usize, size: usize, cfg: &DegradationConfig, base_seed: u64) -> Result<ImagePair> {
    let seed = pair_seed(base_seed, index);
    let hq = gen_hq(seed, size)?;
    degrade(&hq, cfg, seed)
}

/// Deterministic dataset: pair i derives its seed from (base_seed, i).
pub fn make_dataset(
    n: usize,
    size: usize,
    cfg: &DegradationConfig,
    base_seed: u64,
) -> Result<Vec<ImagePair>> {
    use rayon::prelude::*;
    cfg.validate()?;
    (0..n)
        .into_par_iter()
        .map(|i| make_pair(i, size, cfg, base_seed))
        .collect()
}

/// SHA-256 over the raw f32 bytes of (hq, lq); the determinism golden.
pub fn pair_golden_hash(pair: &ImagePair) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for &v in pair.hq.data() {
        h.update(v.to_le_bytes());
    }
    for &v in pair.lq.data() {
        h.update(v.to_le_bytes());
    }
    crate::params::hex(&h.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gen_hq_deterministic_and_in_range() {
        let a = gen_hq(42, 48).unwrap();
        let b = gen_hq(42, 48).unwrap();
        assert_eq!(a, b);
        for &v in a.data() {
            assert!((0.0..=1.0).contains(&v));
        }
        assert!(gen_hq(1, 47).is_err());
    }

    #[test]
    fn gen_hq_content_is_nondegenerate() {
        let mut ok = 0;
        let n = 1000;
        for seed in 0..n {
            let img = gen_hq(seed, 48).unwrap();
            if img.std() > 0.05 {
                ok += 1;
            }
        }
        assert!(ok * 100 >= n * 99, "only {ok}/{n} images with std > 0.05");
    }

    #[test]
    fn identity_pipeline_equals_plain_downsample() {
        let hq = gen_hq(7, 48).unwrap();
        let pair = degrade(&hq, &DegradationConfig::identity(), 7).unwrap();
        let direct = resize_bilinear(&hq, 12, 12);
        assert!(pair.lq.max_abs_diff(&direct) < 1e-6);
        assert_eq!(pair.lq.shape(), &[3, 12, 12]);
    }

    #[test]
    fn degrade_deterministic_and_recorded() {
        let hq = gen_hq(3, 48).unwrap();
        let cfg = DegradationConfig::default();
        let a = degrade(&hq, &cfg, 3).unwrap();
        let b = degrade(&hq, &cfg, 3).unwrap();
        assert_eq!(a.lq, b.lq);
        assert_eq!(a.applied, b.applied);
        assert_eq!(a.applied.orders.len(), 2);
        for o in &a.applied.orders {
            assert!(o.blur_sigma >= 0.2 && o.blur_sigma <= 2.0);
            assert!(o.resize_scale >= 0.5 && o.resize_scale <= 1.0);
            assert!((16..=256).contains(&o.quantize_levels));
        }
        for &v in a.lq.data() {
            assert!((0.0..=1.0).contains(&v));
        }
    }

    fn psnr_of(a: &Tensor, b: &Tensor) -> f64 {
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
        10.0 * (1.0 / mse).log10()
    }

    #[test]
    fn degradation_strictly_hurts_reconstruction() {
        // PSNR of the bilinear-upsampled LQ against HQ is worse with the
        // default pipeline than with the identity pipeline on a fixed seed
        // set. Asserted on the set mean: a mild sampled blur can act as an
        // anti-aliasing prefilter and help individual draws.
        let cfg = DegradationConfig::default();
        let id = DegradationConfig::identity();
        let (mut deg_sum, mut id_sum) = (0.0, 0.0);
        for seed in 1u64..=8 {
            let hq = gen_hq(seed, 48).unwrap();
            let deg = degrade(&hq, &cfg, seed).unwrap();
            let clean = degrade(&hq, &id, seed).unwrap();
            deg_sum += psnr_of(&resize_bilinear(&deg.lq, 48, 48), &hq);
            id_sum += psnr_of(&resize_bilinear(&clean.lq, 48, 48), &hq);
        }
        assert!(
            deg_sum + 0.5 * 8.0 < id_sum,
            "degraded mean {:.2} dB vs identity mean {:.2} dB",
            deg_sum / 8.0,
            id_sum / 8.0
        );
    }

    #[test]
    fn dataset_deterministic_and_distinct() {
        let cfg = DegradationConfig::default();
        let d1 = make_dataset(6, 48, &cfg, 99).unwrap();
        let d2 = make_dataset(6, 48, &cfg, 99).unwrap();
        assert_eq!(d1.len(), 6);
        for (a, b) in d1.iter().zip(&d2) {
            assert_eq!(a.hq, b.hq);
            assert_eq!(a.lq, b.lq);
        }
        // disjoint seeds give distinct images
        for i in 1..d1.len() {
            assert_ne!(d1[0].hq, d1[i].hq);
        }
    }
}
