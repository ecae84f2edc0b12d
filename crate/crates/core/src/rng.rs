//! Counter-based deterministic random numbers.
//!
//! Every random draw in this crate is a pure function of a seed and a set of
//! integer tags (pair index, stage index, draw index, ...). There is no
//! mutable generator state to thread around, which makes datasets and
//! training streams reproducible, resumable and embarrassingly parallel.
//!
//! The mixing function is the SplitMix64 finalizer:
//!
//! ```text
//! mix64(z): z ^= z >> 30; z *= 0xbf58476d1ce4e5b9;
//!           z ^= z >> 27; z *= 0x94d049bb133111eb;
//!           z ^= z >> 31; return z
//! ```
//!
//! Streams are derived by `combine(h, v) = mix64(h ^ (v * 0x9e3779b97f4a7c15))`
//! and the k-th draw of a stream with base `h` is `mix64(h ^ (k * 0xa24baed4963ee407))`.
//! All arithmetic is wrapping u64, so the scheme is bit-exact on every
//! platform.

/// SplitMix64 finalizer.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const DERIVE_MUL: u64 = 0x9e37_79b9_7f4a_7c15;
const DRAW_MUL: u64 = 0xa24b_aed4_963e_e407;

/// A stateless, splittable random stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rng {
    base: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { base: mix64(seed) }
    }

    /// Derive an independent child stream from an integer tag.
    #[inline]
    pub fn derive(&self, tag: u64) -> Rng {
        Rng {
            base: mix64(self.base ^ tag.wrapping_mul(DERIVE_MUL)),
        }
    }

    /// Derive a child stream from a string tag (e.g. a parameter name).
    pub fn derive_str(&self, tag: &str) -> Rng {
        let mut h = self.base ^ 0xcbf2_9ce4_8422_2325;
        for &b in tag.as_bytes() {
            h = mix64(h ^ (b as u64).wrapping_mul(DERIVE_MUL));
        }
        Rng { base: mix64(h) }
    }

    /// The k-th raw 64-bit draw of this stream.
    #[inline]
    pub fn u64_at(&self, k: u64) -> u64 {
        mix64(self.base ^ k.wrapping_mul(DRAW_MUL))
    }

    /// Uniform in [0, 1) with 53-bit resolution.
    #[inline]
    pub fn f64_at(&self, k: u64) -> f64 {
        (self.u64_at(k) >> 11) as f64 * (1.0 / 9_007_199_254_740_992.0)
    }

    /// Uniform in [lo, hi).
    #[inline]
    pub fn range_at(&self, k: u64, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.f64_at(k)
    }

    /// Uniform integer in [0, n) by 128-bit multiply (no modulo bias worth
    /// caring about at these sizes).
    #[inline]
    pub fn index_at(&self, k: u64, n: usize) -> usize {
        ((self.u64_at(k) as u128 * n as u128) >> 64) as usize
    }

    /// Approximate standard normal from 12 uniforms (Irwin-Hall).
    ///
    /// Uses only +,*,-, so it is bit-exact across platforms; used by the
    /// degradation pipeline where cross-platform goldens matter.
    #[inline]
    pub fn gauss12_at(&self, k: u64) -> f64 {
        let s = self.derive(k);
        let mut acc = 0.0;
        for i in 0..12u64 {
            acc += s.f64_at(i);
        }
        acc - 6.0
    }

    /// Standard normal via Box-Muller. Higher quality tails than
    /// [`Rng::gauss12_at`]; used for training noise where only same-platform
    /// determinism is required.
    #[inline]
    pub fn normal_at(&self, k: u64) -> f64 {
        let u1 = ((self.u64_at(2 * k) >> 11) as f64 + 1.0) * (1.0 / 9_007_199_254_740_992.0);
        let u2 = self.f64_at(2 * k + 1);
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Fill a buffer with standard normal draws (Box-Muller).
    pub fn fill_normal(&self, out: &mut [f32]) {
        for (i, v) in out.iter_mut().enumerate() {
            *v = self.normal_at(i as u64) as f32;
        }
    }
}

/// Deterministic exp for the degradation pipeline's Gaussian kernels.
///
/// `exp` from the platform libm is not bit-stable across OSes, so the
/// cross-platform paths use this fixed polynomial instead: range-reduce
/// x = k*ln2 + r with |r| <= ln2/2, evaluate a degree-11 Taylor polynomial
/// for e^r in fixed order, scale by 2^k. Accurate to ~1e-15 relative.
pub fn exp_det(x: f64) -> f64 {
    if x < -700.0 {
        return 0.0;
    }
    if x > 700.0 {
        return f64::INFINITY;
    }
    const LN2: f64 = std::f64::consts::LN_2;
    let k = (x / LN2).round();
    let r = x - k * LN2;
    // Taylor series of e^r, Horner form, fixed evaluation order.
    let mut p = 1.0 / 39_916_800.0; // 1/11!
    for inv in [
        1.0 / 3_628_800.0,
        1.0 / 362_880.0,
        1.0 / 40_320.0,
        1.0 / 5_040.0,
        1.0 / 720.0,
        1.0 / 120.0,
        1.0 / 24.0,
        1.0 / 6.0,
        0.5,
        1.0,
        1.0,
    ] {
        p = p * r + inv;
    }
    // 2^k via exponent manipulation (k is integral and in range).
    let two_k = f64::from_bits(((k as i64 + 1023) as u64) << 52);
    p * two_k
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn draws_are_deterministic() {
        let a = Rng::new(42).derive(3);
        let b = Rng::new(42).derive(3);
        for k in 0..16 {
            assert_eq!(a.u64_at(k), b.u64_at(k));
        }
    }

    #[test]
    fn streams_are_decorrelated() {
        let r = Rng::new(7);
        let a = r.derive(0);
        let b = r.derive(1);
        let hits = (0..256).filter(|&k| a.u64_at(k) == b.u64_at(k)).count();
        assert_eq!(hits, 0);
    }

    #[test]
    fn uniform_bounds_and_mean() {
        let r = Rng::new(123);
        let mut sum = 0.0;
        let n = 20_000;
        for k in 0..n {
            let v = r.f64_at(k);
            assert!((0.0..1.0).contains(&v));
            sum += v;
        }
        let mean = sum / n as f64;
        assert!((mean - 0.5).abs() < 0.01, "mean = {mean}");
    }

    #[test]
    fn gauss12_moments() {
        let r = Rng::new(99);
        let n = 20_000;
        let (mut s1, mut s2) = (0.0, 0.0);
        for k in 0..n {
            let v = r.gauss12_at(k);
            s1 += v;
            s2 += v * v;
        }
        let mean = s1 / n as f64;
        let var = s2 / n as f64 - mean * mean;
        assert!(mean.abs() < 0.02, "mean = {mean}");
        assert!((var - 1.0).abs() < 0.03, "var = {var}");
    }

    #[test]
    fn normal_moments() {
        let r = Rng::new(5);
        let n = 20_000;
        let (mut s1, mut s2) = (0.0, 0.0);
        for k in 0..n {
            let v = r.normal_at(k);
            s1 += v;
            s2 += v * v;
        }
        let mean = s1 / n as f64;
        let var = s2 / n as f64 - mean * mean;
        assert!(mean.abs() < 0.03, "mean = {mean}");
        assert!((var - 1.0).abs() < 0.05, "var = {var}");
    }

    #[test]
    fn exp_det_matches_std_exp() {
        for i in -450..=100 {
            let x = i as f64 * 0.1;
            let a = exp_det(x);
            let b = x.exp();
            let rel = (a - b).abs() / b.max(1e-300);
            assert!(rel < 1e-13, "x={x} a={a} b={b} rel={rel}");
        }
    }
}
