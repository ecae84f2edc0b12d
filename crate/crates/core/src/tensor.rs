//! Dense f32 tensors used for parameters, images and latents.
//!
//! Shapes follow the C×H×W convention for images/latents. Pixel values live
//! in [0, 1]. Heavier differentiable math runs in the f64 graph of
//! [`crate::autodiff`]; this type is the storage and data-pipeline plane.

use crate::error::{Error, Result};
use crate::rng::{exp_det, Rng};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], v: f32) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {:?} wants {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Standard normal entries scaled by `std`, deterministic in the stream.
    pub fn randn(shape: &[usize], std: f32, rng: &Rng) -> Self {
        let mut t = Tensor::zeros(shape);
        rng.fill_normal(&mut t.data);
        for v in &mut t.data {
            *v *= std;
        }
        t
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Channels of a C×H×W tensor.
    pub fn channels(&self) -> usize {
        self.shape[0]
    }

    pub fn height(&self) -> usize {
        self.shape[self.shape.len() - 2]
    }

    pub fn width(&self) -> usize {
        self.shape[self.shape.len() - 1]
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        let (h, w) = (self.height(), self.width());
        self.data[(c * h + y) * w + x]
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn clamp01(&self) -> Tensor {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    pub fn scale(&self, k: f32) -> Tensor {
        self.map(|v| v * k)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch(format!(
                "add: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch(format!(
                "sub: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    pub fn mean_abs_diff(&self, other: &Tensor) -> f64 {
        let s: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs() as f64)
            .sum();
        s / self.data.len() as f64
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    pub fn std(&self) -> f64 {
        let m = self.mean();
        let v = self
            .data
            .iter()
            .map(|&x| {
                let d = x as f64 - m;
                d * d
            })
            .sum::<f64>()
            / self.data.len() as f64;
        v.sqrt()
    }
}

/// Bilinear resize of a C×H×W tensor with the half-pixel convention
/// (`src = (dst + 0.5) * in/out - 0.5`, edges clamped). Only +,-,*,/ are
/// used, so the result is bit-exact across platforms.
pub fn resize_bilinear(t: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let (c, h, w) = (t.channels(), t.height(), t.width());
    if out_h == h && out_w == w {
        return t.clone();
    }
    let mut out = Tensor::zeros(&[c, out_h, out_w]);
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    // Precompute the x-axis sampling lattice once.
    let xtaps: Vec<(usize, usize, f64)> = (0..out_w)
        .map(|ox| {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).max(0.0);
            let x0 = (fx.floor() as usize).min(w - 1);
            let x1 = (x0 + 1).min(w - 1);
            (x0, x1, fx - x0 as f64)
        })
        .collect();
    for ch in 0..c {
        for oy in 0..out_h {
            let fy = ((oy as f64 + 0.5) * sy - 0.5).max(0.0);
            let y0 = (fy.floor() as usize).min(h - 1);
            let y1 = (y0 + 1).min(h - 1);
            let wy = fy - y0 as f64;
            for (ox, &(x0, x1, wx)) in xtaps.iter().enumerate() {
                let p00 = t.at(ch, y0, x0) as f64;
                let p01 = t.at(ch, y0, x1) as f64;
                let p10 = t.at(ch, y1, x0) as f64;
                let p11 = t.at(ch, y1, x1) as f64;
                let top = p00 + (p01 - p00) * wx;
                let bot = p10 + (p11 - p10) * wx;
                out.data[(ch * out_h + oy) * out_w + ox] = (top + (bot - top) * wy) as f32;
            }
        }
    }
    out
}

/// Normalized 1-D Gaussian kernel truncated at 3σ (odd length 2*ceil(3σ)+1).
/// Uses the deterministic exp so kernels are platform-stable.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let r = (3.0 * sigma).ceil() as i64;
    let inv = 1.0 / (2.0 * sigma * sigma);
    let mut k: Vec<f64> = (-r..=r).map(|j| exp_det(-(j * j) as f64 * inv)).collect();
    let s: f64 = k.iter().sum();
    for v in &mut k {
        *v /= s;
    }
    k
}

#[inline]
pub(crate) fn reflect(i: i64, n: i64) -> usize {
    // np.pad "reflect": no edge repetition. Valid for |overshoot| < n.
    let j = if i < 0 {
        -i
    } else if i >= n {
        2 * n - 2 - i
    } else {
        i
    };
    j as usize
}

/// Separable Gaussian blur with reflect padding (same output size).
pub fn blur_gaussian(t: &Tensor, sigma: f64) -> Tensor {
    if sigma <= 0.0 {
        return t.clone();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let (c, h, w) = (t.channels(), t.height(), t.width());
    let mut tmp = vec![0.0f64; c * h * w];
    // Horizontal pass.
    for ch in 0..c {
        for y in 0..h {
            let base = (ch * h + y) * w;
            for x in 0..w as i64 {
                let mut acc = 0.0;
                for (j, &kv) in k.iter().enumerate() {
                    let xi = reflect(x + j as i64 - r, w as i64);
                    acc += kv * t.data[base + xi] as f64;
                }
                tmp[base + x as usize] = acc;
            }
        }
    }
    // Vertical pass.
    let mut out = Tensor::zeros(&[c, h, w]);
    for ch in 0..c {
        for y in 0..h as i64 {
            for x in 0..w {
                let mut acc = 0.0;
                for (j, &kv) in k.iter().enumerate() {
                    let yi = reflect(y + j as i64 - r, h as i64);
                    acc += kv * tmp[(ch * h + yi) * w + x];
                }
                out.data[(ch * h + y as usize) * w + x] = acc as f32;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_numel() {
        assert!(Tensor::from_vec(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::from_vec(&[2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn resize_identity_when_same_dims() {
        let t = Tensor::randn(&[3, 8, 8], 1.0, &Rng::new(1));
        let r = resize_bilinear(&t, 8, 8);
        assert_eq!(t, r);
    }

    #[test]
    fn resize_constant_stays_constant() {
        let t = Tensor::full(&[2, 6, 6], 0.37);
        let r = resize_bilinear(&t, 17, 5);
        for &v in r.data() {
            assert!((v - 0.37).abs() < 1e-6);
        }
    }

    #[test]
    fn resize_downsample_averages() {
        // 2x2 -> 1x1 with half-pixel convention samples the exact center.
        let t = Tensor::from_vec(&[1, 2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let r = resize_bilinear(&t, 1, 1);
        assert!((r.data()[0] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn gaussian_kernel_normalized_and_sized() {
        for &(sigma, len) in &[(0.1, 3), (1.0, 7), (3.0, 19)] {
            let k = gaussian_kernel(sigma);
            assert_eq!(k.len(), len, "sigma={sigma}");
            let s: f64 = k.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn blur_preserves_constants() {
        let t = Tensor::full(&[1, 9, 9], 0.73);
        let b = blur_gaussian(&t, 2.0);
        for &v in b.data() {
            assert!((v - 0.73).abs() < 1e-6);
        }
    }

    #[test]
    fn blur_reduces_variance() {
        let t = Tensor::randn(&[1, 16, 16], 1.0, &Rng::new(3));
        let b = blur_gaussian(&t, 1.5);
        assert!(b.std() < t.std() * 0.7);
    }

    #[test]
    fn reflect_indexing() {
        assert_eq!(reflect(-1, 5), 1);
        assert_eq!(reflect(-2, 5), 2);
        assert_eq!(reflect(0, 5), 0);
        assert_eq!(reflect(4, 5), 4);
        assert_eq!(reflect(5, 5), 3);
        assert_eq!(reflect(6, 5), 2);
    }
}
