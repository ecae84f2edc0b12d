//! Diffusion-time algebra: the variance-preserving noise schedule, the
//! forward noising process, eps <-> x0 conversions, the student->teacher
//! timestep map and the blur-width schedule for the reconstruction loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Precomputed per-timestep scale parameters of a T-step variance-preserving
/// diffusion: `z_t = alpha[t] * z0 + beta[t] * eps` with
/// `alpha[t]^2 + beta[t]^2 = 1`.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

impl NoiseSchedule {
    pub fn len(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty()
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.len() {
            return Err(Error::TimestepOutOfRange {
                t: t as i64,
                max: self.len() - 1,
            });
        }
        Ok(())
    }
}

/// Linear-beta DDPM construction: `b_i` interpolates `beta_start..beta_end`,
/// `alpha[t] = sqrt(prod_{i<=t} (1 - b_i))`, `beta[t] = sqrt(1 - alpha[t]^2)`.
pub fn make_schedule(t_count: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if t_count < 2 {
        return Err(Error::InvalidParam(format!(
            "schedule needs T >= 2, got {t_count}"
        )));
    }
    if !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
        return Err(Error::InvalidParam(format!(
            "need 0 < beta_start < beta_end < 1, got [{beta_start}, {beta_end}]"
        )));
    }
    let mut alpha = Vec::with_capacity(t_count);
    let mut beta = Vec::with_capacity(t_count);
    let mut prod = 1.0f64;
    for i in 0..t_count {
        let b = beta_start + (beta_end - beta_start) * i as f64 / (t_count - 1) as f64;
        prod *= 1.0 - b;
        let a = prod.sqrt();
        alpha.push(a);
        beta.push((1.0 - prod).sqrt());
    }
    Ok(NoiseSchedule { alpha, beta })
}

/// Forward process: `alpha[t] * z0 + beta[t] * eps`.
pub fn add_noise(z0: &Tensor, t: usize, eps: &Tensor, s: &NoiseSchedule) -> Result<Tensor> {
    s.check_t(t)?;
    if z0.shape() != eps.shape() {
        return Err(Error::ShapeMismatch(format!(
            "add_noise: z0 {:?} vs eps {:?}",
            z0.shape(),
            eps.shape()
        )));
    }
    let (a, b) = (s.alpha[t], s.beta[t]);
    let data = z0
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&z, &e)| (a * z as f64 + b * e as f64) as f32)
        .collect();
    Tensor::from_vec(z0.shape(), data)
}

const ALPHA_FLOOR: f64 = 1e-8;
const BETA_FLOOR: f64 = 1e-8;

/// Recover the clean latent from a noise prediction:
/// `(z_t - beta[t] * eps_hat) / alpha[t]`.
pub fn x0_from_eps(z_t: &Tensor, t: usize, eps_hat: &Tensor, s: &NoiseSchedule) -> Result<Tensor> {
    s.check_t(t)?;
    if z_t.shape() != eps_hat.shape() {
        return Err(Error::ShapeMismatch(format!(
            "x0_from_eps: z_t {:?} vs eps_hat {:?}",
            z_t.shape(),
            eps_hat.shape()
        )));
    }
    let (a, b) = (s.alpha[t], s.beta[t]);
    if a < ALPHA_FLOOR {
        return Err(Error::NumericalDomain(format!(
            "alpha[{t}] = {a:e} below {ALPHA_FLOOR:e}"
        )));
    }
    let data = z_t
        .data()
        .iter()
        .zip(eps_hat.data())
        .map(|(&z, &e)| ((z as f64 - b * e as f64) / a) as f32)
        .collect();
    Tensor::from_vec(z_t.shape(), data)
}

/// Recover the noise from a clean-latent prediction:
/// `(z_t - alpha[t] * x0_hat) / beta[t]`. Exact inverse of [`x0_from_eps`].
pub fn eps_from_x0(z_t: &Tensor, t: usize, x0_hat: &Tensor, s: &NoiseSchedule) -> Result<Tensor> {
    s.check_t(t)?;
    if z_t.shape() != x0_hat.shape() {
        return Err(Error::ShapeMismatch(format!(
            "eps_from_x0: z_t {:?} vs x0_hat {:?}",
            z_t.shape(),
            x0_hat.shape()
        )));
    }
    let (a, b) = (s.alpha[t], s.beta[t]);
    if b < BETA_FLOOR {
        return Err(Error::NumericalDomain(format!(
            "beta[{t}] = {b:e} below {BETA_FLOOR:e}"
        )));
    }
    let data = z_t
        .data()
        .iter()
        .zip(x0_hat.data())
        .map(|(&z, &x)| ((z as f64 - a * x as f64) / b) as f32)
        .collect();
    Tensor::from_vec(z_t.shape(), data)
}

/// Affine map from the student's conditioning timestep to the distillation
/// timestep: `clamp(round(lam * t_s + gamma), t_min, t_max)`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TimestepMap {
    pub lam: f64,
    pub gamma: f64,
    pub t_min: usize,
    pub t_max: usize,
}

impl Default for TimestepMap {
    fn default() -> Self {
        // The map keeps t_v in a band where both alpha and beta are bounded
        // away from zero, so eps<->x0 conversions stay well conditioned.
        TimestepMap {
            lam: 0.4,
            gamma: 100.0,
            t_min: 20,
            t_max: 980,
        }
    }
}

impl TimestepMap {
    pub fn validate(&self, t_count: usize) -> Result<()> {
        if self.lam <= 0.0 {
            return Err(Error::InvalidParam(format!("lam must be > 0, got {}", self.lam)));
        }
        if self.t_min >= self.t_max || self.t_max > t_count - 1 {
            return Err(Error::InvalidParam(format!(
                "need 0 <= t_min < t_max <= {}, got [{}, {}]",
                t_count - 1,
                self.t_min,
                self.t_max
            )));
        }
        Ok(())
    }
}

pub const TS_MAX: usize = 999;

/// Map a student timestep (in [0, 999]) to the teacher timestep. Rounding is
/// half-away-from-zero, then the result is clamped to [t_min, t_max].
pub fn map_timestep(t_s: usize, m: &TimestepMap) -> Result<usize> {
    if t_s > TS_MAX {
        return Err(Error::TimestepOutOfRange {
            t: t_s as i64,
            max: TS_MAX,
        });
    }
    let raw = (m.lam * t_s as f64 + m.gamma).round();
    let raw = raw.max(0.0) as usize;
    Ok(raw.clamp(m.t_min, m.t_max))
}

pub const BLUR_SIGMA_MIN: f64 = 0.1;
pub const BLUR_SIGMA_MAX: f64 = 3.0;

/// Blur width for the reconstruction loss: sigma grows linearly in t_s so
/// large conditioning timesteps supervise only low frequencies. Returns
/// (sigma, kernel_size) with kernel_size = 2*ceil(3*sigma)+1.
pub fn blur_sigma_for_t(t_s: usize) -> (f64, usize) {
    blur_sigma_in(t_s, BLUR_SIGMA_MIN, BLUR_SIGMA_MAX)
}

/// Same as [`blur_sigma_for_t`] with configurable endpoints.
pub fn blur_sigma_in(t_s: usize, sigma_min: f64, sigma_max: f64) -> (f64, usize) {
    let sigma = sigma_min + (sigma_max - sigma_min) * t_s as f64 / TS_MAX as f64;
    let k = 2 * (3.0 * sigma).ceil() as usize + 1;
    (sigma, k)
}
