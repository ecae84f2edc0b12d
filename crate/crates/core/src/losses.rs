//! Training objectives: the score-distillation gradient and its
//! timestep-mapped variant, the blur-scheduled reconstruction MSE, the
//! frozen-probe perceptual surrogate, the combined student loss and the
//! critic's diffusion loss.
//!
//! The distillation residual `g = omega(t) * (eps_teacher - eps_critic)` is
//! treated as a constant: the trained surrogate is `<stop(g), z_hat> / numel`
//! whose gradient w.r.t. `z_hat` is exactly `g / numel`. Neither the teacher
//! nor the critic receives gradients from it, and the critic's diffusion
//! loss sees a detached `z_hat` — both contracts are structural here
//! (frozen graph leaves), not a matter of zeroing gradients afterwards.

use std::collections::HashSet;

use crate::autodiff::{Graph, Var};
use crate::degrade::ImagePair;
use crate::error::{Error, Result};
use crate::nets::{
    decoder_forward_g, probe_features_g, student_role, tae_forward_g, unet_forward_g, AdapterRef,
    Bind, GradStore,
};
use crate::params::ParamStore;
use crate::schedule::{add_noise, blur_sigma_in, map_timestep, NoiseSchedule, TimestepMap};
use crate::tensor::{gaussian_kernel, resize_bilinear, Tensor};

/// Weighting omega(t) of the distillation residual.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Omega {
    /// omega(t) = 1.
    Unit,
    /// omega(t) = beta_t^2 (SNR-flavored ablation option).
    SnrBeta2,
}

impl Omega {
    pub fn parse(s: &str) -> Result<Omega> {
        match s {
            "unit" => Ok(Omega::Unit),
            "snr_beta2" => Ok(Omega::SnrBeta2),
            other => Err(Error::Config(format!(
                "unknown omega weighting '{other}' (expected 'unit' or 'snr_beta2')"
            ))),
        }
    }

    pub fn weight(&self, s: &NoiseSchedule, t: usize) -> f64 {
        match self {
            Omega::Unit => 1.0,
            Omega::SnrBeta2 => s.beta[t] * s.beta[t],
        }
    }
}

/// Frozen nets and schedule needed to evaluate the distillation residual.
/// The critic shares the teacher's base weights (it *is* the teacher plus
/// low-rank factors under `phi_prefix`), so the "frozen copy of the teacher"
/// invariant holds by construction.
#[derive(Clone, Copy)]
pub struct VsdContext<'a> {
    pub store: &'a ParamStore,
    pub teacher_base: &'a str,
    pub phi_prefix: Option<&'a str>,
    pub schedule: &'a NoiseSchedule,
    pub omega: Omega,
    /// Valid noising band (the timestep map's clamp bounds).
    pub t_band: (usize, usize),
}

impl<'a> VsdContext<'a> {
    pub fn new(
        store: &'a ParamStore,
        schedule: &'a NoiseSchedule,
        map: &TimestepMap,
        omega: Omega,
    ) -> Self {
        VsdContext {
            store,
            teacher_base: "teacher.",
            phi_prefix: Some("phi.adapt."),
            schedule,
            omega,
            t_band: (map.t_min, map.t_max),
        }
    }

    fn check_band(&self, t: usize) -> Result<()> {
        if t < self.t_band.0 || t > self.t_band.1 {
            return Err(Error::InvalidParam(format!(
                "t={t} outside clamp band [{}, {}]",
                self.t_band.0, self.t_band.1
            )));
        }
        Ok(())
    }

    fn phi_adapters(&self) -> Option<AdapterRef<'a>> {
        self.phi_prefix
            .map(|p| AdapterRef::new(p, self.store.meta()))
    }
}

/// One frozen UNet evaluation in f64 (no f32 rounding of the input).
fn unet_f64(
    store: &ParamStore,
    base: &str,
    adapters: Option<AdapterRef>,
    shape: &[usize],
    z: Vec<f64>,
    t: usize,
) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let mut bind = Bind::frozen(store);
    let zv = g.leaf_f64(shape, z, false);
    let out = unet_forward_g(&mut g, &mut bind, store.meta(), base, adapters, zv, t)?;
    Ok(g.value(out).to_vec())
}

fn residual_f64(
    ctx: &VsdContext,
    shape: &[usize],
    z_hat: &[f64],
    t: usize,
    eps: &Tensor,
) -> Result<Vec<f64>> {
    let (a, b) = (ctx.schedule.alpha[t], ctx.schedule.beta[t]);
    let z_t: Vec<f64> = z_hat
        .iter()
        .zip(eps.data())
        .map(|(&z, &e)| a * z + b * e as f64)
        .collect();
    let psi = unet_f64(ctx.store, ctx.teacher_base, None, shape, z_t.clone(), t)?;
    let phi = unet_f64(ctx.store, ctx.teacher_base, ctx.phi_adapters(), shape, z_t, t)?;
    let w = ctx.omega.weight(ctx.schedule, t);
    Ok(psi.iter().zip(&phi).map(|(&p, &q)| w * (p - q)).collect())
}

/// The score-distillation residual `omega(t) * (eps_teacher - eps_critic)`
/// evaluated on `add_noise(z_hat, t, eps)`. The caller treats it as a
/// constant; the surrogate loss `<stop(g), z_hat>/numel` has gradient
/// exactly `g/numel` w.r.t. `z_hat`.
pub fn vsd_gradient(z_hat: &Tensor, t: usize, eps: &Tensor, ctx: &VsdContext) -> Result<Tensor> {
    ctx.check_band(t)?;
    if z_hat.shape() != eps.shape() {
        return Err(Error::ShapeMismatch(format!(
            "vsd_gradient: z_hat {:?} vs eps {:?}",
            z_hat.shape(),
            eps.shape()
        )));
    }
    let z64: Vec<f64> = z_hat.data().iter().map(|&v| v as f64).collect();
    let g = residual_f64(ctx, z_hat.shape(), &z64, t, eps)?;
    Tensor::from_vec(z_hat.shape(), g.iter().map(|&v| v as f32).collect())
}

/// Standalone evaluation of the timestep-mapped distillation loss.
#[derive(Debug, Clone)]
pub struct TavsdOut {
    pub t_v: usize,
    /// Surrogate value `<g, z_hat>/numel`; sign-free, only its gradient is
    /// meaningful.
    pub surrogate: f64,
    /// The residual g; `d surrogate / d z_hat = g / numel`.
    pub residual: Tensor,
}

pub fn tavsd_loss(
    z_hat: &Tensor,
    t_s: usize,
    m: &TimestepMap,
    ctx: &VsdContext,
    eps: &Tensor,
) -> Result<TavsdOut> {
    let t_v = map_timestep(t_s, m)?;
    let residual = vsd_gradient(z_hat, t_v, eps, ctx)?;
    let n = z_hat.numel() as f64;
    let surrogate = z_hat
        .data()
        .iter()
        .zip(residual.data())
        .map(|(&z, &g)| z as f64 * g as f64)
        .sum::<f64>()
        / n;
    Ok(TavsdOut {
        t_v,
        surrogate,
        residual,
    })
}

/// Graph builder: Gaussian-blur both images with the t_s-scheduled kernel
/// (reflect padding, kernel normalized to sum 1) and take the MSE.
pub fn blurred_mse_g(g: &mut Graph, a: Var, b: Var, t_s: usize, blur_range: (f64, f64)) -> Var {
    let (sigma, _) = blur_sigma_in(t_s, blur_range.0, blur_range.1);
    let kernel = gaussian_kernel(sigma);
    let ba = g.blur(a, &kernel);
    let bb = g.blur(b, &kernel);
    g.mse(ba, bb)
}

/// Blur-scheduled MSE on plain tensors (default blur endpoints).
pub fn blurred_mse(x_hat: &Tensor, x_h: &Tensor, t_s: usize) -> Result<f64> {
    blurred_mse_in(
        x_hat,
        x_h,
        t_s,
        (crate::schedule::BLUR_SIGMA_MIN, crate::schedule::BLUR_SIGMA_MAX),
    )
}

pub fn blurred_mse_in(
    x_hat: &Tensor,
    x_h: &Tensor,
    t_s: usize,
    blur_range: (f64, f64),
) -> Result<f64> {
    if x_hat.shape() != x_h.shape() {
        return Err(Error::ShapeMismatch(format!(
            "blurred_mse: {:?} vs {:?}",
            x_hat.shape(),
            x_h.shape()
        )));
    }
    let mut g = Graph::new();
    let a = g.leaf(x_hat, false);
    let b = g.leaf(x_h, false);
    let l = blurred_mse_g(&mut g, a, b, t_s, blur_range);
    Ok(g.scalar(l))
}

/// Graph builder: mean absolute difference of the frozen probe's features,
/// averaged over its three layers.
pub fn perceptual_g(g: &mut Graph, bind: &mut Bind, a: Var, b: Var) -> Result<Var> {
    let fa = probe_features_g(g, bind, a)?;
    let fb = probe_features_g(g, bind, b)?;
    let n = fa.len();
    let mut acc: Option<Var> = None;
    for (va, vb) in fa.into_iter().zip(fb) {
        let d = g.mean_abs_diff(va, vb);
        acc = Some(match acc {
            None => d,
            Some(prev) => g.add(prev, d),
        });
    }
    Ok(g.scale(acc.expect("probe has layers"), 1.0 / n as f64))
}

/// Perceptual surrogate on plain tensors.
pub fn perceptual(x_hat: &Tensor, x_h: &Tensor, store: &ParamStore) -> Result<f64> {
    if x_hat.shape() != x_h.shape() {
        return Err(Error::ShapeMismatch(format!(
            "perceptual: {:?} vs {:?}",
            x_hat.shape(),
            x_h.shape()
        )));
    }
    let mut g = Graph::new();
    let mut bind = Bind::frozen(store);
    let a = g.leaf(x_hat, false);
    let b = g.leaf(x_h, false);
    let l = perceptual_g(&mut g, &mut bind, a, b)?;
    Ok(g.scalar(l))
}

/// Hyperparameters of the combined student objective.
#[derive(Debug, Clone)]
pub struct StudentLossCfg {
    pub map: TimestepMap,
    pub omega: Omega,
    pub lambda_tavsd: f64,
    pub lambda_percep: f64,
    pub blur_range: (f64, f64),
}

impl Default for StudentLossCfg {
    fn default() -> Self {
        StudentLossCfg {
            map: TimestepMap::default(),
            omega: Omega::Unit,
            lambda_tavsd: 1.0,
            lambda_percep: 1.0,
            blur_range: (crate::schedule::BLUR_SIGMA_MIN, crate::schedule::BLUR_SIGMA_MAX),
        }
    }
}

/// How the distillation residual is obtained inside [`student_loss`].
///
/// Training recomputes it at the current parameters; finite-difference
/// checks must hold it fixed, because the loss differentiates through
/// `<stop(g), z_hat>` with g constant.
pub enum ResidualMode<'a> {
    Recompute,
    Frozen(&'a Tensor),
}

#[derive(Debug, Clone)]
pub struct StudentLossOut {
    pub total: f64,
    pub l_rec: f64,
    pub l_blur: f64,
    pub l_percep: f64,
    /// Surrogate value; sign-free by construction.
    pub surrogate: f64,
    pub g_mean_abs: f64,
    pub t_v: usize,
    pub z_hat: Tensor,
    /// The residual used for the surrogate (None when lambda_tavsd = 0).
    pub residual: Option<Tensor>,
    pub grads: GradStore,
}

/// The full student objective on one LQ/HQ pair:
/// `L = blurred_mse + lambda_percep * perceptual + lambda_tavsd * surrogate`,
/// with the reconstruction computed on the unclamped decode of
/// `z_hat = UNet(TAE(upsample4(lq), t_s), t_s)`.
#[allow(clippy::too_many_arguments)]
pub fn student_loss(
    store: &ParamStore,
    trainable: &HashSet<String>,
    pair: &ImagePair,
    t_s: usize,
    eps: &Tensor,
    cfg: &StudentLossCfg,
    schedule: &NoiseSchedule,
    residual_mode: ResidualMode,
    compute_grads: bool,
) -> Result<StudentLossOut> {
    let arch = store.meta();
    let up = resize_bilinear(&pair.lq, pair.lq.height() * 4, pair.lq.width() * 4);
    let (base, adapter_prefix) = student_role(store);
    let adapters = adapter_prefix.map(|p| AdapterRef::new(p, arch));

    let mut g = Graph::new();
    let mut bind = Bind::trainable(store, trainable);
    let xv = g.leaf(&up, false);
    let z_l = tae_forward_g(&mut g, &mut bind, arch, xv, Some(t_s))?;
    let z_hat = unet_forward_g(&mut g, &mut bind, arch, base, adapters, z_l, t_s)?;
    let x_hat = decoder_forward_g(&mut g, &mut bind, arch, z_hat)?;

    let x_h = g.leaf(&pair.hq, false);
    let l_blur = blurred_mse_g(&mut g, x_hat, x_h, t_s, cfg.blur_range);
    let l_percep = perceptual_g(&mut g, &mut bind, x_hat, x_h)?;
    let l_percep_w = g.scale(l_percep, cfg.lambda_percep);
    let l_rec = g.add(l_blur, l_percep_w);

    let t_v = map_timestep(t_s, &cfg.map)?;
    let mut g_mean_abs = 0.0;
    let mut residual_out: Option<Tensor> = None;
    let mut surrogate_var: Option<Var> = None;
    if cfg.lambda_tavsd != 0.0 || matches!(residual_mode, ResidualMode::Frozen(_)) {
        let residual: Vec<f64> = match residual_mode {
            ResidualMode::Frozen(r) => {
                if r.shape() != g.shape(z_hat) {
                    return Err(Error::ShapeMismatch(format!(
                        "frozen residual {:?} vs z_hat {:?}",
                        r.shape(),
                        g.shape(z_hat)
                    )));
                }
                r.data().iter().map(|&v| v as f64).collect()
            }
            ResidualMode::Recompute => {
                let ctx = VsdContext {
                    store,
                    teacher_base: "teacher.",
                    phi_prefix: Some("phi.adapt."),
                    schedule,
                    omega: cfg.omega,
                    t_band: (cfg.map.t_min, cfg.map.t_max),
                };
                let shape = g.shape(z_hat).to_vec();
                let z_vals = g.value(z_hat).to_vec();
                residual_f64(&ctx, &shape, &z_vals, t_v, eps)?
            }
        };
        g_mean_abs = residual.iter().map(|v| v.abs()).sum::<f64>() / residual.len() as f64;
        let shape = g.shape(z_hat).to_vec();
        residual_out = Some(
            Tensor::from_vec(&shape, residual.iter().map(|&v| v as f32).collect()).unwrap(),
        );
        let res_leaf = g.leaf_f64(&shape, residual, false);
        surrogate_var = Some(g.inner_mean(z_hat, res_leaf));
    }

    let total = match surrogate_var {
        Some(sur) => {
            let sur_w = g.scale(sur, cfg.lambda_tavsd);
            g.add(l_rec, sur_w)
        }
        None => l_rec,
    };

    if compute_grads {
        g.backward(total);
    }
    if !g.scalar(total).is_finite() {
        return Err(Error::NumericalDomain(format!(
            "student loss non-finite: blur={} percep={}",
            g.scalar(l_blur),
            g.scalar(l_percep)
        )));
    }
    Ok(StudentLossOut {
        total: g.scalar(total),
        l_rec: g.scalar(l_rec),
        l_blur: g.scalar(l_blur),
        l_percep: g.scalar(l_percep),
        surrogate: surrogate_var.map(|v| g.scalar(v)).unwrap_or(0.0),
        g_mean_abs,
        t_v,
        z_hat: g.to_tensor(z_hat),
        residual: residual_out,
        grads: if compute_grads {
            bind.grads(&g)
        } else {
            GradStore::new()
        },
    })
}

#[derive(Debug, Clone)]
pub struct LoraLossOut {
    pub loss: f64,
    pub grads: GradStore,
}

/// The critic's plain denoising objective on the detached student output:
/// `|| eps_phi(add_noise(z_hat, t, eps'); t) - eps' ||^2 / numel`. Gradients
/// flow only into the adapter factors; the student never sees this loss.
pub fn lora_diffusion_loss(
    store: &ParamStore,
    trainable: &HashSet<String>,
    z_hat_detached: &Tensor,
    t: usize,
    eps_prime: &Tensor,
    schedule: &NoiseSchedule,
    compute_grads: bool,
) -> Result<LoraLossOut> {
    let arch = store.meta();
    let z_t = add_noise(z_hat_detached, t, eps_prime, schedule)?;
    let mut g = Graph::new();
    let mut bind = Bind::trainable(store, trainable);
    let zv = g.leaf(&z_t, false);
    let adapters = Some(AdapterRef::new("phi.adapt.", arch));
    let pred = unet_forward_g(&mut g, &mut bind, arch, "teacher.", adapters, zv, t)?;
    let target = g.leaf(eps_prime, false);
    let loss = g.mse(pred, target);
    if compute_grads {
        g.backward(loss);
    }
    if !g.scalar(loss).is_finite() {
        return Err(Error::NumericalDomain("critic loss non-finite".into()));
    }
    Ok(LoraLossOut {
        loss: g.scalar(loss),
        grads: if compute_grads {
            bind.grads(&g)
        } else {
            GradStore::new()
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::degrade::{degrade, gen_hq, DegradationConfig};
    use crate::nets::{init_adapters, init_params, Arch};
    use crate::rng::Rng;
    use crate::schedule::make_schedule;

    fn tiny_setup(with_phi_b: bool) -> (ParamStore, NoiseSchedule) {
        let arch = Arch::tiny();
        let mut store = init_params(&arch, 100).unwrap();
        init_adapters(&mut store, "teacher.", "phi.adapt.", 101).unwrap();
        init_adapters(&mut store, "teacher.", "stu.adapt.", 102).unwrap();
        if with_phi_b {
            let rng = Rng::new(300);
            for name in store.names_with_prefix("phi.adapt.") {
                if name.ends_with(".b") {
                    let shape = store.get(&name).unwrap().shape().to_vec();
                    store
                        .set(&name, Tensor::randn(&shape, 0.1, &rng.derive_str(&name)))
                        .unwrap();
                }
            }
        }
        (store, make_schedule(1000, 1e-4, 0.02).unwrap())
    }

    fn tiny_pair(seed: u64) -> ImagePair {
        let hq = gen_hq(seed, 16).unwrap();
        degrade(&hq, &DegradationConfig::default(), seed).unwrap()
    }

    #[test]
    fn vsd_gradient_zero_at_adapter_init() {
        let (store, schedule) = tiny_setup(false);
        let map = TimestepMap::default();
        let ctx = VsdContext::new(&store, &schedule, &map, Omega::Unit);
        let z = Tensor::randn(&[4, 4, 4], 1.0, &Rng::new(1));
        let eps = Tensor::randn(&[4, 4, 4], 1.0, &Rng::new(2));
        let g = vsd_gradient(&z, 300, &eps, &ctx).unwrap();
        assert!(
            g.data().iter().all(|&v| v == 0.0),
            "residual must be exactly zero"
        );
        for t_s in [0usize, 250, 999] {
            let out = tavsd_loss(&z, t_s, &map, &ctx, &eps).unwrap();
            assert!(out.residual.data().iter().all(|&v| v == 0.0), "t_s={t_s}");
            assert_eq!(out.surrogate, 0.0);
        }
    }

    #[test]
    fn vsd_gradient_validates_band() {
        let (store, schedule) = tiny_setup(false);
        let map = TimestepMap::default();
        let ctx = VsdContext::new(&store, &schedule, &map, Omega::Unit);
        let z = Tensor::zeros(&[4, 4, 4]);
        assert!(vsd_gradient(&z, 10, &z, &ctx).is_err());
        assert!(vsd_gradient(&z, 990, &z, &ctx).is_err());
    }

    #[test]
    fn surrogate_gradient_matches_frozen_residual_fd() {
        // The surrogate is linear in z_hat once the residual is frozen, so
        // central differences recover g/numel exactly (to roundoff).
        let (store, schedule) = tiny_setup(true);
        let map = TimestepMap::default();
        let ctx = VsdContext::new(&store, &schedule, &map, Omega::Unit);
        let z = Tensor::randn(&[4, 4, 4], 1.0, &Rng::new(3));
        let eps = Tensor::randn(&[4, 4, 4], 1.0, &Rng::new(4));
        let t = 300usize;
        let g = vsd_gradient(&z, t, &eps, &ctx).unwrap();
        let n = z.numel() as f64;
        let surrogate = |zz: &Tensor| -> f64 {
            zz.data()
                .iter()
                .zip(g.data())
                .map(|(&a, &b)| a as f64 * b as f64)
                .sum::<f64>()
                / n
        };
        let pick = Rng::new(5);
        for k in 0..10 {
            let j = pick.index_at(k, z.numel());
            let mut plus = z.clone();
            plus.data_mut()[j] += 1e-3;
            let mut minus = z.clone();
            minus.data_mut()[j] -= 1e-3;
            let fd = (surrogate(&plus) - surrogate(&minus)) / 2e-3;
            let an = g.data()[j] as f64 / n;
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-12);
            assert!(rel < 1e-2, "coord {j}: fd={fd} an={an}");
        }
    }

    #[test]
    fn eps_residual_equals_scaled_latent_residual() {
        // Compute the residual both ways: directly in eps space, and as
        // -(alpha/beta) times the difference of the predicted clean latents.
        let (store, schedule) = tiny_setup(true);
        let map = TimestepMap::default();
        let ctx = VsdContext::new(&store, &schedule, &map, Omega::Unit);
        let rng = Rng::new(6);
        for (i, &t) in [20usize, 120, 300, 600, 980].iter().enumerate() {
            let z = Tensor::randn(&[4, 4, 4], 1.0, &rng.derive(2 * i as u64));
            let eps = Tensor::randn(&[4, 4, 4], 1.0, &rng.derive(2 * i as u64 + 1));
            let g = vsd_gradient(&z, t, &eps, &ctx).unwrap();

            let z_t = add_noise(&z, t, &eps, &schedule).unwrap();
            let psi = crate::nets::unet_forward(&z_t, t, &store, "teacher.", None).unwrap();
            let phi = crate::nets::unet_forward(
                &z_t,
                t,
                &store,
                "teacher.",
                Some(AdapterRef::new("phi.adapt.", store.meta())),
            )
            .unwrap();
            let x_psi = crate::schedule::x0_from_eps(&z_t, t, &psi, &schedule).unwrap();
            let x_phi = crate::schedule::x0_from_eps(&z_t, t, &phi, &schedule).unwrap();
            let scale = -(schedule.alpha[t] / schedule.beta[t]) as f32;
            let alt = x_psi.sub(&x_phi).unwrap().scale(scale);
            assert!(
                g.max_abs_diff(&alt) < 1e-5,
                "t={t}: max diff {}",
                g.max_abs_diff(&alt)
            );
        }
    }

    #[test]
    fn tavsd_degenerate_map_reduces_to_vsd() {
        let (store, schedule) = tiny_setup(true);
        let map = TimestepMap {
            lam: 1e-9,
            gamma: 300.0,
            t_min: 20,
            t_max: 980,
        };
        let ctx = VsdContext::new(&store, &schedule, &map, Omega::Unit);
        let z = Tensor::randn(&[4, 4, 4], 1.0, &Rng::new(7));
        let eps = Tensor::randn(&[4, 4, 4], 1.0, &Rng::new(8));
        let out = tavsd_loss(&z, 777, &map, &ctx, &eps).unwrap();
        assert_eq!(out.t_v, 300);
        let direct = vsd_gradient(&z, 300, &eps, &ctx).unwrap();
        assert_eq!(out.residual, direct);
    }

    #[test]
    fn blurred_mse_near_delta_at_ts0() {
        let rng = Rng::new(9);
        let a = Tensor::randn(&[3, 16, 16], 0.3, &rng.derive(0)).clamp01();
        let b = Tensor::randn(&[3, 16, 16], 0.3, &rng.derive(1)).clamp01();
        let blurred = blurred_mse(&a, &b, 0).unwrap();
        let mut g = Graph::new();
        let (av, bv) = (g.leaf(&a, false), g.leaf(&b, false));
        let plain = g.mse(av, bv);
        let plain = g.scalar(plain);
        let rel = (blurred - plain).abs() / plain;
        assert!(rel < 0.05, "blurred={blurred} plain={plain} rel={rel}");
    }

    #[test]
    fn blurred_mse_constant_images_dc_invariant() {
        let c1 = Tensor::full(&[3, 16, 16], 0.8);
        let c2 = Tensor::full(&[3, 16, 16], 0.3);
        // expected value from the stored f32 constants
        let want = (c1.data()[0] as f64 - c2.data()[0] as f64).powi(2);
        for t_s in [0usize, 123, 500, 999] {
            let l = blurred_mse(&c1, &c2, t_s).unwrap();
            assert!((l - want).abs() < 1e-8, "t_s={t_s}: {l} vs {want}");
        }
    }

    #[test]
    fn blurred_mse_suppresses_nyquist_checkerboard() {
        let base = gen_hq(77, 16).unwrap();
        let amp = 0.1f32;
        let mut shifted = base.clone();
        {
            let (h, w) = (shifted.height(), shifted.width());
            let data = shifted.data_mut();
            for c in 0..3 {
                for y in 0..h {
                    for x in 0..w {
                        let sgn = if (x + y) % 2 == 0 { 1.0 } else { -1.0 };
                        data[(c * h + y) * w + x] += sgn * amp;
                    }
                }
            }
        }
        let plain = {
            let mut g = Graph::new();
            let (a, b) = (g.leaf(&shifted, false), g.leaf(&base, false));
            let m = g.mse(a, b);
            g.scalar(m)
        };
        // plain MSE is a^2 up to f32 rounding of the perturbation
        assert!((plain - (amp as f64).powi(2)).abs() < 1e-5);
        let blurred = blurred_mse(&shifted, &base, 999).unwrap();
        assert!(blurred < 0.05 * plain, "blurred={blurred} plain={plain}");
    }

    #[test]
    fn perceptual_zero_symmetric_monotone() {
        let (store, _) = tiny_setup(false);
        let x = gen_hq(5, 16).unwrap();
        assert_eq!(perceptual(&x, &x, &store).unwrap(), 0.0);

        let noise = Tensor::randn(&[3, 16, 16], 1.0, &Rng::new(10));
        let mut prev = 0.0;
        for amp in [0.01f32, 0.05, 0.1] {
            let noisy_data: Vec<f32> = x
                .data()
                .iter()
                .zip(noise.data())
                .map(|(&v, &n)| v + amp * n)
                .collect();
            let noisy = Tensor::from_vec(&[3, 16, 16], noisy_data).unwrap();
            let d = perceptual(&x, &noisy, &store).unwrap();
            let d_rev = perceptual(&noisy, &x, &store).unwrap();
            assert!((d - d_rev).abs() < 1e-12, "symmetry");
            assert!(d > prev, "amp={amp}: {d} <= {prev}");
            prev = d;
        }
    }

    #[test]
    fn student_loss_reduces_to_reconstruction_at_adapter_init() {
        let (store, schedule) = tiny_setup(false);
        let pair = tiny_pair(21);
        let cfg = StudentLossCfg::default();
        let eps = Tensor::randn(&[4, 4, 4], 1.0, &Rng::new(12));
        let trainable = HashSet::new();
        let out = student_loss(
            &store,
            &trainable,
            &pair,
            350,
            &eps,
            &cfg,
            &schedule,
            ResidualMode::Recompute,
            false,
        )
        .unwrap();
        assert_eq!(out.total, out.l_rec, "surrogate must vanish with B=0");
        assert_eq!(out.g_mean_abs, 0.0);
        assert!(out.l_blur >= 0.0 && out.l_percep >= 0.0);
    }

    #[test]
    fn student_loss_fd_gradcheck() {
        // Central differences against backprop on trainable parameters. The
        // residual is frozen at the base point: the loss differentiates
        // through <stop(g), z_hat>, so the comparable scalar function holds
        // g fixed while parameters move.
        let (store, schedule) = tiny_setup(true);
        let pair = tiny_pair(31);
        let cfg = StudentLossCfg::default();
        let eps = Tensor::randn(&[4, 4, 4], 1.0, &Rng::new(13));
        let t_s = 420;

        let trainable: HashSet<String> = store
            .names_with_prefix("ae.enc.")
            .into_iter()
            .chain(store.names_with_prefix("stu.adapt."))
            .collect();

        let base = student_loss(
            &store,
            &trainable,
            &pair,
            t_s,
            &eps,
            &cfg,
            &schedule,
            ResidualMode::Recompute,
            true,
        )
        .unwrap();
        let frozen = base.residual.clone().expect("residual present");

        let eval = |s: &ParamStore| -> f64 {
            student_loss(
                s,
                &HashSet::new(),
                &pair,
                t_s,
                &eps,
                &cfg,
                &schedule,
                ResidualMode::Frozen(&frozen),
                false,
            )
            .unwrap()
            .total
        };

        let names: Vec<&String> = base.grads.keys().collect();
        let pick = Rng::new(14);
        let mut checked = 0;
        let mut attempts = 0;
        while checked < 10 && attempts < 500 {
            attempts += 1;
            let name = names[pick.index_at(attempts, names.len())];
            let gvec = &base.grads[name];
            let j = pick.index_at(7000 + attempts, gvec.len());
            let an = gvec[j];
            if an.abs() < 1e-4 {
                continue;
            }
            let orig = store.get(name).unwrap().data()[j];
            let mut plus = store.clone();
            plus.get_mut(name).unwrap().data_mut()[j] = orig + 1e-3;
            let mut minus = store.clone();
            minus.get_mut(name).unwrap().data_mut()[j] = orig - 1e-3;
            let fd = (eval(&plus) - eval(&minus)) / 2e-3;
            let rel = (fd - an).abs() / fd.abs().max(an.abs());
            assert!(rel < 1e-2, "{name}[{j}]: fd={fd} an={an} rel={rel}");
            checked += 1;
        }
        assert!(checked >= 10, "only {checked} coordinates checked");
    }

    #[test]
    fn lora_loss_positive_at_init_and_fd() {
        let (store, schedule) = tiny_setup(false);
        let z_hat = Tensor::randn(&[4, 4, 4], 0.5, &Rng::new(15));
        let eps_prime = Tensor::randn(&[4, 4, 4], 1.0, &Rng::new(16));
        let t = 250;
        let trainable: HashSet<String> =
            store.names_with_prefix("phi.adapt.").into_iter().collect();
        let out = lora_diffusion_loss(&store, &trainable, &z_hat, t, &eps_prime, &schedule, true)
            .unwrap();
        assert!(out.loss > 0.0 && out.loss.is_finite());
        // gradients flow only into adapters
        assert!(out.grads.keys().all(|k| k.starts_with("phi.adapt.")));
        // at B=0 only the .b factors receive gradient (dA carries a B factor)
        assert!(out.grads.keys().any(|k| k.ends_with(".b")));

        let eval = |s: &ParamStore| {
            lora_diffusion_loss(s, &HashSet::new(), &z_hat, t, &eps_prime, &schedule, false)
                .unwrap()
                .loss
        };
        let names: Vec<&String> = out.grads.keys().collect();
        let pick = Rng::new(17);
        let mut checked = 0;
        let mut attempts = 0;
        while checked < 10 && attempts < 500 {
            attempts += 1;
            let name = names[pick.index_at(attempts, names.len())];
            let gvec = &out.grads[name];
            let j = pick.index_at(9000 + attempts, gvec.len());
            let an = gvec[j];
            if an.abs() < 1e-4 {
                continue;
            }
            let orig = store.get(name).unwrap().data()[j];
            let mut plus = store.clone();
            plus.get_mut(name).unwrap().data_mut()[j] = orig + 1e-3;
            let mut minus = store.clone();
            minus.get_mut(name).unwrap().data_mut()[j] = orig - 1e-3;
            let fd = (eval(&plus) - eval(&minus)) / 2e-3;
            let rel = (fd - an).abs() / fd.abs().max(an.abs());
            assert!(rel < 1e-2, "{name}[{j}]: fd={fd} an={an}");
            checked += 1;
        }
        assert!(checked >= 10, "only {checked} coordinates checked");
    }

    #[test]
    fn stop_gradient_contracts_are_structural() {
        let (store, schedule) = tiny_setup(true);
        let pair = tiny_pair(41);
        let cfg = StudentLossCfg::default();
        let eps = Tensor::randn(&[4, 4, 4], 1.0, &Rng::new(18));
        // Mark even the critic's factors trainable: the student loss must
        // still produce no gradient for them, because the residual nets run
        // in separate frozen graphs.
        let trainable: HashSet<String> = store
            .names_with_prefix("ae.enc.")
            .into_iter()
            .chain(store.names_with_prefix("stu.adapt."))
            .chain(store.names_with_prefix("phi.adapt."))
            .collect();
        let out = student_loss(
            &store,
            &trainable,
            &pair,
            200,
            &eps,
            &cfg,
            &schedule,
            ResidualMode::Recompute,
            true,
        )
        .unwrap();
        assert!(out.grads.keys().any(|k| k.starts_with("ae.enc.")));
        assert!(out.grads.keys().any(|k| k.starts_with("stu.adapt.")));
        assert!(!out.grads.keys().any(|k| k.starts_with("phi.adapt.")));

        // Conversely, the critic loss on the detached output produces
        // gradients only for the critic's factors.
        let trainable_phi: HashSet<String> =
            store.names_with_prefix("phi.adapt.").into_iter().collect();
        let lora = lora_diffusion_loss(
            &store,
            &trainable_phi,
            &out.z_hat,
            300,
            &eps,
            &schedule,
            true,
        )
        .unwrap();
        assert!(lora.grads.keys().all(|k| k.starts_with("phi.adapt.")));
        assert!(!lora.grads.is_empty());
    }
}
