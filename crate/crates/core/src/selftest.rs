//! Fast invariant checks runnable from the CLI (`tadsr selftest`): schedule
//! algebra, residual duality, LoRA identity, the blur DC invariant, metric
//! oracles and the degradation goldens. Failures are reported, not thrown.

use crate::degrade::{degrade, gen_hq, pair_golden_hash, DegradationConfig};
use crate::losses::{vsd_gradient, Omega, VsdContext};
use crate::metrics::{hf_energy, psnr, ssim};
use crate::nets::{init_adapters, init_params, unet_forward, AdapterRef, Arch};
use crate::rng::Rng;
use crate::schedule::{
    add_noise, blur_sigma_for_t, make_schedule, map_timestep, x0_from_eps, TimestepMap,
};
use crate::tensor::Tensor;

pub struct CheckResult {
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

fn check(name: &'static str, f: impl FnOnce() -> Result<String, String>) -> CheckResult {
    match f() {
        Ok(detail) => CheckResult {
            name,
            pass: true,
            detail,
        },
        Err(detail) => CheckResult {
            name,
            pass: false,
            detail,
        },
    }
}

/// Golden hashes of (hq, lq) for eight fixed seeds under the default
/// degradation config; any change to the pipeline or RNG breaks these.
pub const DEGRADATION_GOLDENS: [(u64, &str); 8] = [
    (1, "e1eeb59ee09298d369f2cb4f9f4bd49a1273d8b7277d300c0f3b9a396099a69a"),
    (2, "6a12be03f030bb4d18f37f52254362bad242f063714393b42b93cd79ce814831"),
    (3, "5781af37161b112deaa8cbddebc63cd8fe792559bc2bf7674adfe28798557093"),
    (4, "2a68e62be77385c78a45d6ae0f6aa3ea0b85ab3f023ff6e520346e76e5092ebd"),
    (5, "ac4c8cdf23b8a106cd5d51a3d7b4b6741deed0312ac7da6b18c57d271610ac64"),
    (6, "06fe339ab6f57de78343ac74bd2aa45a3c5286161b631eaab92e10635c28a934"),
    (7, "db5f2ffc82793d0683d0e8cc31f0b2aab9850441df58ee18c22e5453ebbd085e"),
    (8, "97b07f130ac31911274983b32bae320ef3353832bbddd61e802524ae4e962a15"),
];

pub fn run_all() -> Vec<CheckResult> {
    vec![
        check_schedule_algebra(),
        check_vsd_duality(),
        check_lora_identity(),
        check_blur_dc(),
        check_metric_oracles(),
        check_degradation_goldens(),
    ]
}

fn check_schedule_algebra() -> CheckResult {
    check("schedule_algebra", || {
        let s = make_schedule(1000, 1e-4, 0.02).map_err(|e| e.to_string())?;
        let mut worst_vp = 0.0f64;
        for t in 0..s.len() {
            worst_vp = worst_vp.max((s.alpha[t] * s.alpha[t] + s.beta[t] * s.beta[t] - 1.0).abs());
        }
        if worst_vp >= 1e-6 {
            return Err(format!("variance preservation violated: {worst_vp:e}"));
        }
        let rng = Rng::new(1);
        let mut worst_rt = 0.0f32;
        for i in 0..20u64 {
            let z0 = Tensor::randn(&[4, 6, 6], 1.0, &rng.derive(2 * i));
            let eps = Tensor::randn(&[4, 6, 6], 1.0, &rng.derive(2 * i + 1));
            let t = (i as usize * 49) % 1000;
            let z_t = add_noise(&z0, t, &eps, &s).map_err(|e| e.to_string())?;
            let rec = x0_from_eps(&z_t, t, &eps, &s).map_err(|e| e.to_string())?;
            worst_rt = worst_rt.max(rec.max_abs_diff(&z0));
        }
        if worst_rt >= 1e-4 {
            return Err(format!("roundtrip error {worst_rt:e}"));
        }
        let m = TimestepMap::default();
        if map_timestep(500, &m).map_err(|e| e.to_string())? != 300 {
            return Err("timestep map arithmetic broken".into());
        }
        Ok(format!("vp err {worst_vp:.1e}, roundtrip err {worst_rt:.1e}"))
    })
}

fn tiny_vsd_store(noise_b: bool) -> crate::params::ParamStore {
    let arch = Arch::tiny();
    let mut store = init_params(&arch, 4242).unwrap();
    init_adapters(&mut store, "teacher.", "phi.adapt.", 4243).unwrap();
    if noise_b {
        let rng = Rng::new(4244);
        for name in store.names_with_prefix("phi.adapt.") {
            if name.ends_with(".b") {
                let shape = store.get(&name).unwrap().shape().to_vec();
                store
                    .set(&name, Tensor::randn(&shape, 0.1, &rng.derive_str(&name)))
                    .unwrap();
            }
        }
    }
    store
}

fn check_vsd_duality() -> CheckResult {
    check("vsd_duality", || {
        let store = tiny_vsd_store(true);
        let schedule = make_schedule(1000, 1e-4, 0.02).map_err(|e| e.to_string())?;
        let map = TimestepMap::default();
        let ctx = VsdContext::new(&store, &schedule, &map, Omega::Unit);
        let rng = Rng::new(5);
        let mut worst = 0.0f32;
        for (i, &t) in [20usize, 150, 400, 800, 980].iter().enumerate() {
            let z = Tensor::randn(&[4, 4, 4], 1.0, &rng.derive(2 * i as u64));
            let eps = Tensor::randn(&[4, 4, 4], 1.0, &rng.derive(2 * i as u64 + 1));
            let g = vsd_gradient(&z, t, &eps, &ctx).map_err(|e| e.to_string())?;
            let z_t = add_noise(&z, t, &eps, &schedule).map_err(|e| e.to_string())?;
            let psi = unet_forward(&z_t, t, &store, "teacher.", None).map_err(|e| e.to_string())?;
            let phi = unet_forward(
                &z_t,
                t,
                &store,
                "teacher.",
                Some(AdapterRef::new("phi.adapt.", store.meta())),
            )
            .map_err(|e| e.to_string())?;
            let x_psi = x0_from_eps(&z_t, t, &psi, &schedule).map_err(|e| e.to_string())?;
            let x_phi = x0_from_eps(&z_t, t, &phi, &schedule).map_err(|e| e.to_string())?;
            let alt = x_psi
                .sub(&x_phi)
                .unwrap()
                .scale(-(schedule.alpha[t] / schedule.beta[t]) as f32);
            worst = worst.max(g.max_abs_diff(&alt));
        }
        if worst >= 1e-5 {
            return Err(format!("eps/x0 residual mismatch {worst:e}"));
        }
        Ok(format!("max abs diff {worst:.1e}"))
    })
}

fn check_lora_identity() -> CheckResult {
    check("lora_zero_init_identity", || {
        let store = tiny_vsd_store(false);
        let z = Tensor::randn(&[4, 4, 4], 1.0, &Rng::new(6));
        let base = unet_forward(&z, 300, &store, "teacher.", None).map_err(|e| e.to_string())?;
        let adapted = unet_forward(
            &z,
            300,
            &store,
            "teacher.",
            Some(AdapterRef::new("phi.adapt.", store.meta())),
        )
        .map_err(|e| e.to_string())?;
        if base != adapted {
            return Err("adapted forward differs from base at B=0".into());
        }
        let schedule = make_schedule(1000, 1e-4, 0.02).map_err(|e| e.to_string())?;
        let map = TimestepMap::default();
        let ctx = VsdContext::new(&store, &schedule, &map, Omega::Unit);
        let eps = Tensor::randn(&[4, 4, 4], 1.0, &Rng::new(7));
        let g = vsd_gradient(&z, 300, &eps, &ctx).map_err(|e| e.to_string())?;
        if g.data().iter().any(|&v| v != 0.0) {
            return Err("distillation residual nonzero at adapter init".into());
        }
        Ok("bit-exact identity, residual exactly zero".into())
    })
}

fn check_blur_dc() -> CheckResult {
    check("blur_dc_invariance", || {
        let c1 = Tensor::full(&[3, 16, 16], 0.9);
        let c2 = Tensor::full(&[3, 16, 16], 0.4);
        let want = (c1.data()[0] as f64 - c2.data()[0] as f64).powi(2);
        for t_s in [0usize, 300, 999] {
            let l = crate::losses::blurred_mse(&c1, &c2, t_s).map_err(|e| e.to_string())?;
            if (l - want).abs() >= 1e-8 {
                return Err(format!("t_s={t_s}: constant-image loss {l} != {want}"));
            }
        }
        let (s0, k0) = blur_sigma_for_t(0);
        let (s1, k1) = blur_sigma_for_t(999);
        Ok(format!("DC exact; sigma {s0:.1}..{s1:.1}, kernels {k0}..{k1}"))
    })
}

fn check_metric_oracles() -> CheckResult {
    check("metric_oracles", || {
        let a = Tensor::full(&[3, 8, 8], 0.5);
        let b = Tensor::full(&[3, 8, 8], 0.6);
        let p = psnr(&a, &b).map_err(|e| e.to_string())?;
        if (p - 20.0).abs() >= 1e-4 {
            return Err(format!("psnr of 0.1 constant diff = {p}, want 20"));
        }
        let x = gen_hq(12, 16).map_err(|e| e.to_string())?;
        let s = ssim(&x, &x).map_err(|e| e.to_string())?;
        if (s - 1.0).abs() >= 1e-9 {
            return Err(format!("ssim(x,x) = {s}"));
        }
        // checkerboard Laplacian closed form: 64 a^2
        let amp = 0.05f32;
        let mut cb = Tensor::full(&[1, 12, 12], 0.5);
        for y in 0..12 {
            for xx in 0..12 {
                let sgn = if (y + xx) % 2 == 0 { 1.0 } else { -1.0 };
                cb.data_mut()[y * 12 + xx] += amp * sgn;
            }
        }
        let hf = hf_energy(&cb);
        let want = 64.0 * (amp as f64) * (amp as f64);
        if (hf - want).abs() / want >= 1e-4 {
            return Err(format!("hf energy {hf} vs closed form {want}"));
        }
        Ok("psnr/ssim/hf match closed forms".into())
    })
}

fn check_degradation_goldens() -> CheckResult {
    check("degradation_goldens", || {
        let cfg = DegradationConfig::default();
        for (seed, want) in DEGRADATION_GOLDENS {
            let hq = gen_hq(seed, 48).map_err(|e| e.to_string())?;
            let pair = degrade(&hq, &cfg, seed).map_err(|e| e.to_string())?;
            let got = pair_golden_hash(&pair);
            if got != want {
                return Err(format!("seed {seed}: hash {got} != golden {want}"));
            }
        }
        Ok("8/8 golden hashes match".into())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_selftests_pass() {
        for r in run_all() {
            assert!(r.pass, "{}: {}", r.name, r.detail);
        }
    }
}
