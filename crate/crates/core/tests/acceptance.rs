//! Acceptance suite: every criterion runs in order inside one test, prints
//! one line, and the test fails at the end if any hard criterion failed.
//! Trend criteria (9 and 10) are soft: a miss is reported for investigation
//! without failing the suite. Run with `--nocapture` to see the lines.
//!
//! The end-to-end criterion trains the full default pipeline; set
//! TADSR_ACCEPT_DIR to a persistent path to reuse its checkpoints across
//! invocations while iterating (stages are re-verified against the config
//! hash before reuse).

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::time::Instant;

use tadsr_core::config::RunConfig;
use tadsr_core::degrade::{degrade, gen_hq, pair_golden_hash, DegradationConfig};
use tadsr_core::losses::{
    blurred_mse, lora_diffusion_loss, student_loss, vsd_gradient, Omega, ResidualMode,
    StudentLossCfg, VsdContext,
};
use tadsr_core::metrics::{psnr, ssim, sweep_ts};
use tadsr_core::nets::{
    init_adapters, init_params, tae_encode, unet_forward, AdapterRef, Arch,
};
use tadsr_core::params::{load_checkpoint, ParamStore};
use tadsr_core::rng::Rng;
use tadsr_core::schedule::{add_noise, make_schedule, x0_from_eps, TimestepMap};
use tadsr_core::tensor::Tensor;
use tadsr_core::train::{
    eval_bilinear_psnr, eval_student_psnr, heldout_pairs, run_stage, Stage,
};

struct Outcome {
    hard_fail: Vec<String>,
}

impl Outcome {
    fn report(&mut self, id: &str, pass: bool, soft: bool, detail: String, t0: Instant) {
        let status = match (pass, soft) {
            (true, _) => "PASS",
            (false, true) => "SOFT-FAIL (investigate)",
            (false, false) => "FAIL",
        };
        println!(
            "criterion {id}: {status} — {detail} [{:.1}s]",
            t0.elapsed().as_secs_f64()
        );
        if !pass && !soft {
            self.hard_fail.push(format!("{id}: {detail}"));
        }
    }
}

fn noised_adapter_store(seed: u64) -> ParamStore {
    let arch = Arch::tiny();
    let mut store = init_params(&arch, seed).unwrap();
    init_adapters(&mut store, "teacher.", "phi.adapt.", seed + 1).unwrap();
    let rng = Rng::new(seed + 2);
    for name in store.names_with_prefix("phi.adapt.") {
        if name.ends_with(".b") {
            let shape = store.get(&name).unwrap().shape().to_vec();
            store
                .set(&name, Tensor::randn(&shape, 0.1, &rng.derive_str(&name)))
                .unwrap();
        }
    }
    store
}

#[test]
fn acceptance_criteria() {
    let mut out = Outcome { hard_fail: vec![] };

    criterion_1_schedule_algebra(&mut out);
    criterion_2_vsd_duality(&mut out);
    criterion_3_lora_identity(&mut out);
    criterion_4_gradient_correctness(&mut out);
    criterion_5_blurred_mse(&mut out);
    criterion_6_degradation_goldens(&mut out);
    criterion_7_metric_oracles(&mut out);

    let pipeline = criterion_8_end_to_end(&mut out);
    match pipeline {
        Some((cfg, distill_ckpt)) => {
            criterion_9_fidelity_realism_trend(&mut out, &cfg, &distill_ckpt);
            criterion_10_gradient_magnitude_trend(&mut out, &cfg, &distill_ckpt);
            criterion_11_reproducibility(&mut out, &cfg, distill_ckpt.parent().unwrap().parent().unwrap());
        }
        None => {
            println!("criteria 9-11 skipped: pipeline unavailable");
        }
    }

    assert!(
        out.hard_fail.is_empty(),
        "hard criteria failed:\n{}",
        out.hard_fail.join("\n")
    );
}

fn criterion_1_schedule_algebra(out: &mut Outcome) {
    let t0 = Instant::now();
    let s = make_schedule(1000, 1e-4, 0.02).unwrap();
    let mut vp_worst = 0.0f64;
    for t in 0..s.len() {
        vp_worst = vp_worst.max((s.alpha[t] * s.alpha[t] + s.beta[t] * s.beta[t] - 1.0).abs());
    }
    let rng = Rng::new(11);
    let mut rt_worst = 0.0f32;
    for i in 0..100u64 {
        let z0 = Tensor::randn(&[4, 12, 12], 1.0, &rng.derive(2 * i));
        let eps = Tensor::randn(&[4, 12, 12], 1.0, &rng.derive(2 * i + 1));
        let t = rng.derive(777).index_at(i, 1000);
        let z_t = add_noise(&z0, t, &eps, &s).unwrap();
        let rec = x0_from_eps(&z_t, t, &eps, &s).unwrap();
        rt_worst = rt_worst.max(rec.max_abs_diff(&z0));
    }
    let pass = vp_worst < 1e-6 && rt_worst < 1e-5 && t0.elapsed().as_secs_f64() < 1.0;
    out.report(
        "1 (schedule algebra)",
        pass,
        false,
        format!("vp err {vp_worst:.2e} (<1e-6), roundtrip err {rt_worst:.2e} (<1e-5)"),
        t0,
    );
}

fn criterion_2_vsd_duality(out: &mut Outcome) {
    let t0 = Instant::now();
    let store = noised_adapter_store(600);
    let schedule = make_schedule(1000, 1e-4, 0.02).unwrap();
    let map = TimestepMap::default();
    let ctx = VsdContext::new(&store, &schedule, &map, Omega::Unit);
    let rng = Rng::new(601);
    let mut worst = 0.0f32;
    for i in 0..50u64 {
        let z = Tensor::randn(&[4, 4, 4], 1.0, &rng.derive(3 * i));
        let eps = Tensor::randn(&[4, 4, 4], 1.0, &rng.derive(3 * i + 1));
        let t = map.t_min + rng.derive(3 * i + 2).index_at(0, map.t_max - map.t_min + 1);
        let g = vsd_gradient(&z, t, &eps, &ctx).unwrap();
        let z_t = add_noise(&z, t, &eps, &schedule).unwrap();
        let psi = unet_forward(&z_t, t, &store, "teacher.", None).unwrap();
        let phi = unet_forward(
            &z_t,
            t,
            &store,
            "teacher.",
            Some(AdapterRef::new("phi.adapt.", store.meta())),
        )
        .unwrap();
        let x_psi = x0_from_eps(&z_t, t, &psi, &schedule).unwrap();
        let x_phi = x0_from_eps(&z_t, t, &phi, &schedule).unwrap();
        let alt = x_psi
            .sub(&x_phi)
            .unwrap()
            .scale(-(schedule.alpha[t] / schedule.beta[t]) as f32);
        worst = worst.max(g.max_abs_diff(&alt));
    }
    let pass = worst < 1e-5 && t0.elapsed().as_secs_f64() < 10.0;
    out.report(
        "2 (residual duality)",
        pass,
        false,
        format!("eps-residual vs scaled latent-residual max diff {worst:.2e} (<1e-5) over 50 draws"),
        t0,
    );
}

fn criterion_3_lora_identity(out: &mut Outcome) {
    let t0 = Instant::now();
    let arch = Arch::tiny();
    let mut store = init_params(&arch, 620).unwrap();
    init_adapters(&mut store, "teacher.", "phi.adapt.", 621).unwrap();
    let z = Tensor::randn(&[4, 4, 4], 1.0, &Rng::new(622));
    let base = unet_forward(&z, 300, &store, "teacher.", None).unwrap();
    let adapted = unet_forward(
        &z,
        300,
        &store,
        "teacher.",
        Some(AdapterRef::new("phi.adapt.", &arch)),
    )
    .unwrap();
    let identity = base == adapted;
    let schedule = make_schedule(1000, 1e-4, 0.02).unwrap();
    let map = TimestepMap::default();
    let ctx = VsdContext::new(&store, &schedule, &map, Omega::Unit);
    let eps = Tensor::randn(&[4, 4, 4], 1.0, &Rng::new(623));
    let mut residual_zero = true;
    for t_s in [0usize, 500, 999] {
        let g = tadsr_core::losses::tavsd_loss(&z, t_s, &map, &ctx, &eps).unwrap();
        residual_zero &= g.residual.data().iter().all(|&v| v == 0.0);
    }
    let pass = identity && residual_zero && t0.elapsed().as_secs_f64() < 5.0;
    out.report(
        "3 (LoRA zero-init identity)",
        pass,
        false,
        format!("bit-exact forward: {identity}, residual exactly zero: {residual_zero}"),
        t0,
    );
}

fn criterion_4_gradient_correctness(out: &mut Outcome) {
    let t0 = Instant::now();
    // default-size networks, live adapters
    let arch = Arch::default();
    let mut store = init_params(&arch, 630).unwrap();
    init_adapters(&mut store, "teacher.", "stu.adapt.", 631).unwrap();
    init_adapters(&mut store, "teacher.", "phi.adapt.", 632).unwrap();
    let rng = Rng::new(633);
    for name in store.names_with_prefix("phi.adapt.") {
        if name.ends_with(".b") {
            let shape = store.get(&name).unwrap().shape().to_vec();
            store
                .set(&name, Tensor::randn(&shape, 0.05, &rng.derive_str(&name)))
                .unwrap();
        }
    }
    let schedule = make_schedule(1000, 1e-4, 0.02).unwrap();
    let hq = gen_hq(901, arch.img_size).unwrap();
    let pair = degrade(&hq, &DegradationConfig::default(), 901).unwrap();
    let cfg = StudentLossCfg::default();
    let z_shape = [arch.latent_channels, arch.latent_size(), arch.latent_size()];
    let eps = Tensor::randn(&z_shape, 1.0, &Rng::new(634));
    let t_s = 440usize;

    // --- student loss ---
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
    // The residual is frozen at the base point: the loss differentiates
    // through <stop(g), z_hat>, so the scalar function under differencing
    // holds g fixed while parameters move.
    let frozen = base.residual.clone().unwrap();
    let eval_student = |s: &ParamStore| -> f64 {
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
    let student_worst = fd_check_params(&store, &base.grads, &eval_student, 10, 640);

    // --- critic diffusion loss ---
    let trainable_phi: HashSet<String> =
        store.names_with_prefix("phi.adapt.").into_iter().collect();
    let z_hat = base.z_hat.clone();
    let eps_prime = Tensor::randn(&z_shape, 1.0, &Rng::new(635));
    let lora_base = lora_diffusion_loss(&store, &trainable_phi, &z_hat, 350, &eps_prime, &schedule, true)
        .unwrap();
    let eval_lora = |s: &ParamStore| -> f64 {
        lora_diffusion_loss(s, &HashSet::new(), &z_hat, 350, &eps_prime, &schedule, false)
            .unwrap()
            .loss
    };
    let lora_worst = fd_check_params(&store, &lora_base.grads, &eval_lora, 10, 641);

    let pass = student_worst < 1e-2 && lora_worst < 1e-2 && t0.elapsed().as_secs_f64() < 60.0;
    out.report(
        "4 (gradient correctness)",
        pass,
        false,
        format!(
            "worst FD rel err: student {student_worst:.2e}, critic {lora_worst:.2e} (<1e-2, eps=1e-3, 10 params each)"
        ),
        t0,
    );
}

/// Central differences at eps=1e-3 on `n` parameter coordinates with
/// non-negligible analytic gradient; returns the worst relative error.
fn fd_check_params(
    store: &ParamStore,
    grads: &tadsr_core::nets::GradStore,
    eval: &dyn Fn(&ParamStore) -> f64,
    n: usize,
    pick_seed: u64,
) -> f64 {
    let names: Vec<&String> = grads.keys().collect();
    let pick = Rng::new(pick_seed);
    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut attempts = 0u64;
    while checked < n && attempts < 2000 {
        attempts += 1;
        let name = names[pick.index_at(attempts, names.len())];
        let gvec = &grads[name];
        let j = pick.index_at(10_000 + attempts, gvec.len());
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
        worst = worst.max(rel);
        checked += 1;
    }
    assert!(checked >= n, "only {checked} FD coordinates found");
    worst
}

fn criterion_5_blurred_mse(out: &mut Outcome) {
    let t0 = Instant::now();
    let c1 = Tensor::full(&[3, 48, 48], 0.8);
    let c2 = Tensor::full(&[3, 48, 48], 0.3);
    let want = (c1.data()[0] as f64 - c2.data()[0] as f64).powi(2);
    let mut dc_worst = 0.0f64;
    for t_s in [0usize, 100, 250, 400, 550, 700, 850, 999] {
        let l = blurred_mse(&c1, &c2, t_s).unwrap();
        dc_worst = dc_worst.max((l - want).abs());
    }

    let base = gen_hq(55, 48).unwrap();
    let amp = 0.1f32;
    let mut shifted = base.clone();
    for y in 0..48 {
        for x in 0..48 {
            let sgn = if (x + y) % 2 == 0 { amp } else { -amp };
            for c in 0..3 {
                shifted.data_mut()[(c * 48 + y) * 48 + x] += sgn;
            }
        }
    }
    let plain: f64 = shifted
        .data()
        .iter()
        .zip(base.data())
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum::<f64>()
        / shifted.numel() as f64;
    let blurred = blurred_mse(&shifted, &base, 999).unwrap();
    let suppressed = blurred < 0.05 * plain;

    let pass = dc_worst < 1e-8 && suppressed && t0.elapsed().as_secs_f64() < 5.0;
    out.report(
        "5 (blur-scheduled MSE)",
        pass,
        false,
        format!(
            "DC err {dc_worst:.2e} (<1e-8); Nyquist blurred/plain {:.2e} (<0.05)",
            blurred / plain
        ),
        t0,
    );
}

fn criterion_6_degradation_goldens(out: &mut Outcome) {
    let t0 = Instant::now();
    let cfg = DegradationConfig::default();
    let mut mismatches = vec![];
    for (seed, want) in tadsr_core::selftest::DEGRADATION_GOLDENS {
        let hq = gen_hq(seed, 48).unwrap();
        let pair = degrade(&hq, &cfg, seed).unwrap();
        if pair_golden_hash(&pair) != want {
            mismatches.push(seed);
        }
    }
    let pass = mismatches.is_empty() && t0.elapsed().as_secs_f64() < 5.0;
    out.report(
        "6 (degradation determinism)",
        pass,
        false,
        if mismatches.is_empty() {
            "8/8 golden hashes match".to_string()
        } else {
            format!("golden mismatch for seeds {mismatches:?}")
        },
        t0,
    );
}

fn criterion_7_metric_oracles(out: &mut Outcome) {
    let t0 = Instant::now();
    // independent scalar-loop oracles on random 8x8 fixtures
    let rng = Rng::new(77);
    let mut psnr_worst = 0.0f64;
    let mut ssim_worst = 0.0f64;
    for i in 0..10u64 {
        let a = Tensor::randn(&[3, 8, 8], 0.3, &rng.derive(2 * i)).clamp01();
        let b = Tensor::randn(&[3, 8, 8], 0.3, &rng.derive(2 * i + 1)).clamp01();
        psnr_worst = psnr_worst.max((psnr(&a, &b).unwrap() - psnr_oracle(&a, &b)).abs());
        ssim_worst = ssim_worst.max((ssim(&a, &b).unwrap() - ssim_oracle(&a, &b)).abs());
    }
    let x = gen_hq(5, 48).unwrap();
    let self_one = (ssim(&x, &x).unwrap() - 1.0).abs() < 1e-9;
    let pass =
        psnr_worst < 1e-6 && ssim_worst < 1e-6 && self_one && t0.elapsed().as_secs_f64() < 5.0;
    out.report(
        "7 (metric oracles)",
        pass,
        false,
        format!(
            "psnr oracle err {psnr_worst:.2e}, ssim oracle err {ssim_worst:.2e} (<1e-6), ssim(x,x)=1: {self_one}"
        ),
        t0,
    );
}

fn psnr_oracle(a: &Tensor, b: &Tensor) -> f64 {
    let mut se = 0.0f64;
    for i in (0..a.numel()).rev() {
        let d = a.data()[i] as f64 - b.data()[i] as f64;
        se += d * d;
    }
    10.0 * (a.numel() as f64 / se).log10()
}

fn ssim_oracle(a: &Tensor, b: &Tensor) -> f64 {
    let (c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let min_dim = h.min(w);
    let win = if min_dim >= 11 {
        11
    } else if min_dim % 2 == 1 {
        min_dim
    } else {
        min_dim - 1
    };
    let r = (win / 2) as i64;
    let mut weights = vec![];
    for i in -r..=r {
        for j in -r..=r {
            weights.push((-((i * i + j * j) as f64) / (2.0 * 1.5 * 1.5)).exp());
        }
    }
    let wsum: f64 = weights.iter().sum();
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut acc = 0.0;
    let mut cnt = 0usize;
    for ch in 0..c {
        for y0 in 0..=(h - win) {
            for x0 in 0..=(w - win) {
                let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                let mut wi = 0;
                for dy in 0..win {
                    for dx in 0..win {
                        let wv = weights[wi] / wsum;
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
                let (vx, vy, cov) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
                acc += ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                    / ((mx * mx + my * my + c1) * (vx + vy + c2));
                cnt += 1;
            }
        }
    }
    acc / cnt as f64
}

/// Train the full pipeline under the default config; returns the distill
/// checkpoint path for the trend criteria.
fn criterion_8_end_to_end(out: &mut Outcome) -> Option<(RunConfig, PathBuf)> {
    let t0 = Instant::now();
    let cfg = RunConfig::default();
    let keep_dir = std::env::var("TADSR_ACCEPT_DIR").ok().map(PathBuf::from);
    let tmp;
    let run_dir: PathBuf = match &keep_dir {
        Some(d) => d.clone(),
        None => {
            tmp = tempfile::tempdir().unwrap();
            tmp.path().to_path_buf()
        }
    };

    let ae = run_or_reuse(&cfg, Stage::Autoencoder, &run_dir);
    let ae = match ae {
        Ok(v) => v,
        Err(e) => {
            out.report("8 (end-to-end distillation)", false, false, format!("autoencoder stage failed: {e}"), t0);
            return None;
        }
    };
    println!("  stage autoencoder: held-out PSNR {:.2} dB", ae.0);
    let teacher = match run_or_reuse(&cfg, Stage::Teacher, &run_dir) {
        Ok(v) => v,
        Err(e) => {
            out.report("8 (end-to-end distillation)", false, false, format!("teacher stage failed: {e}"), t0);
            return None;
        }
    };
    println!("  stage teacher: held-out eps-MSE {:.4}", teacher.0);
    let distill = match run_or_reuse(&cfg, Stage::Distill, &run_dir) {
        Ok(v) => v,
        Err(e) => {
            out.report("8 (end-to-end distillation)", false, false, format!("distill stage failed: {e}"), t0);
            return None;
        }
    };
    let (student_psnr, baseline) = (distill.0, distill.1.unwrap_or(f64::NAN));
    println!("  stage distill: student {student_psnr:.2} dB vs bilinear {baseline:.2} dB");

    let cores = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let elapsed_min = t0.elapsed().as_secs_f64() / 60.0;
    let time_ok = if cores >= 8 { elapsed_min <= 60.0 } else { true };
    if cores < 8 {
        println!(
            "  note: measured on {cores} cores; the 60-minute budget is stated for 8 cores \
             (elapsed here: {elapsed_min:.1} min)"
        );
    }
    let quality = ae.0 >= 25.0 && teacher.0 < 0.9 && student_psnr >= baseline + 0.5;
    let pass = quality && time_ok;
    out.report(
        "8 (end-to-end distillation)",
        pass,
        false,
        format!(
            "AE {:.2} dB (>=25), teacher eps-MSE {:.3} (<0.9), student {:.2} dB vs bilinear+0.5 = {:.2} dB",
            ae.0,
            teacher.0,
            student_psnr,
            baseline + 0.5
        ),
        t0,
    );
    Some((cfg, run_dir.join("distill").join("ckpt")))
}

/// Run a stage, or reuse its checkpoint when TADSR_ACCEPT_DIR persisted one
/// under the same config hash with all steps done.
fn run_or_reuse(
    cfg: &RunConfig,
    stage: Stage,
    run_dir: &Path,
) -> Result<(f64, Option<f64>), tadsr_core::Error> {
    let ckpt = run_dir.join(stage.name()).join("ckpt");
    if ckpt.join("manifest.json").exists() {
        if let Ok((store, state, hash)) = load_checkpoint(&ckpt) {
            let steps = match stage {
                Stage::Autoencoder => cfg.train.autoencoder.steps,
                Stage::Teacher => cfg.train.teacher.steps,
                Stage::Distill => cfg.train.distill.steps,
            };
            if hash == cfg.hash() && state.step >= steps {
                println!("  reusing completed {} checkpoint", stage.name());
                let metric = match stage {
                    Stage::Autoencoder => tadsr_core::train::eval_ae_psnr(&store, cfg, cfg.eval.n_pairs)?,
                    Stage::Teacher => tadsr_core::train::eval_teacher_eps_mse(&store, cfg, 256)?,
                    Stage::Distill => {
                        let pairs = heldout_pairs(cfg)?;
                        let s = eval_student_psnr(&store, &pairs, cfg.eval.eval_ts)?;
                        let b = eval_bilinear_psnr(&pairs)?;
                        return Ok((s, Some(b)));
                    }
                };
                return Ok((metric, None));
            }
        }
    }
    let res = run_stage(cfg, stage, run_dir, None)?;
    Ok((res.final_metric, res.baseline_metric))
}

fn criterion_9_fidelity_realism_trend(out: &mut Outcome, cfg: &RunConfig, ckpt: &Path) {
    let t0 = Instant::now();
    let (store, _, _) = load_checkpoint(ckpt).unwrap();
    let pairs = heldout_pairs(cfg).unwrap();
    let report = sweep_ts(&store, &pairs, &cfg.eval.ts_values).unwrap();
    let (psnr_trend, hf_trend) = report.trends().unwrap();
    let pass = psnr_trend <= 0.0 && hf_trend >= 0.0;
    let within = t0.elapsed().as_secs_f64() < 300.0;
    out.report(
        "9 (fidelity/realism trend)",
        pass && within,
        true,
        format!(
            "spearman(ts, psnr) = {psnr_trend:+.3} (<=0), spearman(ts, hf) = {hf_trend:+.3} (>=0) over ts {:?}",
            cfg.eval.ts_values
        ),
        t0,
    );
}

fn criterion_10_gradient_magnitude_trend(out: &mut Outcome, cfg: &RunConfig, ckpt: &Path) {
    let t0 = Instant::now();
    let (store, _, _) = load_checkpoint(ckpt).unwrap();
    let schedule = make_schedule(
        cfg.schedule.timesteps,
        cfg.schedule.beta_start,
        cfg.schedule.beta_end,
    )
    .unwrap();
    let ctx = VsdContext::new(&store, &schedule, &cfg.timestep_map, cfg.omega());
    let pairs = heldout_pairs(cfg).unwrap();
    let rng = Rng::new(909);
    let z_shape = [
        cfg.arch.latent_channels,
        cfg.arch.latent_size(),
        cfg.arch.latent_size(),
    ];
    let (mut mean_100, mut mean_300) = (0.0f64, 0.0f64);
    let n = 64.min(pairs.len());
    for (i, pair) in pairs.iter().take(n).enumerate() {
        // student latent output on held-out data, as in training
        let up = tadsr_core::tensor::resize_bilinear(&pair.lq, 48, 48);
        let z_l = tae_encode(&up, cfg.eval.eval_ts, &store).unwrap();
        let z_hat = unet_forward(
            &z_l,
            cfg.eval.eval_ts,
            &store,
            "teacher.",
            Some(AdapterRef::new("stu.adapt.", store.meta())),
        )
        .unwrap();
        let eps = Tensor::randn(&z_shape, 1.0, &rng.derive(i as u64));
        let g100 = vsd_gradient(&z_hat, 100, &eps, &ctx).unwrap();
        let g300 = vsd_gradient(&z_hat, 300, &eps, &ctx).unwrap();
        mean_100 += g100.data().iter().map(|v| v.abs() as f64).sum::<f64>() / g100.numel() as f64;
        mean_300 += g300.data().iter().map(|v| v.abs() as f64).sum::<f64>() / g300.numel() as f64;
    }
    mean_100 /= n as f64;
    mean_300 /= n as f64;
    let pass = mean_300 > mean_100 && t0.elapsed().as_secs_f64() < 120.0;
    out.report(
        "10 (residual magnitude trend)",
        pass,
        true,
        format!("mean |g| at t_v=300: {mean_300:.4e} vs t_v=100: {mean_100:.4e} over {n} samples"),
        t0,
    );
}

fn criterion_11_reproducibility(out: &mut Outcome, cfg: &RunConfig, trained_run_dir: &Path) {
    let t0 = Instant::now();
    // Short-distill config sharing the trained AE/teacher checkpoints.
    let mut cfg20 = cfg.clone();
    cfg20.train.distill.steps = 20;
    cfg20.train.checkpoint_every = 10;

    let copy_prereqs = |dst: &Path| {
        for stage in ["autoencoder", "teacher"] {
            let src_ckpt = trained_run_dir.join(stage).join("ckpt");
            let (store, state, _) = load_checkpoint(&src_ckpt).unwrap();
            tadsr_core::params::save_checkpoint(
                &dst.join(stage).join("ckpt"),
                &store,
                &state,
                &cfg20.hash(),
            )
            .unwrap();
        }
    };

    let read_rows = |p: &Path| -> Vec<serde_json::Value> {
        std::fs::read_to_string(p)
            .unwrap()
            .lines()
            .map(|l| {
                let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
                // wall-clock is the one legitimately nondeterministic field
                v.as_object_mut().unwrap().remove("wall_ms");
                v
            })
            .collect()
    };

    let dir_a = tempfile::tempdir().unwrap();
    copy_prereqs(dir_a.path());
    run_stage(&cfg20, Stage::Distill, dir_a.path(), None).unwrap();
    let rows_a = read_rows(&dir_a.path().join("distill/metrics.jsonl"));

    let dir_b = tempfile::tempdir().unwrap();
    copy_prereqs(dir_b.path());
    run_stage(&cfg20, Stage::Distill, dir_b.path(), None).unwrap();
    let rows_b = read_rows(&dir_b.path().join("distill/metrics.jsonl"));

    let identical = rows_a == rows_b && rows_a.len() == 20;

    // Resume path: run 10 steps under a shorter config, restamp the
    // checkpoint with the 20-step config hash (the state itself is
    // identical: draws depend only on (seed, step)), resume to 20.
    let mut cfg10 = cfg20.clone();
    cfg10.train.distill.steps = 10;
    let dir_c = tempfile::tempdir().unwrap();
    copy_prereqs(dir_c.path());
    // prereq hashes must match the running config
    for stage in ["autoencoder", "teacher"] {
        let ckpt = dir_c.path().join(stage).join("ckpt");
        let (store, state, _) = load_checkpoint(&ckpt).unwrap();
        tadsr_core::params::save_checkpoint(&ckpt, &store, &state, &cfg10.hash()).unwrap();
    }
    run_stage(&cfg10, Stage::Distill, dir_c.path(), None).unwrap();
    let ckpt_c = dir_c.path().join("distill/ckpt");
    let (store_c, state_c, _) = load_checkpoint(&ckpt_c).unwrap();
    assert_eq!(state_c.step, 10);
    tadsr_core::params::save_checkpoint(&ckpt_c, &store_c, &state_c, &cfg20.hash()).unwrap();
    // restore the prereq stamps for the resumed config
    for stage in ["autoencoder", "teacher"] {
        let ckpt = dir_c.path().join(stage).join("ckpt");
        let (store, state, _) = load_checkpoint(&ckpt).unwrap();
        tadsr_core::params::save_checkpoint(&ckpt, &store, &state, &cfg20.hash()).unwrap();
    }
    run_stage(&cfg20, Stage::Distill, dir_c.path(), Some(&ckpt_c)).unwrap();
    let rows_c = read_rows(&dir_c.path().join("distill/metrics.jsonl"));
    let resume_ok = rows_c == rows_a;

    let pass = identical && resume_ok && t0.elapsed().as_secs_f64() < 300.0;
    out.report(
        "11 (reproducibility)",
        pass,
        false,
        format!(
            "identical 20-step logs: {identical}; resumed run reproduces the sequence: {resume_ok}"
        ),
        t0,
    );
}
