//! The three training stages — autoencoder pretraining, teacher diffusion
//! pretraining, and the alternating student/critic distillation loop —
//! with checkpointing, resume-exact state and JSONL metric logs.
//!
//! Every random draw derives from `(train.seed, stage, step, sample)`
//! through counter streams, so a resumed run continues the exact loss
//! sequence of an uninterrupted one. Per-sample gradient work runs on the
//! rayon pool; gradients are reduced in sample order, so thread scheduling
//! never changes the result.

use std::collections::HashSet;
use std::fs;
use std::io::Write as IoWrite;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;

use crate::config::RunConfig;
use crate::degrade::{gen_hq, make_pair, ImagePair};
use crate::error::{Error, Result};
use crate::losses::{
    lora_diffusion_loss, student_loss, ResidualMode, StudentLossCfg, StudentLossOut,
};
use crate::metrics::psnr;
use crate::nets::{
    decoder_forward_g, init_adapters, init_params, student_forward, tae_encode_plain,
    tae_forward_g, unet_forward_g, Bind, GradStore,
};
use crate::params::{load_checkpoint, save_checkpoint, CheckpointState, ParamStore};
use crate::rng::Rng;
use crate::schedule::{make_schedule, NoiseSchedule};
use crate::tensor::{resize_bilinear, Tensor};

// Stream tags; see the module doc of `rng` for the mixing function.
const TAG_AE_IMG: u64 = 0xae01;
const TAG_AE_CALIB: u64 = 0xae02;
const TAG_AE_EVAL: u64 = 0xae03;
const TAG_POOL: u64 = 0x9001;
const TAG_POOL_PICK: u64 = 0x9002;
const TAG_T_DRAW: u64 = 0x9003;
const TAG_EPS: u64 = 0x9004;
const TAG_TEACHER_EVAL: u64 = 0x9005;
const TAG_DISTILL_DATA: u64 = 0xd001;
const TAG_TS: u64 = 0xd002;
const TAG_TAVSD_EPS: u64 = 0xd003;
const TAG_LORA_T: u64 = 0xd004;
const TAG_LORA_EPS: u64 = 0xd005;
const TAG_ADAPT_STU: u64 = 0xada0;
const TAG_ADAPT_PHI: u64 = 0xada1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Autoencoder,
    Teacher,
    Distill,
}

impl Stage {
    pub fn name(&self) -> &'static str {
        match self {
            Stage::Autoencoder => "autoencoder",
            Stage::Teacher => "teacher",
            Stage::Distill => "distill",
        }
    }

    pub fn parse(s: &str) -> Result<Stage> {
        match s {
            "autoencoder" => Ok(Stage::Autoencoder),
            "teacher" => Ok(Stage::Teacher),
            "distill" => Ok(Stage::Distill),
            other => Err(Error::Config(format!(
                "unknown stage '{other}' (expected autoencoder|teacher|distill)"
            ))),
        }
    }
}

/// Decoupled-weight-decay Adam. Moments live in the store under
/// `opt.m.<name>` / `opt.v.<name>`, so checkpoints capture optimizer state.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamW {
    pub fn new(lr: f64) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }

    /// Apply one update; `step_t` is 1-based for bias correction.
    pub fn step(&self, store: &mut ParamStore, grads: &GradStore, step_t: usize) -> Result<()> {
        let bc1 = 1.0 - self.beta1.powi(step_t as i32);
        let bc2 = 1.0 - self.beta2.powi(step_t as i32);
        for (name, g) in grads {
            let m_name = format!("opt.m.{name}");
            let v_name = format!("opt.v.{name}");
            if !store.contains(&m_name) {
                let shape = store.get(name)?.shape().to_vec();
                store.insert(&m_name, Tensor::zeros(&shape))?;
                store.insert(&v_name, Tensor::zeros(&shape))?;
            }
            let mut m = store.get(&m_name)?.clone();
            let mut v = store.get(&v_name)?.clone();
            {
                let p = store.get_mut(name)?;
                let pd = p.data_mut();
                let md = m.data_mut();
                let vd = v.data_mut();
                for i in 0..g.len() {
                    let gi = g[i];
                    let mi = self.beta1 * md[i] as f64 + (1.0 - self.beta1) * gi;
                    let vi = self.beta2 * vd[i] as f64 + (1.0 - self.beta2) * gi * gi;
                    md[i] = mi as f32;
                    vd[i] = vi as f32;
                    let update = (mi / bc1) / ((vi / bc2).sqrt() + self.eps);
                    let pi = pd[i] as f64;
                    pd[i] = (pi - self.lr * (update + self.weight_decay * pi)) as f32;
                }
            }
            store.set(&m_name, m)?;
            store.set(&v_name, v)?;
        }
        Ok(())
    }
}

/// Append-only JSONL metrics writer; on resume it drops rows past the
/// checkpoint step so the file always matches the realized loss sequence.
struct MetricsLog {
    file: fs::File,
}

impl MetricsLog {
    fn open(path: &Path, keep_up_to_step: usize) -> Result<Self> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let mut kept = String::new();
        if keep_up_to_step > 0 && path.exists() {
            for line in fs::read_to_string(path)?.lines() {
                if let Ok(v) = serde_json::from_str::<serde_json::Value>(line) {
                    if v.get("step").and_then(|s| s.as_u64()).unwrap_or(u64::MAX)
                        <= keep_up_to_step as u64
                    {
                        kept.push_str(line);
                        kept.push('\n');
                    }
                }
            }
        }
        fs::write(path, kept)?;
        let file = fs::OpenOptions::new().append(true).open(path)?;
        Ok(MetricsLog { file })
    }

    fn append(&mut self, row: &serde_json::Value) -> Result<()> {
        self.file.write_all(row.to_string().as_bytes())?;
        self.file.write_all(b"\n")?;
        self.file.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct StageResult {
    pub ckpt_dir: PathBuf,
    pub steps_run: usize,
    /// Held-out quality: reconstruction PSNR (autoencoder), eps-MSE
    /// (teacher), or student PSNR at `eval.eval_ts` (distill).
    pub final_metric: f64,
    /// Bilinear-upsample baseline PSNR on the same held-out set (distill only).
    pub baseline_metric: Option<f64>,
}

fn stage_dirs(run_dir: &Path, stage: Stage) -> (PathBuf, PathBuf, PathBuf) {
    let dir = run_dir.join(stage.name());
    (dir.clone(), dir.join("ckpt"), dir.join("metrics.jsonl"))
}

/// Run (or resume) one training stage inside `run_dir`. Later stages load
/// their prerequisite checkpoints from the conventional locations
/// (`<run_dir>/autoencoder/ckpt`, `<run_dir>/teacher/ckpt`).
pub fn run_stage(
    cfg: &RunConfig,
    stage: Stage,
    run_dir: &Path,
    resume: Option<&Path>,
) -> Result<StageResult> {
    cfg.validate()?;
    let resumed = match resume {
        Some(path) => {
            let (store, state, hash) = load_checkpoint(path)?;
            if state.stage != stage.name() {
                return Err(Error::Config(format!(
                    "checkpoint at {} is for stage '{}', not '{}'",
                    path.display(),
                    state.stage,
                    stage.name()
                )));
            }
            let want = cfg.hash();
            if hash != want {
                return Err(Error::ConfigHashMismatch {
                    checkpoint: hash,
                    config: want,
                });
            }
            Some((store, state.step))
        }
        None => None,
    };
    match stage {
        Stage::Autoencoder => stage_autoencoder(cfg, run_dir, resumed),
        Stage::Teacher => stage_teacher(cfg, run_dir, resumed),
        Stage::Distill => stage_distill(cfg, run_dir, resumed),
    }
}

fn load_prereq(cfg: &RunConfig, run_dir: &Path, this: Stage, prereq: Stage) -> Result<ParamStore> {
    let (_, ckpt, _) = stage_dirs(run_dir, prereq);
    if !ckpt.join("manifest.json").exists() {
        return Err(Error::MissingPrerequisite {
            stage: this.name().to_string(),
            missing: prereq.name().to_string(),
            path: ckpt.display().to_string(),
        });
    }
    let (store, _, _) = load_checkpoint(&ckpt)?;
    if store.meta() != &cfg.arch {
        return Err(Error::Config(format!(
            "architecture in {} does not match the supplied config",
            ckpt.display()
        )));
    }
    Ok(store)
}

/// Sum per-sample gradient maps in sample order and divide by batch size.
fn reduce_grads(per_sample: Vec<GradStore>, batch: usize) -> GradStore {
    let mut total = GradStore::new();
    for gs in per_sample {
        for (name, g) in gs {
            match total.get_mut(&name) {
                None => {
                    total.insert(name, g);
                }
                Some(acc) => {
                    for (a, b) in acc.iter_mut().zip(&g) {
                        *a += b;
                    }
                }
            }
        }
    }
    let inv = 1.0 / batch as f64;
    for g in total.values_mut() {
        for v in g.iter_mut() {
            *v *= inv;
        }
    }
    total
}

fn latent_shape(cfg: &RunConfig) -> [usize; 3] {
    [
        cfg.arch.latent_channels,
        cfg.arch.latent_size(),
        cfg.arch.latent_size(),
    ]
}

fn normal_tensor(shape: &[usize], stream: &Rng) -> Tensor {
    Tensor::randn(shape, 1.0, stream)
}

// ---- stage 0: autoencoder ----------------------------------------------------

fn stage_autoencoder(
    cfg: &RunConfig,
    run_dir: &Path,
    resumed: Option<(ParamStore, usize)>,
) -> Result<StageResult> {
    let (_, ckpt_dir, log_path) = stage_dirs(run_dir, Stage::Autoencoder);
    let st = &cfg.train.autoencoder;
    let (mut store, start_step) = match resumed {
        Some((s, step)) => (s, step),
        None => (init_params(&cfg.arch, cfg.train.seed)?, 0),
    };
    let mut log = MetricsLog::open(&log_path, start_step)?;
    let trainable: HashSet<String> = store
        .names_with_prefix("ae.enc.")
        .into_iter()
        .chain(store.names_with_prefix("ae.dec."))
        .collect();
    let opt = AdamW::new(st.lr);
    let img_stream = Rng::new(cfg.train.seed).derive(TAG_AE_IMG);
    let arch = cfg.arch.clone();

    for step in start_step..st.steps {
        let t0 = Instant::now();
        let per_sample: Result<Vec<(f64, GradStore)>> = (0..st.batch_size)
            .into_par_iter()
            .map(|b| {
                let x = gen_hq(
                    img_stream.u64_at((step * st.batch_size + b) as u64),
                    arch.img_size,
                )?;
                let mut g = crate::autodiff::Graph::new();
                let mut bind = Bind::trainable(&store, &trainable);
                let xv = g.leaf(&x, false);
                let z = tae_forward_g(&mut g, &mut bind, &arch, xv, None)?;
                let xhat = decoder_forward_g(&mut g, &mut bind, &arch, z)?;
                let loss = g.mse(xhat, xv);
                g.backward(loss);
                Ok((g.scalar(loss), bind.grads(&g)))
            })
            .collect();
        let per_sample = per_sample?;
        let mean_loss: f64 =
            per_sample.iter().map(|(l, _)| l).sum::<f64>() / st.batch_size as f64;
        if !mean_loss.is_finite() {
            return Err(Error::Diverged {
                step,
                diagnostic: format!("autoencoder loss {mean_loss}"),
            });
        }
        let grads = reduce_grads(per_sample.into_iter().map(|(_, g)| g).collect(), st.batch_size);
        opt.step(&mut store, &grads, step + 1)?;
        log.append(&serde_json::json!({
            "step": step + 1,
            "loss": mean_loss,
            "wall_ms": t0.elapsed().as_secs_f64() * 1e3,
        }))?;
        if (step + 1) % cfg.train.checkpoint_every == 0 && step + 1 < st.steps {
            save_checkpoint(
                &ckpt_dir,
                &store,
                &CheckpointState {
                    stage: "autoencoder".into(),
                    step: step + 1,
                },
                &cfg.hash(),
            )?;
        }
    }

    let final_metric = eval_ae_psnr(&store, cfg, cfg.eval.n_pairs)?;
    save_checkpoint(
        &ckpt_dir,
        &store,
        &CheckpointState {
            stage: "autoencoder".into(),
            step: st.steps,
        },
        &cfg.hash(),
    )?;
    Ok(StageResult {
        ckpt_dir,
        steps_run: st.steps - start_step,
        final_metric,
        baseline_metric: None,
    })
}

/// Set `ae.latent_mu` / `ae.latent_sigma` to the per-channel moments of the
/// plain encoder over a calibration batch, so downstream latents are
/// roughly unit scale. Runs at teacher start, once the encoder is frozen;
/// reconstructions are unchanged (the decoder inverts the affine).
pub fn calibrate_latent_stats(store: &mut ParamStore, cfg: &RunConfig) -> Result<()> {
    let n = 256usize.min(64.max(cfg.train.teacher_latent_pool));
    let stream = Rng::new(cfg.train.seed).derive(TAG_AE_CALIB);
    let cz = cfg.arch.latent_channels;
    let mut sum = vec![0.0f64; cz];
    let mut sumsq = vec![0.0f64; cz];
    let mut count = 0usize;
    // identity stats during collection
    store.set("ae.latent_mu", Tensor::zeros(&[cz]))?;
    store.set("ae.latent_sigma", Tensor::full(&[cz], 1.0))?;
    let latents: Result<Vec<Tensor>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let img = gen_hq(stream.u64_at(i as u64), cfg.arch.img_size)?;
            tae_encode_plain(&img, store)
        })
        .collect();
    for z in latents? {
        let hw = z.height() * z.width();
        for c in 0..cz {
            for i in 0..hw {
                let v = z.data()[c * hw + i] as f64;
                sum[c] += v;
                sumsq[c] += v * v;
            }
        }
        count += hw;
    }
    let mut mu = Tensor::zeros(&[cz]);
    let mut sigma = Tensor::full(&[cz], 1.0);
    for c in 0..cz {
        let m = sum[c] / count as f64;
        let var = (sumsq[c] / count as f64 - m * m).max(1e-6);
        mu.data_mut()[c] = m as f32;
        sigma.data_mut()[c] = var.sqrt() as f32;
    }
    store.set("ae.latent_mu", mu)?;
    store.set("ae.latent_sigma", sigma)?;
    Ok(())
}

/// Held-out autoencoder reconstruction PSNR (plain encode, clamped decode).
pub fn eval_ae_psnr(store: &ParamStore, cfg: &RunConfig, n: usize) -> Result<f64> {
    let stream = Rng::new(cfg.eval.seed).derive(TAG_AE_EVAL);
    let vals: Result<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let img = gen_hq(stream.u64_at(i as u64), cfg.arch.img_size)?;
            let z = tae_encode_plain(&img, store)?;
            let rec = crate::nets::vae_decode(&z, store)?;
            psnr(&rec, &img)
        })
        .collect();
    let vals = vals?;
    Ok(vals.iter().sum::<f64>() / vals.len() as f64)
}

// ---- stage 1: teacher --------------------------------------------------------

fn stage_teacher(
    cfg: &RunConfig,
    run_dir: &Path,
    resumed: Option<(ParamStore, usize)>,
) -> Result<StageResult> {
    let (_, ckpt_dir, log_path) = stage_dirs(run_dir, Stage::Teacher);
    let st = &cfg.train.teacher;
    let (mut store, start_step) = match resumed {
        Some((s, step)) => (s, step),
        None => (load_prereq(cfg, run_dir, Stage::Teacher, Stage::Autoencoder)?, 0),
    };
    // Latent normalization stats are fixed at teacher start (the encoder is
    // frozen from here on); recomputing on resume is idempotent.
    calibrate_latent_stats(&mut store, cfg)?;
    let mut log = MetricsLog::open(&log_path, start_step)?;
    let schedule = make_schedule(
        cfg.schedule.timesteps,
        cfg.schedule.beta_start,
        cfg.schedule.beta_end,
    )?;
    let trainable: HashSet<String> = store.names_with_prefix("teacher.").into_iter().collect();
    let opt = AdamW::new(st.lr);
    let arch = cfg.arch.clone();
    let z_shape = latent_shape(cfg);

    // frozen encoder: pre-encode a pool of clean latents once
    let pool = teacher_latent_pool(&store, cfg)?;

    let seed = Rng::new(cfg.train.seed);
    let pick = seed.derive(TAG_POOL_PICK);
    let t_draw = seed.derive(TAG_T_DRAW);
    let eps_stream = seed.derive(TAG_EPS);

    for step in start_step..st.steps {
        let t0 = Instant::now();
        let batch: Vec<(usize, usize, Tensor)> = (0..st.batch_size)
            .map(|b| {
                let k = (step * st.batch_size + b) as u64;
                let zi = pick.index_at(k, pool.len());
                let t = t_draw.index_at(k, schedule.len());
                let eps = normal_tensor(&z_shape, &eps_stream.derive(k));
                (zi, t, eps)
            })
            .collect();
        let per_sample: Result<Vec<(f64, GradStore)>> = batch
            .par_iter()
            .map(|(zi, t, eps)| {
                let z_t = crate::schedule::add_noise(&pool[*zi], *t, eps, &schedule)?;
                let mut g = crate::autodiff::Graph::new();
                let mut bind = Bind::trainable(&store, &trainable);
                let zv = g.leaf(&z_t, false);
                let pred = unet_forward_g(&mut g, &mut bind, &arch, "teacher.", None, zv, *t)?;
                let target = g.leaf(eps, false);
                let loss = g.mse(pred, target);
                g.backward(loss);
                Ok((g.scalar(loss), bind.grads(&g)))
            })
            .collect();
        let per_sample = per_sample?;
        let mean_loss: f64 =
            per_sample.iter().map(|(l, _)| l).sum::<f64>() / st.batch_size as f64;
        if !mean_loss.is_finite() {
            return Err(Error::Diverged {
                step,
                diagnostic: format!("teacher loss {mean_loss}"),
            });
        }
        let grads = reduce_grads(per_sample.into_iter().map(|(_, g)| g).collect(), st.batch_size);
        opt.step(&mut store, &grads, step + 1)?;
        log.append(&serde_json::json!({
            "step": step + 1,
            "loss": mean_loss,
            "wall_ms": t0.elapsed().as_secs_f64() * 1e3,
        }))?;
        if (step + 1) % cfg.train.checkpoint_every == 0 && step + 1 < st.steps {
            save_checkpoint(
                &ckpt_dir,
                &store,
                &CheckpointState {
                    stage: "teacher".into(),
                    step: step + 1,
                },
                &cfg.hash(),
            )?;
        }
    }

    let final_metric = eval_teacher_eps_mse(&store, cfg, 256)?;
    save_checkpoint(
        &ckpt_dir,
        &store,
        &CheckpointState {
            stage: "teacher".into(),
            step: st.steps,
        },
        &cfg.hash(),
    )?;
    Ok(StageResult {
        ckpt_dir,
        steps_run: st.steps - start_step,
        final_metric,
        baseline_metric: None,
    })
}

fn teacher_latent_pool(store: &ParamStore, cfg: &RunConfig) -> Result<Vec<Tensor>> {
    let stream = Rng::new(cfg.train.seed).derive(TAG_POOL);
    (0..cfg.train.teacher_latent_pool.max(1))
        .into_par_iter()
        .map(|i| {
            let img = gen_hq(stream.u64_at(i as u64), cfg.arch.img_size)?;
            tae_encode_plain(&img, store)
        })
        .collect()
}

/// Held-out ε-prediction MSE at uniform t on fresh images. The constant-zero
/// predictor scores 1.0 on unit-normal noise; anything below ~0.9 means the
/// time-conditioned UNet learned something.
pub fn eval_teacher_eps_mse(store: &ParamStore, cfg: &RunConfig, n: usize) -> Result<f64> {
    let schedule = make_schedule(
        cfg.schedule.timesteps,
        cfg.schedule.beta_start,
        cfg.schedule.beta_end,
    )?;
    let stream = Rng::new(cfg.eval.seed).derive(TAG_TEACHER_EVAL);
    let z_shape = latent_shape(cfg);
    let vals: Result<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let k = i as u64;
            let img = gen_hq(stream.u64_at(k), cfg.arch.img_size)?;
            let z0 = tae_encode_plain(&img, store)?;
            let t = stream.derive(1).index_at(k, schedule.len());
            let eps = normal_tensor(&z_shape, &stream.derive(2).derive(k));
            let z_t = crate::schedule::add_noise(&z0, t, &eps, &schedule)?;
            let pred = crate::nets::unet_forward(&z_t, t, store, "teacher.", None)?;
            let mse = pred
                .data()
                .iter()
                .zip(eps.data())
                .map(|(&a, &b)| {
                    let d = a as f64 - b as f64;
                    d * d
                })
                .sum::<f64>()
                / pred.numel() as f64;
            Ok(mse)
        })
        .collect();
    let vals = vals?;
    Ok(vals.iter().sum::<f64>() / vals.len() as f64)
}

// ---- stage 2: distillation ---------------------------------------------------

pub struct DistillDraws {
    pub pair: ImagePair,
    pub t_s: usize,
    pub eps_tavsd: Tensor,
    pub t_lora: usize,
    pub eps_lora: Tensor,
}

/// The per-sample random draws of one distillation step, derived purely
/// from `(seed, step, b)`.
pub fn distill_draws(cfg: &RunConfig, step: usize, b: usize) -> Result<DistillDraws> {
    let seed = Rng::new(cfg.train.seed);
    let k = (step * cfg.train.distill.batch_size + b) as u64;
    let data_seed = seed.derive(TAG_DISTILL_DATA).u64_at(0);
    let pair = make_pair(k as usize, cfg.arch.img_size, &cfg.degrade, data_seed)?;
    let t_s = seed.derive(TAG_TS).index_at(k, 1000);
    let z_shape = latent_shape(cfg);
    let eps_tavsd = normal_tensor(&z_shape, &seed.derive(TAG_TAVSD_EPS).derive(k));
    let t_lora = seed.derive(TAG_LORA_T).index_at(k, cfg.schedule.timesteps);
    let eps_lora = normal_tensor(&z_shape, &seed.derive(TAG_LORA_EPS).derive(k));
    Ok(DistillDraws {
        pair,
        t_s,
        eps_tavsd,
        t_lora,
        eps_lora,
    })
}

pub struct DistillStepStats {
    pub l_rec: f64,
    pub l_tavsd_gmean: f64,
    pub l_diff: f64,
}

/// One alternation: (1) student update from the combined loss; (2) critic
/// update from the diffusion loss on the detached student outputs.
#[allow(clippy::too_many_arguments)]
fn distill_step(
    store: &mut ParamStore,
    cfg: &RunConfig,
    schedule: &NoiseSchedule,
    loss_cfg: &StudentLossCfg,
    trainable_student: &HashSet<String>,
    trainable_phi: &HashSet<String>,
    opt_student: &AdamW,
    opt_phi: &AdamW,
    step: usize,
) -> Result<DistillStepStats> {
    let batch = cfg.train.distill.batch_size;
    // draws + student phase per sample, in parallel
    let both: Result<Vec<(DistillDraws, StudentLossOut)>> = (0..batch)
        .into_par_iter()
        .map(|b| {
            let d = distill_draws(cfg, step, b)?;
            let out = student_loss(
                store,
                trainable_student,
                &d.pair,
                d.t_s,
                &d.eps_tavsd,
                loss_cfg,
                schedule,
                ResidualMode::Recompute,
                true,
            )?;
            Ok((d, out))
        })
        .collect();
    let (draws, outs): (Vec<DistillDraws>, Vec<StudentLossOut>) = both?.into_iter().unzip();
    let l_rec = outs.iter().map(|o| o.l_rec).sum::<f64>() / batch as f64;
    let g_mean = outs.iter().map(|o| o.g_mean_abs).sum::<f64>() / batch as f64;
    if !l_rec.is_finite() {
        return Err(Error::Diverged {
            step,
            diagnostic: format!("student reconstruction loss {l_rec}"),
        });
    }
    let z_hats: Vec<Tensor> = outs.iter().map(|o| o.z_hat.clone()).collect();
    let grads = reduce_grads(outs.into_iter().map(|o| o.grads).collect(), batch);
    opt_student.step(store, &grads, step + 1)?;

    // critic phase on detached student outputs
    let lora_outs: Result<Vec<crate::losses::LoraLossOut>> = draws
        .par_iter()
        .zip(&z_hats)
        .map(|(d, z_hat)| {
            lora_diffusion_loss(
                store,
                trainable_phi,
                z_hat,
                d.t_lora,
                &d.eps_lora,
                schedule,
                true,
            )
        })
        .collect();
    let lora_outs = lora_outs?;
    let l_diff = lora_outs.iter().map(|o| o.loss).sum::<f64>() / batch as f64;
    if !l_diff.is_finite() {
        return Err(Error::Diverged {
            step,
            diagnostic: format!("critic loss {l_diff}"),
        });
    }
    let phi_grads = reduce_grads(lora_outs.into_iter().map(|o| o.grads).collect(), batch);
    opt_phi.step(store, &phi_grads, step + 1)?;

    Ok(DistillStepStats {
        l_rec,
        l_tavsd_gmean: g_mean,
        l_diff,
    })
}

fn stage_distill(
    cfg: &RunConfig,
    run_dir: &Path,
    resumed: Option<(ParamStore, usize)>,
) -> Result<StageResult> {
    let (_, ckpt_dir, log_path) = stage_dirs(run_dir, Stage::Distill);
    let st = &cfg.train.distill;
    let (mut store, start_step) = match resumed {
        Some((s, step)) => (s, step),
        None => {
            let mut store = load_prereq(cfg, run_dir, Stage::Distill, Stage::Teacher)?;
            let seed = Rng::new(cfg.train.seed);
            if cfg.train.full_finetune {
                for name in store.names_with_prefix("teacher.unet.") {
                    let copy = store.get(&name)?.clone();
                    let new_name = format!("stu.{}", &name["teacher.".len()..]);
                    store.insert(&new_name, copy)?;
                }
            } else {
                init_adapters(
                    &mut store,
                    "teacher.",
                    "stu.adapt.",
                    seed.derive(TAG_ADAPT_STU).u64_at(0),
                )?;
            }
            init_adapters(
                &mut store,
                "teacher.",
                "phi.adapt.",
                seed.derive(TAG_ADAPT_PHI).u64_at(0),
            )?;
            (store, 0)
        }
    };
    let mut log = MetricsLog::open(&log_path, start_step)?;
    let schedule = make_schedule(
        cfg.schedule.timesteps,
        cfg.schedule.beta_start,
        cfg.schedule.beta_end,
    )?;
    let loss_cfg = StudentLossCfg {
        map: cfg.timestep_map,
        omega: cfg.omega(),
        lambda_tavsd: cfg.train.lambda_tavsd,
        lambda_percep: cfg.train.lambda_percep,
        blur_range: cfg.blur_range(),
    };
    let trainable_student: HashSet<String> = store
        .names_with_prefix("ae.enc.")
        .into_iter()
        .chain(store.names_with_prefix("stu.adapt."))
        .chain(store.names_with_prefix("stu.unet."))
        .collect();
    let trainable_phi: HashSet<String> =
        store.names_with_prefix("phi.adapt.").into_iter().collect();
    let opt_student = AdamW::new(st.lr);
    let opt_phi = AdamW::new(st.lr);

    for step in start_step..st.steps {
        let t0 = Instant::now();
        let stats = distill_step(
            &mut store,
            cfg,
            &schedule,
            &loss_cfg,
            &trainable_student,
            &trainable_phi,
            &opt_student,
            &opt_phi,
            step,
        )?;
        log.append(&serde_json::json!({
            "step": step + 1,
            "l_rec": stats.l_rec,
            "l_tavsd_gmean": stats.l_tavsd_gmean,
            "l_diff": stats.l_diff,
            "wall_ms": t0.elapsed().as_secs_f64() * 1e3,
        }))?;
        if (step + 1) % cfg.train.checkpoint_every == 0 && step + 1 < st.steps {
            save_checkpoint(
                &ckpt_dir,
                &store,
                &CheckpointState {
                    stage: "distill".into(),
                    step: step + 1,
                },
                &cfg.hash(),
            )?;
        }
    }

    let heldout = heldout_pairs(cfg)?;
    let final_metric = eval_student_psnr(&store, &heldout, cfg.eval.eval_ts)?;
    let baseline = eval_bilinear_psnr(&heldout)?;
    save_checkpoint(
        &ckpt_dir,
        &store,
        &CheckpointState {
            stage: "distill".into(),
            step: st.steps,
        },
        &cfg.hash(),
    )?;
    Ok(StageResult {
        ckpt_dir,
        steps_run: st.steps - start_step,
        final_metric,
        baseline_metric: Some(baseline),
    })
}

/// The held-out pair set used by distill evaluation and the sweep command.
pub fn heldout_pairs(cfg: &RunConfig) -> Result<Vec<ImagePair>> {
    use crate::degrade::make_dataset;
    make_dataset(cfg.eval.n_pairs, cfg.arch.img_size, &cfg.degrade, cfg.eval.seed)
}

/// Mean held-out PSNR of one-step restoration at a fixed conditioning step.
pub fn eval_student_psnr(store: &ParamStore, pairs: &[ImagePair], t_s: usize) -> Result<f64> {
    let vals: Result<Vec<f64>> = pairs
        .par_iter()
        .map(|p| {
            let out = student_forward(&p.lq, t_s, store)?;
            psnr(&out, &p.hq)
        })
        .collect();
    let vals = vals?;
    Ok(vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Mean PSNR of plain bilinear 4x upsampling on the same pairs.
pub fn eval_bilinear_psnr(pairs: &[ImagePair]) -> Result<f64> {
    let vals: Result<Vec<f64>> = pairs
        .par_iter()
        .map(|p| {
            let up = resize_bilinear(&p.lq, p.hq.height(), p.hq.width());
            psnr(&up, &p.hq)
        })
        .collect();
    let vals = vals?;
    Ok(vals.iter().sum::<f64>() / vals.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::Arch;

    /// A configuration small enough for loop tests.
    pub(crate) fn tiny_cfg(dir_seed: u64) -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.arch = Arch::tiny();
        cfg.train.seed = 40 + dir_seed;
        cfg.train.checkpoint_every = 5;
        cfg.train.autoencoder = crate::config::StageCfg {
            steps: 10,
            lr: 2e-3,
            batch_size: 2,
        };
        cfg.train.teacher = crate::config::StageCfg {
            steps: 10,
            lr: 1e-3,
            batch_size: 2,
        };
        cfg.train.distill = crate::config::StageCfg {
            steps: 8,
            lr: 5e-5,
            batch_size: 2,
        };
        cfg.train.teacher_latent_pool = 8;
        cfg.eval.n_pairs = 4;
        cfg
    }

    fn read_log(path: &Path) -> Vec<serde_json::Value> {
        std::fs::read_to_string(path)
            .unwrap()
            .lines()
            .map(|l| {
                let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
                v.as_object_mut().unwrap().remove("wall_ms");
                v
            })
            .collect()
    }

    #[test]
    fn adamw_moves_against_gradient() {
        let mut store = ParamStore::new(Arch::tiny());
        store.insert("w", Tensor::full(&[4], 1.0)).unwrap();
        let mut grads = GradStore::new();
        grads.insert("w".into(), vec![1.0, -1.0, 0.5, 0.0]);
        let opt = AdamW::new(0.01);
        opt.step(&mut store, &grads, 1).unwrap();
        let w = store.get("w").unwrap().data();
        assert!(w[0] < 1.0);
        assert!(w[1] > 1.0);
        assert!(w[2] < 1.0);
        // zero gradient coordinate only shrinks via weight decay
        assert!(w[3] <= 1.0 && w[3] > 0.999);
        assert!(store.contains("opt.m.w") && store.contains("opt.v.w"));
    }

    #[test]
    fn ae_stage_descends_and_is_deterministic() {
        let dir1 = tempfile::tempdir().unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(1);
        let r1 = run_stage(&cfg, Stage::Autoencoder, dir1.path(), None).unwrap();
        let r2 = run_stage(&cfg, Stage::Autoencoder, dir2.path(), None).unwrap();
        assert!(r1.final_metric.is_finite());
        let l1 = read_log(&dir1.path().join("autoencoder/metrics.jsonl"));
        let l2 = read_log(&dir2.path().join("autoencoder/metrics.jsonl"));
        assert_eq!(l1.len(), 10);
        assert_eq!(l1, l2, "two identically seeded runs must log identically");
        // loss goes down over the short run
        let first = l1[0]["loss"].as_f64().unwrap();
        let last = l1[9]["loss"].as_f64().unwrap();
        assert!(last < first, "loss {first} -> {last}");
        // checkpoints from both runs hash identically
        let (s1, _, _) = load_checkpoint(&r1.ckpt_dir).unwrap();
        let (s2, _, _) = load_checkpoint(&r2.ckpt_dir).unwrap();
        assert_eq!(s1.content_hash(""), s2.content_hash(""));
    }

    #[test]
    fn full_pipeline_tiny_runs_and_freezes_teacher() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(2);
        run_stage(&cfg, Stage::Autoencoder, dir.path(), None).unwrap();
        run_stage(&cfg, Stage::Teacher, dir.path(), None).unwrap();
        let (teacher_store, _, _) =
            load_checkpoint(&dir.path().join("teacher/ckpt")).unwrap();
        let teacher_hash = teacher_store.content_hash("teacher.");

        let res = run_stage(&cfg, Stage::Distill, dir.path(), None).unwrap();
        assert!(res.final_metric.is_finite());
        assert!(res.baseline_metric.unwrap().is_finite());
        let (distilled, state, _) = load_checkpoint(&res.ckpt_dir).unwrap();
        assert_eq!(state.step, cfg.train.distill.steps);
        assert_eq!(
            distilled.content_hash("teacher."),
            teacher_hash,
            "teacher weights must stay frozen through distillation"
        );
        // adapters were created for both roles
        assert!(!distilled.names_with_prefix("stu.adapt.").is_empty());
        assert!(!distilled.names_with_prefix("phi.adapt.").is_empty());
        // log schema
        let rows = read_log(&dir.path().join("distill/metrics.jsonl"));
        assert_eq!(rows.len(), cfg.train.distill.steps);
        for r in &rows {
            assert!(r.get("l_rec").is_some());
            assert!(r.get("l_tavsd_gmean").is_some());
            assert!(r.get("l_diff").is_some());
        }
        // adapters start at zero: no distillation signal on the first step
        assert_eq!(rows[0]["l_tavsd_gmean"].as_f64().unwrap(), 0.0);
        // and the signal becomes live once the critic moves
        assert!(rows.last().unwrap()["l_tavsd_gmean"].as_f64().unwrap() > 0.0);
    }

    #[test]
    fn distill_requires_teacher_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(3);
        let err = run_stage(&cfg, Stage::Distill, dir.path(), None).unwrap_err();
        match err {
            Error::MissingPrerequisite { stage, missing, .. } => {
                assert_eq!(stage, "distill");
                assert_eq!(missing, "teacher");
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn resume_reproduces_uninterrupted_sequence() {
        let cfg = tiny_cfg(4);
        // uninterrupted run
        let full_dir = tempfile::tempdir().unwrap();
        run_stage(&cfg, Stage::Autoencoder, full_dir.path(), None).unwrap();
        let full_rows = read_log(&full_dir.path().join("autoencoder/metrics.jsonl"));

        // interrupted run: stop by setting steps=5, then resume to 10
        let part_dir = tempfile::tempdir().unwrap();
        let mut cfg_half = cfg.clone();
        cfg_half.train.autoencoder.steps = 5;
        run_stage(&cfg_half, Stage::Autoencoder, part_dir.path(), None).unwrap();
        // the half checkpoint was written with a different config hash, so a
        // direct resume under the full config must be rejected...
        let ckpt = part_dir.path().join("autoencoder/ckpt");
        let err = run_stage(&cfg, Stage::Autoencoder, part_dir.path(), Some(&ckpt)).unwrap_err();
        assert!(matches!(err, Error::ConfigHashMismatch { .. }));

        // ...so rewrite the state as the mid-run checkpoint of the full
        // config (same params, same step, matching hash).
        let (store, state, _) = load_checkpoint(&ckpt).unwrap();
        save_checkpoint(&ckpt, &store, &state, &cfg.hash()).unwrap();
        run_stage(&cfg, Stage::Autoencoder, part_dir.path(), Some(&ckpt)).unwrap();
        let part_rows = read_log(&part_dir.path().join("autoencoder/metrics.jsonl"));
        assert_eq!(full_rows.len(), part_rows.len());
        // identical halves: the resumed tail matches the uninterrupted run
        assert_eq!(full_rows, part_rows);
    }

    #[test]
    fn resume_rejects_wrong_stage() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(5);
        let res = run_stage(&cfg, Stage::Autoencoder, dir.path(), None).unwrap();
        let err = run_stage(&cfg, Stage::Teacher, dir.path(), Some(&res.ckpt_dir)).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }
}
