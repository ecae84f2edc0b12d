//! The `tadsr` command-line tool: data synthesis, the three training
//! stages, timestep-conditioned inference, metric sweeps and the invariant
//! self-test suite. All hyperparameters flow through the JSON config, with
//! `--set section.key=value` overrides; every command is deterministic
//! under fixed seeds.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::config::{load_config, RunConfig};
use crate::degrade::make_dataset;
use crate::error::{Error, Result};
use crate::metrics::{sweep_ts, EvalReport};
use crate::nets::student_forward;
use crate::params::load_checkpoint;
use crate::tensor::Tensor;
use crate::train::{run_stage, Stage};

#[derive(Parser)]
#[command(
    name = "tadsr",
    version,
    about = "Desk-scale one-step diffusion distillation lab for 4x super-resolution"
)]
pub struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Synthesize LQ/HQ training pairs as PNGs plus a pairs.jsonl manifest
    GenData {
        /// JSON run config (defaults when omitted)
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
        /// Number of pairs
        #[arg(long)]
        n: usize,
        /// Base seed of the dataset stream
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Config overrides of the form section.key=value
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Run one training stage inside a run directory
    Train {
        /// autoencoder | teacher | distill
        #[arg(long)]
        stage: String,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Resume from a checkpoint directory (config hash must match)
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Run directory (stages nest inside it)
        #[arg(long)]
        out: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// One-step 4x super-resolution of a PNG at a conditioning timestep
    Infer {
        /// Checkpoint directory
        #[arg(long)]
        ckpt: PathBuf,
        /// Low-quality input PNG (dims must be multiples of 4)
        #[arg(long)]
        lq: PathBuf,
        /// Conditioning timestep in [0, 999]
        #[arg(long)]
        ts: usize,
        /// Output PNG path
        #[arg(long)]
        out: PathBuf,
    },
    /// Metric sweep over conditioning timesteps; writes a CSV report
    Sweep {
        #[arg(long)]
        ckpt: PathBuf,
        /// Directory produced by gen-data
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated timesteps
        #[arg(long, value_delimiter = ',', default_values_t = [100usize, 300, 500, 700, 900])]
        ts: Vec<usize>,
        /// Output CSV path
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the fast invariant suite and print one line per check
    Selftest,
}

/// Cap the rayon pool when TADSR_LAB_THREADS is set (bounds data-synthesis
/// and batch parallelism; results do not depend on the thread count).
pub fn init_threads() {
    if let Ok(v) = std::env::var("TADSR_LAB_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build_global();
        }
    }
}

pub fn run() -> i32 {
    init_threads();
    let cli = Cli::parse();
    match dispatch(cli.cmd) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn dispatch(cmd: Cmd) -> Result<i32> {
    match cmd {
        Cmd::GenData {
            config,
            out,
            n,
            seed,
            set,
        } => {
            let cfg = load_config(config.as_deref(), &set)?;
            cmd_gen_data(&cfg, &out, n, seed)?;
            Ok(0)
        }
        Cmd::Train {
            stage,
            config,
            resume,
            out,
            set,
        } => {
            let cfg = load_config(config.as_deref(), &set)?;
            let stage = Stage::parse(&stage)?;
            let res = run_stage(&cfg, stage, &out, resume.as_deref())?;
            println!(
                "stage {} done: {} steps, checkpoint at {}",
                stage.name(),
                res.steps_run,
                res.ckpt_dir.display()
            );
            match stage {
                Stage::Autoencoder => {
                    println!("held-out reconstruction PSNR: {:.2} dB", res.final_metric)
                }
                Stage::Teacher => {
                    println!("held-out eps-prediction MSE: {:.4}", res.final_metric)
                }
                Stage::Distill => println!(
                    "held-out student PSNR: {:.2} dB (bilinear baseline {:.2} dB)",
                    res.final_metric,
                    res.baseline_metric.unwrap_or(f64::NAN)
                ),
            }
            Ok(0)
        }
        Cmd::Infer { ckpt, lq, ts, out } => {
            cmd_infer(&ckpt, &lq, ts, &out)?;
            println!("wrote {}", out.display());
            Ok(0)
        }
        Cmd::Sweep {
            ckpt,
            data,
            ts,
            out,
        } => {
            let report = cmd_sweep(&ckpt, &data, &ts, &out)?;
            if let Some((psnr_trend, hf_trend)) = report.trends() {
                println!("spearman(ts, psnr)      = {psnr_trend:+.3}");
                println!("spearman(ts, hf_energy) = {hf_trend:+.3}");
            }
            println!("wrote {}", out.display());
            Ok(0)
        }
        Cmd::Selftest => {
            let results = crate::selftest::run_all();
            let mut all_pass = true;
            for r in &results {
                println!(
                    "{} {} — {}",
                    if r.pass { "PASS" } else { "FAIL" },
                    r.name,
                    r.detail
                );
                all_pass &= r.pass;
            }
            Ok(if all_pass { 0 } else { 1 })
        }
    }
}

// ---- PNG I/O ----------------------------------------------------------------

/// Write a C×H×W tensor in [0,1] as an 8-bit RGB PNG.
pub fn write_png(path: &Path, t: &Tensor) -> Result<()> {
    if t.shape().len() != 3 || t.channels() != 3 {
        return Err(Error::Image(format!(
            "expected 3×H×W tensor, got {:?}",
            t.shape()
        )));
    }
    let (h, w) = (t.height(), t.width());
    let mut buf = vec![0u8; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = (t.at(c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8;
                buf[(y * w + x) * 3 + c] = v;
            }
        }
    }
    let img: image::RgbImage = image::ImageBuffer::from_raw(w as u32, h as u32, buf)
        .ok_or_else(|| Error::Image("buffer size mismatch".into()))?;
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    img.save(path)?;
    Ok(())
}

/// Read an 8-bit RGB PNG into a C×H×W tensor in [0,1].
pub fn read_png(path: &Path) -> Result<Tensor> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut t = Tensor::zeros(&[3, h, w]);
    for y in 0..h {
        for x in 0..w {
            let px = img.get_pixel(x as u32, y as u32);
            for c in 0..3 {
                t.data_mut()[(c * h + y) * w + x] = px[c] as f32 / 255.0;
            }
        }
    }
    Ok(t)
}

// ---- commands -----------------------------------------------------------------

fn cmd_gen_data(cfg: &RunConfig, out: &Path, n: usize, seed: u64) -> Result<()> {
    fs::create_dir_all(out)?;
    let pairs = make_dataset(n, cfg.arch.img_size, &cfg.degrade, seed)?;
    let mut manifest = String::new();
    for (i, pair) in pairs.iter().enumerate() {
        write_png(&out.join(format!("pair_{i}_hq.png")), &pair.hq)?;
        write_png(&out.join(format!("pair_{i}_lq.png")), &pair.lq)?;
        let row = serde_json::json!({
            "index": i,
            "seed": pair.seed,
            "applied_params": pair.applied,
        });
        manifest.push_str(&row.to_string());
        manifest.push('\n');
    }
    fs::write(out.join("pairs.jsonl"), manifest)?;
    println!("wrote {n} pairs to {}", out.display());
    Ok(())
}

fn cmd_infer(ckpt: &Path, lq_path: &Path, ts: usize, out: &Path) -> Result<()> {
    if ts > 999 {
        return Err(Error::TimestepOutOfRange {
            t: ts as i64,
            max: 999,
        });
    }
    let (store, _, _) = load_checkpoint(ckpt)?;
    let lq = read_png(lq_path)?;
    if lq.height() % 4 != 0 || lq.width() % 4 != 0 {
        return Err(Error::Image(format!(
            "LQ dims must be multiples of 4, got {}x{}",
            lq.height(),
            lq.width()
        )));
    }
    let sr = student_forward(&lq, ts, &store)?;
    write_png(out, &sr)
}

/// Load pairs back from a gen-data directory.
pub fn load_data_dir(dir: &Path) -> Result<Vec<crate::degrade::ImagePair>> {
    let manifest = fs::read_to_string(dir.join("pairs.jsonl"))
        .map_err(|e| Error::Config(format!("{}: {e}", dir.join("pairs.jsonl").display())))?;
    let mut pairs = Vec::new();
    for line in manifest.lines() {
        let row: serde_json::Value = serde_json::from_str(line)?;
        let i = row
            .get("index")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::Config("manifest row missing index".into()))?;
        let seed = row.get("seed").and_then(|v| v.as_u64()).unwrap_or(0);
        let applied = row
            .get("applied_params")
            .cloned()
            .map(serde_json::from_value)
            .transpose()?
            .unwrap_or_default();
        let hq = read_png(&dir.join(format!("pair_{i}_hq.png")))?;
        let lq = read_png(&dir.join(format!("pair_{i}_lq.png")))?;
        pairs.push(crate::degrade::ImagePair {
            hq,
            lq,
            seed,
            applied,
        });
    }
    if pairs.is_empty() {
        return Err(Error::Config(format!("{} holds no pairs", dir.display())));
    }
    Ok(pairs)
}

fn hash_file(path: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    h.update(fs::read(path)?);
    Ok(crate::params::hex(&h.finalize()))
}

fn cmd_sweep(ckpt: &Path, data: &Path, ts: &[usize], out: &Path) -> Result<EvalReport> {
    let weights_hash = hash_file(&ckpt.join("weights.bin"))?;
    let (store, _, _) = load_checkpoint(ckpt)?;
    let pairs = load_data_dir(data)?;
    let report = sweep_ts(&store, &pairs, ts)?;
    if let Some(parent) = out.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(out, report.to_csv())?;
    // the sweep must never touch the checkpoint
    let after = hash_file(&ckpt.join("weights.bin"))?;
    if weights_hash != after {
        return Err(Error::Checkpoint(
            "checkpoint changed during sweep".into(),
        ));
    }
    Ok(report)
}
