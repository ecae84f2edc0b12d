//! Run configuration: one JSON document with sections
//! `{arch, schedule, timestep_map, degrade, train, eval}`, strict about
//! unknown keys, hashed canonically (sorted keys) into checkpoints.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::degrade::DegradationConfig;
use crate::error::{Error, Result};
use crate::losses::Omega;
use crate::nets::Arch;
use crate::schedule::TimestepMap;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleCfg {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub blur_sigma_min: f64,
    pub blur_sigma_max: f64,
}

impl Default for ScheduleCfg {
    fn default() -> Self {
        ScheduleCfg {
            timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            blur_sigma_min: crate::schedule::BLUR_SIGMA_MIN,
            blur_sigma_max: crate::schedule::BLUR_SIGMA_MAX,
        }
    }
}

/// Per-stage loop parameters. Defaults differ per stage (see
/// [`TrainCfg::default`]), so a stage section in a config file must be
/// complete when present; individual fields are still reachable through
/// `--set train.<stage>.<field>=...`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct StageCfg {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainCfg {
    pub seed: u64,
    pub checkpoint_every: usize,
    pub lambda_tavsd: f64,
    pub lambda_percep: f64,
    /// "unit" or "snr_beta2".
    pub omega: String,
    /// Train a full UNet copy for the student instead of LoRA on the teacher.
    pub full_finetune: bool,
    pub autoencoder: StageCfg,
    pub teacher: StageCfg,
    pub distill: StageCfg,
    /// Latents pre-encoded once for teacher pretraining.
    pub teacher_latent_pool: usize,
}

impl Default for TrainCfg {
    fn default() -> Self {
        TrainCfg {
            seed: 7,
            checkpoint_every: 500,
            lambda_tavsd: 1.0,
            lambda_percep: 1.0,
            omega: "unit".into(),
            full_finetune: false,
            autoencoder: StageCfg {
                steps: 1500,
                lr: 2e-3,
                batch_size: 8,
            },
            teacher: StageCfg {
                steps: 2000,
                lr: 1e-3,
                batch_size: 8,
            },
            distill: StageCfg {
                steps: 2000,
                lr: 5e-5,
                batch_size: 8,
            },
            teacher_latent_pool: 512,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct EvalCfg {
    pub seed: u64,
    pub n_pairs: usize,
    pub ts_values: Vec<usize>,
    /// Conditioning timestep for single-point held-out evaluation.
    pub eval_ts: usize,
}

impl Default for EvalCfg {
    fn default() -> Self {
        EvalCfg {
            seed: 7700,
            n_pairs: 64,
            ts_values: vec![100, 300, 500, 700, 900],
            eval_ts: 200,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub arch: Arch,
    pub schedule: ScheduleCfg,
    pub timestep_map: TimestepMap,
    pub degrade: DegradationConfig,
    pub train: TrainCfg,
    pub eval: EvalCfg,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.degrade.validate()?;
        self.timestep_map.validate(self.schedule.timesteps)?;
        Omega::parse(&self.train.omega)?;
        for (name, st) in [
            ("autoencoder", &self.train.autoencoder),
            ("teacher", &self.train.teacher),
            ("distill", &self.train.distill),
        ] {
            if st.steps == 0 || st.lr <= 0.0 || st.batch_size == 0 {
                return Err(Error::Config(format!(
                    "stage {name}: steps, lr and batch_size must be positive"
                )));
            }
        }
        if self.schedule.blur_sigma_min < 0.0
            || self.schedule.blur_sigma_max < self.schedule.blur_sigma_min
        {
            return Err(Error::Config("bad blur sigma range".into()));
        }
        if self.eval.n_pairs == 0 || self.eval.eval_ts > 999 {
            return Err(Error::Config("bad eval section".into()));
        }
        if self.eval.ts_values.iter().any(|&t| t > 999) {
            return Err(Error::Config("eval ts_values must be in [0,999]".into()));
        }
        Ok(())
    }

    pub fn omega(&self) -> Omega {
        Omega::parse(&self.train.omega).expect("validated")
    }

    pub fn blur_range(&self) -> (f64, f64) {
        (self.schedule.blur_sigma_min, self.schedule.blur_sigma_max)
    }

    /// SHA-256 of the canonical JSON form (object keys sorted, shortest
    /// float repr), stable under key reordering in the source file.
    pub fn hash(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        let canon = serde_json::to_string(&value).expect("canonical form");
        let mut h = Sha256::new();
        h.update(canon.as_bytes());
        crate::params::hex(&h.finalize())
    }
}

/// Load a config file (or defaults when `path` is None) and apply
/// `--set section.key=value` overrides.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut value: serde_json::Value = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text)?
        }
        None => serde_json::to_value(RunConfig::default())?,
    };
    for ov in overrides {
        apply_override(&mut value, ov)?;
    }
    let cfg: RunConfig = serde_json::from_value(value)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Apply one `section.key=value` override. The path must already exist
/// (unknown keys are rejected, same as in the file itself); the value is
/// parsed as JSON, falling back to a bare string.
pub fn apply_override(root: &mut serde_json::Value, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override '{spec}' is not of the form key=value")))?;
    let parts: Vec<&str> = path.split('.').collect();
    if parts.is_empty() {
        return Err(Error::Config(format!("empty override path in '{spec}'")));
    }
    let mut cur = root;
    for (i, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("'{}' is not an object", parts[..i].join("."))))?;
        cur = obj
            .get_mut(*part)
            .ok_or_else(|| Error::Config(format!("unknown config key '{}'", parts[..=i].join("."))))?;
    }
    *cur = serde_json::from_str(raw).unwrap_or(serde_json::Value::String(raw.to_string()));
    Ok(())
}
