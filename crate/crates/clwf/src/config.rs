//! Run configuration: a flat `key = value` text file with CLI-flag
//! overrides. Every field has a default, so an empty file is a valid config.

use std::path::{Path, PathBuf};

use crate::interpolant::InterpolantConfig;
use crate::ot::CouplingMode;
use crate::sampler::SampleConfig;
use crate::train::{LossMask, TrainConfig};
use crate::vae::PotentialConfig;
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub seed: u64,
    pub threads: usize,

    pub epochs: usize,
    pub vae_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub clip_norm: f64,
    pub target_mask_ratio: f64,
    pub loss_mask: LossMask,

    pub horizon: f64,
    pub sigma_gamma: f64,
    pub alpha: f64,
    pub sigma_0: f64,

    pub coupling: CouplingMode,

    pub hidden_dims: Vec<usize>,
    pub time_embed_dim: usize,
    pub latent_dim: usize,
    pub vae_hidden_dims: Vec<usize>,
    pub vae_beta: f64,
    pub sigma_p_sq: f64,

    pub steps: usize,
    pub mc_samples: usize,
    pub rao_blackwell: bool,

    pub features: Option<usize>,
    pub seq_len: Option<usize>,
    pub train_csv: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            threads: 1,
            epochs: 200,
            vae_epochs: 200,
            batch_size: 64,
            learning_rate: 0.001,
            clip_norm: 1.0,
            target_mask_ratio: 0.2,
            loss_mask: LossMask::All,
            horizon: 1.0,
            sigma_gamma: 0.001,
            alpha: 0.0,
            sigma_0: 0.1,
            coupling: CouplingMode::Exact,
            hidden_dims: vec![128, 128],
            time_embed_dim: 32,
            latent_dim: 16,
            vae_hidden_dims: vec![128],
            vae_beta: 1.0,
            sigma_p_sq: 0.01,
            steps: 15,
            mc_samples: 50,
            rao_blackwell: false,
            features: None,
            seq_len: None,
            train_csv: None,
            out_dir: PathBuf::from("."),
        }
    }
}

fn field_err(line: usize, key: &str, detail: impl std::fmt::Display) -> Error {
    Error::Config(format!("line {line}, field '{key}': {detail}"))
}

fn parse_num<T: std::str::FromStr>(line: usize, key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e| field_err(line, key, e))
}

fn parse_bool(line: usize, key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        other => Err(field_err(line, key, format!("'{other}' is not a bool"))),
    }
}

fn parse_dims(line: usize, key: &str, value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(|s| s.trim().parse::<usize>().map_err(|e| field_err(line, key, e)))
        .collect()
}

impl RunConfig {
    /// Parse a flat key = value file. Unknown keys and malformed values are
    /// errors naming the line and field.
    pub fn parse(path: &Path) -> Result<RunConfig> {
        if !path.exists() {
            return Err(Error::Config(format!(
                "config not found: {}",
                path.display()
            )));
        }
        let content = std::fs::read_to_string(path)?;
        let mut cfg = RunConfig::default();
        let mut sinkhorn_epsilon: Option<f64> = None;
        let mut coupling_name: Option<String> = None;

        for (i, raw) in content.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {line_no}: expected 'key = value', got '{line}'"))
            })?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "seed" => cfg.seed = parse_num(line_no, key, value)?,
                "threads" => cfg.threads = parse_num(line_no, key, value)?,
                "epochs" => {
                    cfg.epochs = parse_num(line_no, key, value)?;
                    cfg.vae_epochs = cfg.epochs;
                }
                "vae_epochs" => cfg.vae_epochs = parse_num(line_no, key, value)?,
                "batch_size" => cfg.batch_size = parse_num(line_no, key, value)?,
                "learning_rate" => cfg.learning_rate = parse_num(line_no, key, value)?,
                "clip_norm" => cfg.clip_norm = parse_num(line_no, key, value)?,
                "target_mask_ratio" => cfg.target_mask_ratio = parse_num(line_no, key, value)?,
                "loss_mask" => {
                    cfg.loss_mask = LossMask::parse(value)
                        .map_err(|e| field_err(line_no, key, e))?
                }
                "horizon" => cfg.horizon = parse_num(line_no, key, value)?,
                "sigma_gamma" => cfg.sigma_gamma = parse_num(line_no, key, value)?,
                "alpha" => cfg.alpha = parse_num(line_no, key, value)?,
                "sigma_0" => cfg.sigma_0 = parse_num(line_no, key, value)?,
                "coupling" => coupling_name = Some(value.to_string()),
                "sinkhorn_epsilon" => {
                    sinkhorn_epsilon = Some(parse_num(line_no, key, value)?)
                }
                "hidden_dims" => cfg.hidden_dims = parse_dims(line_no, key, value)?,
                "time_embed_dim" => cfg.time_embed_dim = parse_num(line_no, key, value)?,
                "latent_dim" => cfg.latent_dim = parse_num(line_no, key, value)?,
                "vae_hidden_dims" => cfg.vae_hidden_dims = parse_dims(line_no, key, value)?,
                "vae_beta" => cfg.vae_beta = parse_num(line_no, key, value)?,
                "sigma_p_sq" => cfg.sigma_p_sq = parse_num(line_no, key, value)?,
                "steps" => cfg.steps = parse_num(line_no, key, value)?,
                "mc_samples" => cfg.mc_samples = parse_num(line_no, key, value)?,
                "rao_blackwell" => cfg.rao_blackwell = parse_bool(line_no, key, value)?,
                "features" => cfg.features = Some(parse_num(line_no, key, value)?),
                "seq_len" => cfg.seq_len = Some(parse_num(line_no, key, value)?),
                "train_csv" => cfg.train_csv = Some(PathBuf::from(value)),
                "out_dir" => cfg.out_dir = PathBuf::from(value),
                other => {
                    return Err(Error::Config(format!(
                        "line {line_no}: unknown key '{other}'"
                    )))
                }
            }
        }
        cfg.coupling = match coupling_name.as_deref() {
            None | Some("exact") => CouplingMode::Exact,
            Some("independent") => CouplingMode::Independent,
            Some("sinkhorn") => CouplingMode::Sinkhorn {
                epsilon: sinkhorn_epsilon.unwrap_or(crate::ot::DEFAULT_SINKHORN_EPSILON),
            },
            Some(other) => {
                return Err(Error::Config(format!(
                    "coupling '{other}' not one of exact|sinkhorn|independent"
                )))
            }
        };
        Ok(cfg)
    }

    pub fn set_coupling_by_name(&mut self, name: &str) -> Result<()> {
        self.coupling = CouplingMode::parse(name)?;
        Ok(())
    }

    pub fn interpolant(&self) -> InterpolantConfig {
        InterpolantConfig {
            horizon: self.horizon,
            sigma_gamma: self.sigma_gamma,
            alpha: self.alpha,
            sigma_0: self.sigma_0,
        }
    }

    pub fn potential(&self) -> PotentialConfig {
        PotentialConfig {
            sigma_p_sq: self.sigma_p_sq,
        }
    }

    pub fn train_config(&self, log_path: Option<PathBuf>) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            interpolant: self.interpolant(),
            coupling: self.coupling,
            target_mask_ratio: self.target_mask_ratio,
            full_target: false,
            loss_mask: self.loss_mask,
            clip_norm: self.clip_norm,
            hidden_dims: self.hidden_dims.clone(),
            time_embed_dim: self.time_embed_dim,
            latent_dim: self.latent_dim,
            vae_hidden_dims: self.vae_hidden_dims.clone(),
            vae_beta: self.vae_beta,
            seed: self.seed,
            log_path,
        }
    }

    pub fn sample_config(&self) -> SampleConfig {
        SampleConfig {
            steps: self.steps,
            mc_samples: self.mc_samples,
            rao_blackwell: self.rao_blackwell,
            seed: self.seed,
            threads: self.threads,
        }
    }
}
