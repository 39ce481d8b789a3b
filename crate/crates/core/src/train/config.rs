//! Experiment configuration: a flat `key = value` file (TOML syntax, no
//! tables). Unknown keys are rejected by name.
//!
//! | key | default | meaning |
//! |-----|---------|---------|
//! | `config_version` | 1 | schema version, must be 1 |
//! | `network` | `"default"` | layer string, or `default` for the stock GCNN |
//! | `data_dir` | required | `root/<class>/*.png` training data |
//! | `val_dir` | `""` | separate validation set; empty means split `data_dir` |
//! | `val_fraction` | 0.3 | fraction of `data_dir` held out when splitting |
//! | `image_size` | 32 | square side images are resized to |
//! | `channels` | 1 | 1 (grayscale) or 3 (RGB) |
//! | `normalize` | true | per-channel standardization fitted on train |
//! | `optimizer` | `"adam"` | `adam` or `sgd` |
//! | `lr` | 0.001 | base learning rate |
//! | `beta1`, `beta2`, `eps` | 0.9, 0.999, 1e-8 | Adam hyperparameters |
//! | `lr_decay` | `""` | `epoch:factor,...`; lr is multiplied by factor from that epoch |
//! | `epochs` | 100 | |
//! | `batch_size` | 64 | |
//! | `flip_prob` | 0.0 | horizontal flip probability (training only) |
//! | `crop_padding` | 0 | random-crop padding in pixels (training only) |
//! | `seed` | 0 | weights, shuffling, dropout and augmentation |
//! | `output_dir` | `"runs"` | CSVs, checkpoints and summary go here |
//! | `threshold` | 0.9 | smoothed val accuracy used for epochs-to-threshold |
//! | `record_wall_time` | false | write real timings into the CSV instead of 0 |

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::{AdamConfig, LrSchedule};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub config_version: u32,
    pub network: String,
    pub data_dir: PathBuf,
    pub val_dir: PathBuf,
    pub val_fraction: f64,
    pub image_size: usize,
    pub channels: usize,
    pub normalize: bool,
    pub optimizer: String,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lr_decay: String,
    pub epochs: usize,
    pub batch_size: usize,
    pub flip_prob: f64,
    pub crop_padding: usize,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub threshold: f64,
    pub record_wall_time: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            config_version: CONFIG_VERSION,
            network: "default".into(),
            data_dir: PathBuf::new(),
            val_dir: PathBuf::new(),
            val_fraction: 0.3,
            image_size: 32,
            channels: 1,
            normalize: true,
            optimizer: "adam".into(),
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lr_decay: String::new(),
            epochs: 100,
            batch_size: 64,
            flip_prob: 0.0,
            crop_padding: 0,
            seed: 0,
            output_dir: PathBuf::from("runs"),
            threshold: 0.9,
            record_wall_time: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerChoice {
    Adam(AdamConfig),
    Sgd { lr: f64 },
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Fully resolved config in the same format it is read from.
    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("flat config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, why: String| Err(Error::Config(format!("`{key}`: {why}")));
        if self.config_version != CONFIG_VERSION {
            return bad(
                "config_version",
                format!("unsupported version {}", self.config_version),
            );
        }
        if self.epochs == 0 {
            return bad("epochs", "must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1".into());
        }
        if self.channels != 1 && self.channels != 3 {
            return bad("channels", format!("must be 1 or 3, got {}", self.channels));
        }
        if self.image_size == 0 {
            return bad("image_size", "must be positive".into());
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad(
                "val_fraction",
                format!("must lie in (0, 1), got {}", self.val_fraction),
            );
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return bad(
                "flip_prob",
                format!("must lie in [0, 1], got {}", self.flip_prob),
            );
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", format!("must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1", "betas must lie in [0, 1)".into());
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            return bad("eps", "must be positive".into());
        }
        self.optimizer_choice()?;
        self.schedule()?;
        Ok(())
    }

    pub fn optimizer_choice(&self) -> Result<OptimizerChoice> {
        match self.optimizer.as_str() {
            "adam" => Ok(OptimizerChoice::Adam(AdamConfig {
                lr: self.lr,
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.eps,
            })),
            "sgd" => Ok(OptimizerChoice::Sgd { lr: self.lr }),
            other => Err(Error::Config(format!(
                "`optimizer`: expected `adam` or `sgd`, got `{other}`"
            ))),
        }
    }

    pub fn schedule(&self) -> Result<LrSchedule> {
        let mut milestones = Vec::new();
        for item in self
            .lr_decay
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
        {
            let parsed = item.split_once(':').and_then(|(e, f)| {
                Some((
                    e.trim().parse::<usize>().ok()?,
                    f.trim().parse::<f64>().ok()?,
                ))
            });
            match parsed {
                Some((epoch, factor)) if epoch >= 1 && factor > 0.0 => {
                    milestones.push((epoch, factor))
                }
                _ => {
                    return Err(Error::Config(format!(
                        "`lr_decay`: cannot parse `{item}`, expected epoch:factor"
                    )))
                }
            }
        }
        Ok(LrSchedule { milestones })
    }

    /// Checks the data paths exist, as required at run start.
    pub fn check_paths(&self) -> Result<()> {
        if self.data_dir.as_os_str().is_empty() {
            return Err(Error::Config("`data_dir` is required".into()));
        }
        for (key, dir) in [("data_dir", &self.data_dir), ("val_dir", &self.val_dir)] {
            if !dir.as_os_str().is_empty() && !dir.is_dir() {
                return Err(Error::Data(format!(
                    "`{key}` {} is not a directory",
                    dir.display()
                )));
            }
        }
        Ok(())
    }
}
