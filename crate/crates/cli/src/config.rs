//! Plain key=value run configuration. Precedence: command-line flags beat
//! file values beat defaults; unknown keys are rejected with their line.

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use lunar_cnn::data::SynthConfig;
use lunar_cnn::train::TrainConfig;
use lunar_cnn::{AdamHyper, AugmentConfig, NetworkConfig};

/// Every tunable of a run, with the reference protocol as defaults.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Dataset root: written by gen-data, read by train/eval.
    pub data: PathBuf,
    /// Artifact directory: checkpoints, histories, summaries, reports.
    pub out: PathBuf,
    pub seed: u64,
    pub epochs: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Augmentation rotation range in degrees (plus/minus).
    pub rotation: f64,
    /// Augmentation shift range as a fraction of the image side.
    pub shift: f64,
    /// Image side length; also the network input side.
    pub image: usize,
    pub classes: usize,
    pub conv1: usize,
    pub conv2: usize,
    pub hidden: usize,
    pub drop_flat: f64,
    pub drop_hidden: f64,
    /// Per-class generator counts.
    pub counts: [usize; 3],
    /// Training images drawn per class by the train/test split.
    pub train_per_class: usize,
    pub spike_min: usize,
    pub spike_max: usize,
    pub tail_len: f64,
    pub tail_width: f64,
    pub ear_len: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: PathBuf::from("data"),
            out: PathBuf::from("out"),
            seed: 0,
            epochs: 40,
            steps: 20,
            batch: 180,
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-7,
            rotation: 180.0,
            shift: 0.10,
            image: 50,
            classes: 3,
            conv1: 32,
            conv2: 64,
            hidden: 128,
            drop_flat: 0.25,
            drop_hidden: 0.5,
            counts: [100, 100, 105],
            train_per_class: 80,
            spike_min: 6,
            spike_max: 8,
            tail_len: 2.2,
            tail_width: 0.14,
            ear_len: 0.95,
        }
    }
}

/// A rejected key or value, with the 1-based line it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub line: usize,
    pub message: String,
}

impl Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

fn parse_as<T: FromStr>(key: &str, value: &str, line: usize) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError {
        line,
        message: format!("value for `{key}` is not valid: `{value}`"),
    })
}

fn parse_counts(key: &str, value: &str, line: usize) -> Result<[usize; 3], ConfigError> {
    let parts: Vec<&str> = value.split(',').collect();
    if parts.len() != 3 {
        return Err(ConfigError {
            line,
            message: format!("value for `{key}` must be three comma-separated counts: `{value}`"),
        });
    }
    Ok([
        parse_as(key, parts[0].trim(), line)?,
        parse_as(key, parts[1].trim(), line)?,
        parse_as(key, parts[2].trim(), line)?,
    ])
}

impl RunConfig {
    /// Applies one `key=value` pair. `line` is reported on rejection.
    pub fn set(&mut self, key: &str, value: &str, line: usize) -> Result<(), ConfigError> {
        match key {
            "data" => self.data = PathBuf::from(value),
            "out" => self.out = PathBuf::from(value),
            "seed" => self.seed = parse_as(key, value, line)?,
            "epochs" => self.epochs = parse_as(key, value, line)?,
            "steps" => self.steps = parse_as(key, value, line)?,
            "batch" => self.batch = parse_as(key, value, line)?,
            "lr" => self.lr = parse_as(key, value, line)?,
            "beta1" => self.beta1 = parse_as(key, value, line)?,
            "beta2" => self.beta2 = parse_as(key, value, line)?,
            "eps" => self.eps = parse_as(key, value, line)?,
            "rotation" => self.rotation = parse_as(key, value, line)?,
            "shift" => self.shift = parse_as(key, value, line)?,
            "image" => self.image = parse_as(key, value, line)?,
            "classes" => self.classes = parse_as(key, value, line)?,
            "conv1" => self.conv1 = parse_as(key, value, line)?,
            "conv2" => self.conv2 = parse_as(key, value, line)?,
            "hidden" => self.hidden = parse_as(key, value, line)?,
            "drop_flat" => self.drop_flat = parse_as(key, value, line)?,
            "drop_hidden" => self.drop_hidden = parse_as(key, value, line)?,
            "counts" => self.counts = parse_counts(key, value, line)?,
            "train_per_class" => self.train_per_class = parse_as(key, value, line)?,
            "spike_min" => self.spike_min = parse_as(key, value, line)?,
            "spike_max" => self.spike_max = parse_as(key, value, line)?,
            "tail_len" => self.tail_len = parse_as(key, value, line)?,
            "tail_width" => self.tail_width = parse_as(key, value, line)?,
            "ear_len" => self.ear_len = parse_as(key, value, line)?,
            _ => {
                return Err(ConfigError {
                    line,
                    message: format!("unknown key `{key}`"),
                })
            }
        }
        Ok(())
    }

    /// Parses a `key=value` file over the defaults. `#` starts a comment;
    /// blank lines are skipped.
    pub fn from_file(path: &Path) -> Result<RunConfig, ConfigError> {
        let text = fs::read_to_string(path).map_err(|e| ConfigError {
            line: 0,
            message: format!("cannot read {}: {e}", path.display()),
        })?;
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| ConfigError {
                line,
                message: format!("expected key=value, got `{content}`"),
            })?;
            cfg.set(key.trim(), value.trim(), line)?;
        }
        Ok(cfg)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            steps_per_epoch: self.steps,
            batch_size: self.batch,
            augment: AugmentConfig {
                rotation_range_deg: self.rotation,
                shift_fraction: self.shift,
            },
            adam: AdamHyper {
                lr: self.lr,
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.eps,
            },
            network: NetworkConfig {
                input: self.image,
                conv1: self.conv1,
                conv2: self.conv2,
                hidden: self.hidden,
                classes: self.classes,
                drop_flat: self.drop_flat,
                drop_hidden: self.drop_hidden,
            },
            master_seed: self.seed,
        }
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            counts: self.counts,
            size: self.image,
            seed: self.seed,
            spike_min: self.spike_min,
            spike_max: self.spike_max,
            tail_len: self.tail_len,
            tail_width: self.tail_width,
            ear_len: self.ear_len,
        }
    }
}
