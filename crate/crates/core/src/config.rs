//! Run configuration: a flat `key = value` text format with `#` comments.
//!
//! Resolution order is defaults, then a config file, then individual
//! overrides. The resolved config serializes back to the same format and
//! re-parses to an identical value.

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::classnet::ClassNetConfig;
use crate::diffcore::AdamConfig;
use crate::evalkit::{PseudoLabelConfig, Upsample};
use crate::mixaug::AugmentConfig;
use crate::objective::LossWeights;
use crate::synthdata::DatasetConfig;
use crate::train::{LrSchedule, TrainConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("bad value for `{key}`: {message}")]
    Value { key: String, message: String },
    #[error("{0}")]
    Invalid(String),
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Every knob of a run. All fields have defaults and a fully default config
/// trains end to end.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub classes: usize,
    pub extent: usize,
    pub shapes_min: usize,
    pub shapes_max: usize,
    pub size_min: f64,
    pub size_max: f64,
    pub texture_amplitude: f64,
    pub train_size: usize,
    pub val_size: usize,
    pub channels: Vec<usize>,
    pub strides: Vec<usize>,
    pub kernel: usize,
    pub mixup: bool,
    pub alpha: f64,
    pub flip_prob: f64,
    pub crop_min: f64,
    pub crop_max: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    pub jitter: f64,
    pub lambda_ent: f64,
    pub lambda_con: f64,
    pub tau_bg: f64,
    pub upsample: Upsample,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_schedule: LrSchedule,
    pub weight_decay: f64,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let data = DatasetConfig::default();
        let net = ClassNetConfig::default();
        let aug = AugmentConfig::default();
        let weights = LossWeights::default();
        let pseudo = PseudoLabelConfig::default();
        let adam = AdamConfig::default();
        Self {
            seed: 0,
            classes: data.classes,
            extent: data.extent,
            shapes_min: data.shapes_min,
            shapes_max: data.shapes_max,
            size_min: data.size_min,
            size_max: data.size_max,
            texture_amplitude: data.texture_amplitude,
            train_size: data.train_size,
            val_size: data.val_size,
            channels: net.channels,
            strides: net.strides,
            kernel: net.kernel,
            mixup: true,
            alpha: aug.alpha,
            flip_prob: aug.flip_prob,
            crop_min: aug.crop_min,
            crop_max: aug.crop_max,
            scale_min: aug.scale_min,
            scale_max: aug.scale_max,
            jitter: aug.jitter,
            lambda_ent: weights.entropy,
            lambda_con: weights.concentration,
            tau_bg: pseudo.tau_bg,
            upsample: pseudo.upsample,
            epochs: 30,
            batch_size: 32,
            learning_rate: adam.learning_rate,
            lr_schedule: LrSchedule::default(),
            weight_decay: adam.weight_decay,
            out: PathBuf::from("run"),
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::Value {
        key: key.into(),
        message: format!("`{value}`: {e}"),
    })
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>, ConfigError> {
    value.split(',').map(|v| parse_num(key, v.trim())).collect()
}

fn join(values: &[usize]) -> String {
    values.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Keys accepted by [`RunConfig::set`], in serialization order.
    pub const KEYS: [&'static str; 31] = [
        "seed",
        "classes",
        "extent",
        "shapes_min",
        "shapes_max",
        "size_min",
        "size_max",
        "texture_amplitude",
        "train_size",
        "val_size",
        "channels",
        "strides",
        "kernel",
        "mixup",
        "alpha",
        "flip_prob",
        "crop_min",
        "crop_max",
        "scale_min",
        "scale_max",
        "jitter",
        "lambda_ent",
        "lambda_con",
        "tau_bg",
        "upsample",
        "epochs",
        "batch_size",
        "learning_rate",
        "lr_schedule",
        "weight_decay",
        "out",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value.trim();
        match key.trim() {
            "seed" => self.seed = parse_num(key, v)?,
            "classes" => self.classes = parse_num(key, v)?,
            "extent" => self.extent = parse_num(key, v)?,
            "shapes_min" => self.shapes_min = parse_num(key, v)?,
            "shapes_max" => self.shapes_max = parse_num(key, v)?,
            "size_min" => self.size_min = parse_num(key, v)?,
            "size_max" => self.size_max = parse_num(key, v)?,
            "texture_amplitude" => self.texture_amplitude = parse_num(key, v)?,
            "train_size" => self.train_size = parse_num(key, v)?,
            "val_size" => self.val_size = parse_num(key, v)?,
            "channels" => self.channels = parse_list(key, v)?,
            "strides" => self.strides = parse_list(key, v)?,
            "kernel" => self.kernel = parse_num(key, v)?,
            "mixup" => self.mixup = parse_num(key, v)?,
            "alpha" => self.alpha = parse_num(key, v)?,
            "flip_prob" => self.flip_prob = parse_num(key, v)?,
            "crop_min" => self.crop_min = parse_num(key, v)?,
            "crop_max" => self.crop_max = parse_num(key, v)?,
            "scale_min" => self.scale_min = parse_num(key, v)?,
            "scale_max" => self.scale_max = parse_num(key, v)?,
            "jitter" => self.jitter = parse_num(key, v)?,
            "lambda_ent" => self.lambda_ent = parse_num(key, v)?,
            "lambda_con" => self.lambda_con = parse_num(key, v)?,
            "tau_bg" => self.tau_bg = parse_num(key, v)?,
            "upsample" => self.upsample = parse_num(key, v)?,
            "epochs" => self.epochs = parse_num(key, v)?,
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "learning_rate" => self.learning_rate = parse_num(key, v)?,
            "lr_schedule" => self.lr_schedule = parse_num(key, v)?,
            "weight_decay" => self.weight_decay = parse_num(key, v)?,
            "out" => self.out = PathBuf::from(v),
            other => return Err(ConfigError::UnknownKey(other.into())),
        }
        Ok(())
    }

    fn get(&self, key: &str) -> String {
        match key {
            "seed" => self.seed.to_string(),
            "classes" => self.classes.to_string(),
            "extent" => self.extent.to_string(),
            "shapes_min" => self.shapes_min.to_string(),
            "shapes_max" => self.shapes_max.to_string(),
            "size_min" => self.size_min.to_string(),
            "size_max" => self.size_max.to_string(),
            "texture_amplitude" => self.texture_amplitude.to_string(),
            "train_size" => self.train_size.to_string(),
            "val_size" => self.val_size.to_string(),
            "channels" => join(&self.channels),
            "strides" => join(&self.strides),
            "kernel" => self.kernel.to_string(),
            "mixup" => self.mixup.to_string(),
            "alpha" => self.alpha.to_string(),
            "flip_prob" => self.flip_prob.to_string(),
            "crop_min" => self.crop_min.to_string(),
            "crop_max" => self.crop_max.to_string(),
            "scale_min" => self.scale_min.to_string(),
            "scale_max" => self.scale_max.to_string(),
            "jitter" => self.jitter.to_string(),
            "lambda_ent" => self.lambda_ent.to_string(),
            "lambda_con" => self.lambda_con.to_string(),
            "tau_bg" => self.tau_bg.to_string(),
            "upsample" => self.upsample.to_string(),
            "epochs" => self.epochs.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "learning_rate" => self.learning_rate.to_string(),
            "lr_schedule" => self.lr_schedule.to_string(),
            "weight_decay" => self.weight_decay.to_string(),
            "out" => self.out.display().to_string(),
            _ => unreachable!("key list and accessor out of sync"),
        }
    }

    /// Applies `key = value` lines on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                message: format!("expected `key = value`, got `{line}`"),
            })?;
            self.set(key, value).map_err(|e| match e {
                ConfigError::Value { .. } | ConfigError::UnknownKey(_) => ConfigError::Syntax {
                    line: i + 1,
                    message: e.to_string(),
                },
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        self.apply_text(&text)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("# resolved run configuration\n");
        for key in Self::KEYS {
            out.push_str(&format!("{key} = {}\n", self.get(key)));
        }
        out
    }

    pub fn dataset_config(&self) -> DatasetConfig {
        DatasetConfig {
            classes: self.classes,
            extent: self.extent,
            shapes_min: self.shapes_min,
            shapes_max: self.shapes_max,
            size_min: self.size_min,
            size_max: self.size_max,
            texture_amplitude: self.texture_amplitude,
            train_size: self.train_size,
            val_size: self.val_size,
            seed: self.seed,
        }
    }

    pub fn net_config(&self) -> ClassNetConfig {
        ClassNetConfig {
            input_extent: self.extent,
            channels: self.channels.clone(),
            strides: self.strides.clone(),
            kernel: self.kernel,
            classes: self.classes,
            ..ClassNetConfig::default()
        }
    }

    pub fn augment_config(&self) -> AugmentConfig {
        AugmentConfig {
            alpha: self.alpha,
            flip_prob: self.flip_prob,
            crop_min: self.crop_min,
            crop_max: self.crop_max,
            scale_min: self.scale_min,
            scale_max: self.scale_max,
            jitter: self.jitter,
            seed: self.seed,
        }
    }

    pub fn pseudo_config(&self) -> PseudoLabelConfig {
        PseudoLabelConfig {
            tau_bg: self.tau_bg,
            upsample: self.upsample,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            adam: AdamConfig {
                learning_rate: self.learning_rate,
                weight_decay: self.weight_decay,
                ..AdamConfig::default()
            },
            schedule: self.lr_schedule,
            weights: LossWeights {
                entropy: self.lambda_ent,
                concentration: self.lambda_con,
            },
            augment: self.augment_config(),
            mixup: self.mixup,
            seed: self.seed,
        }
    }

    /// Checks every derived component so a bad value fails before any work.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        self.dataset_config().validate().map_err(|e| invalid(&e))?;
        self.net_config().validate().map_err(|e| invalid(&e))?;
        self.train_config().validate().map_err(|e| invalid(&e))?;
        self.pseudo_config().validate().map_err(|e| invalid(&e))?;
        if self.epochs == 0 {
            return Err(ConfigError::Invalid("epoch count must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(RunConfig::from_text(&cfg.to_text()).unwrap(), cfg);
        assert_eq!(cfg.train_config(), TrainConfig::default());
    }

    #[test]
    fn overrides_and_comments() {
        let cfg =
            RunConfig::from_text("# header\nseed = 7 # trailing\n\nchannels = 8, 16\nupsample=nearest\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.channels, vec![8, 16]);
        assert_eq!(cfg.upsample, Upsample::Nearest);
        let mut odd = cfg.clone();
        odd.lambda_con = 1.0 / 3.0;
        assert_eq!(RunConfig::from_text(&odd.to_text()).unwrap(), odd);
    }

    #[test]
    fn errors_name_the_line() {
        assert!(matches!(
            RunConfig::from_text("seed 7"),
            Err(ConfigError::Syntax { line: 1, .. })
        ));
        let e = RunConfig::from_text("\nbogus = 1").unwrap_err();
        assert!(e.to_string().contains("line 2") && e.to_string().contains("bogus"));
        assert!(RunConfig::from_text("epochs = -1").is_err());
    }

    #[test]
    fn indivisible_extent_fails_validation() {
        let cfg = RunConfig {
            extent: 60,
            ..RunConfig::default()
        };
        assert!(cfg.validate().unwrap_err().to_string().contains("divisible"));
    }
}
