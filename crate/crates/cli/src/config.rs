//! Plain-text training settings.
//!
//! A settings file is a list of `key = value` lines (`#` starts a comment).
//! Values layer in a fixed precedence: built-in defaults, then the file,
//! then command-line flags — each later layer overriding the earlier one.
//! Unknown and duplicate keys are hard errors: a silently ignored typo in a
//! hyperparameter name costs a training run.

use std::path::Path;

use maskcontrast_core::augment::AugmentConfig;
use maskcontrast_core::error::{Error, Result};
use maskcontrast_core::maskcontrast::LossConfig;
use maskcontrast_core::model::ModelConfig;
use maskcontrast_core::trainer::TrainerConfig;

/// Every accepted settings key.
pub const KNOWN_KEYS: &[&str] = &[
    "epochs",
    "batch_size",
    "base_lr",
    "sgd_momentum",
    "weight_decay",
    "poly_power",
    "temperature",
    "aux_weight",
    "key_momentum",
    "bank_capacity",
    "embed_dim",
    "channels",
    "input_size",
    "input_height",
    "input_width",
    "scale_min",
    "scale_max",
    "flip_prob",
    "brightness",
    "contrast",
    "saturation",
    "grayscale_prob",
    "min_object_area",
    "max_retries",
];

/// The full bundle of tunables a training run needs.
#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub model: ModelConfig,
    pub trainer: TrainerConfig,
    pub loss: LossConfig,
    pub augment: AugmentConfig,
    /// Capacity of the negative-prototype memory bank.
    pub bank_capacity: usize,
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            model: ModelConfig::default(),
            trainer: TrainerConfig::default(),
            loss: LossConfig::default(),
            augment: AugmentConfig::default(),
            bank_capacity: 256,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.trim().parse().map_err(|_| {
        Error::Config(format!(
            "cannot parse '{value}' as a value for '{key}'"
        ))
    })
}

fn parse_channels(value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(|part| parse("channels", part))
        .collect()
}

impl Settings {
    /// Applies one `key = value` pair.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "epochs" => self.trainer.epochs = parse(key, value)?,
            "batch_size" => self.trainer.batch_size = parse(key, value)?,
            "base_lr" => self.trainer.base_lr = parse(key, value)?,
            "sgd_momentum" => self.trainer.sgd_momentum = parse(key, value)?,
            "weight_decay" => self.trainer.weight_decay = parse(key, value)?,
            "poly_power" => self.trainer.poly_power = parse(key, value)?,
            "temperature" => self.loss.temperature = parse(key, value)?,
            "aux_weight" => self.loss.aux_weight = parse(key, value)?,
            "key_momentum" => self.loss.momentum = parse(key, value)?,
            "bank_capacity" => self.bank_capacity = parse(key, value)?,
            "embed_dim" => self.model.embed_dim = parse(key, value)?,
            "channels" => self.model.channels = parse_channels(value)?,
            "input_size" => {
                let size: usize = parse(key, value)?;
                self.model.input_height = size;
                self.model.input_width = size;
            }
            "input_height" => self.model.input_height = parse(key, value)?,
            "input_width" => self.model.input_width = parse(key, value)?,
            "scale_min" => self.augment.scale_min = parse(key, value)?,
            "scale_max" => self.augment.scale_max = parse(key, value)?,
            "flip_prob" => self.augment.flip_prob = parse(key, value)?,
            "brightness" => self.augment.brightness = parse(key, value)?,
            "contrast" => self.augment.contrast = parse(key, value)?,
            "saturation" => self.augment.saturation = parse(key, value)?,
            "grayscale_prob" => self.augment.grayscale_prob = parse(key, value)?,
            "min_object_area" => self.augment.min_object_area = parse(key, value)?,
            "max_retries" => self.augment.max_retries = parse(key, value)?,
            other => {
                return Err(Error::Config(format!(
                    "unknown settings key '{other}'; known keys: {}",
                    KNOWN_KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Reads and applies a settings file on top of the current values.
    pub fn apply_file(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut seen = std::collections::HashSet::new();
        for (number, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "{}:{}: expected 'key = value', found '{line}'",
                    path.display(),
                    number + 1
                ))
            })?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!(
                    "{}:{}: key '{key}' appears twice",
                    path.display(),
                    number + 1
                )));
            }
            self.apply(key, value.trim()).map_err(|e| {
                Error::Config(format!("{}:{}: {e}", path.display(), number + 1))
            })?;
        }
        Ok(())
    }

    /// Routes the base seed to every component that draws randomness.
    pub fn set_seed(&mut self, seed: u64) {
        self.trainer.seed = seed;
        self.augment.seed = seed;
    }

    /// Validates the combined settings.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.trainer.validate()?;
        self.loss.validate()?;
        self.augment.validate()?;
        if self.bank_capacity == 0 {
            return Err(Error::Config("bank_capacity must be at least 1".into()));
        }
        Ok(())
    }
}
