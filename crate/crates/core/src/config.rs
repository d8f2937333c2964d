//! Training configuration and its `key = value` text form.

use std::collections::HashSet;
use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use fino_tensor::suite::fnv1a;

use crate::data::AugmentPolicy;
use crate::error::{FinoError, Result};
use crate::losses::LossWeights;
use crate::model::ModelConfig;
use crate::optim::AdamWConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub poly_power: f64,
    pub optimizer: AdamWConfig,
    pub seed: u64,
    pub loss: LossWeights,
    pub threshold: f64,
    /// Caps the schedule length below `epochs * batches_per_epoch`.
    pub max_steps: Option<usize>,
    pub model: ModelConfig,
    pub augment: AugmentPolicy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 75,
            batch_size: 2,
            lr: 1e-3,
            poly_power: 0.9,
            optimizer: AdamWConfig::default(),
            seed: 0,
            loss: LossWeights::default(),
            threshold: 0.5,
            max_steps: None,
            model: ModelConfig::default(),
            augment: AugmentPolicy::identity(),
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| FinoError::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_list(key: &str, value: &str) -> Result<[usize; 4]> {
    let items = value.split(',').map(|v| parse_value(key, v.trim())).collect::<Result<Vec<usize>>>()?;
    items
        .try_into()
        .map_err(|_| FinoError::Config(format!("`{key}` needs exactly four values, got `{value}`")))
}

fn join(list: &[usize; 4]) -> String {
    list.map(|v| v.to_string()).join(",")
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.max_steps == Some(0) {
            return Err(FinoError::Config("epochs, batch_size and max_steps must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(FinoError::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if !(self.poly_power > 0.0 && self.poly_power.is_finite()) {
            return Err(FinoError::Config(format!("poly power {} must be positive", self.poly_power)));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(FinoError::Config(format!("threshold {} is outside (0, 1)", self.threshold)));
        }
        self.optimizer.validate()?;
        self.loss.validate()?;
        self.model.validate()?;
        self.augment.validate()
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        let a = &mut self.augment;
        match key {
            "epochs" => self.epochs = parse_value(key, v)?,
            "batch_size" => self.batch_size = parse_value(key, v)?,
            "lr" => self.lr = parse_value(key, v)?,
            "poly_power" => self.poly_power = parse_value(key, v)?,
            "weight_decay" => self.optimizer.weight_decay = parse_value(key, v)?,
            "beta1" => self.optimizer.beta1 = parse_value(key, v)?,
            "beta2" => self.optimizer.beta2 = parse_value(key, v)?,
            "adam_eps" => self.optimizer.eps = parse_value(key, v)?,
            "seed" => self.seed = parse_value(key, v)?,
            "lambda" => self.loss.lambda = parse_value(key, v)?,
            "threshold" => self.threshold = parse_value(key, v)?,
            "max_steps" => {
                let n: usize = parse_value(key, v)?;
                self.max_steps = (n > 0).then_some(n);
            }
            "widths" => m.widths = parse_list(key, v)?,
            "blocks" => m.blocks = parse_list(key, v)?,
            "stem_stride" => m.stem_stride = parse_value(key, v)?,
            "activation" => m.activation = v.parse()?,
            "norm_groups" => m.norm_groups = parse_value(key, v)?,
            "region" => m.region = parse_value(key, v)?,
            "head_width" => m.head_width = parse_value(key, v)?,
            "stages" => m.stages = v.parse()?,
            "cdl" => m.cdl = parse_value(key, v)?,
            "bsa" => m.bsa = parse_value(key, v)?,
            "rega" => m.rega = parse_value(key, v)?,
            "gate_clamp" => m.gate_clamp = parse_value(key, v)?,
            "rcl_polarity" => m.rcl_polarity = v.parse()?,
            "aug_hflip" => a.hflip = parse_value(key, v)?,
            "aug_vflip" => a.vflip = parse_value(key, v)?,
            "aug_rotate90" => a.rotate90 = parse_value(key, v)?,
            "aug_crop" => {
                let n: usize = parse_value(key, v)?;
                a.crop = (n > 0).then_some(n);
            }
            "aug_brightness" => a.brightness = parse_value(key, v)?,
            _ => return Err(FinoError::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines over the defaults. `#` starts a comment;
    /// unknown or repeated keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = HashSet::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| FinoError::Config(format!("line {}: expected `key = value`", no + 1)))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(FinoError::Config(format!("line {}: `{key}` given twice", no + 1)));
            }
            cfg.set(key, value.trim())
                .map_err(|e| FinoError::Config(format!("line {}: {}", no + 1, e.to_string().trim_start_matches("invalid configuration: "))))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| FinoError::load(path, e.to_string()))?;
        Self::parse(&text)
    }

    /// Stable digest of the canonical text form.
    pub fn hash(&self) -> u64 {
        fnv1a(&self.to_string())
    }
}

/// Canonical text form: every key, fixed order, parseable by [`TrainConfig::parse`].
impl fmt::Display for TrainConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let m = &self.model;
        let a = &self.augment;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}");
        kv("epochs", self.epochs.to_string())?;
        kv("batch_size", self.batch_size.to_string())?;
        kv("lr", self.lr.to_string())?;
        kv("poly_power", self.poly_power.to_string())?;
        kv("weight_decay", self.optimizer.weight_decay.to_string())?;
        kv("beta1", self.optimizer.beta1.to_string())?;
        kv("beta2", self.optimizer.beta2.to_string())?;
        kv("adam_eps", self.optimizer.eps.to_string())?;
        kv("seed", self.seed.to_string())?;
        kv("lambda", self.loss.lambda.to_string())?;
        kv("threshold", self.threshold.to_string())?;
        kv("max_steps", self.max_steps.unwrap_or(0).to_string())?;
        kv("widths", join(&m.widths))?;
        kv("blocks", join(&m.blocks))?;
        kv("stem_stride", m.stem_stride.to_string())?;
        kv("activation", m.activation.to_string())?;
        kv("norm_groups", m.norm_groups.to_string())?;
        kv("region", m.region.to_string())?;
        kv("head_width", m.head_width.to_string())?;
        kv("stages", m.stages.to_string())?;
        kv("cdl", m.cdl.to_string())?;
        kv("bsa", m.bsa.to_string())?;
        kv("rega", m.rega.to_string())?;
        kv("gate_clamp", m.gate_clamp.to_string())?;
        kv("rcl_polarity", m.rcl_polarity.to_string())?;
        kv("aug_hflip", a.hflip.to_string())?;
        kv("aug_vflip", a.vflip.to_string())?;
        kv("aug_rotate90", a.rotate90.to_string())?;
        kv("aug_crop", a.crop.unwrap_or(0).to_string())?;
        kv("aug_brightness", a.brightness.to_string())?;
        f.write_str(&s)
    }
}
