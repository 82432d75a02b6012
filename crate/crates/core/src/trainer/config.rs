//! Training configuration and its flat `key = value` file format.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::encoder::{self, EncoderConfig};
use crate::error::{Error, Result};
use crate::eval::{DatasetSpec, PrototypeMode};
use crate::objective::LossWeights;

/// Where the semantic-guidance reference comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Guidance {
    /// Mean embedding of the top-k filtered LLM descriptions.
    Llm,
    /// Embedding of the hand-written template filled with the class name.
    Handcrafted,
    /// No guidance term.
    None,
}

impl FromStr for Guidance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "llm" | "llm-fixture" => Ok(Self::Llm),
            "handcrafted" => Ok(Self::Handcrafted),
            "none" => Ok(Self::None),
            other => Err(Error::InvalidConfig(format!(
                "guidance must be llm, llm-fixture, handcrafted or none, got {other:?}"
            ))),
        }
    }
}

impl fmt::Display for Guidance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Llm => "llm",
            Self::Handcrafted => "handcrafted",
            Self::None => "none",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    Constant,
    Cosine,
}

impl FromStr for Schedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "constant" => Ok(Self::Constant),
            "cosine" => Ok(Self::Cosine),
            other => Err(Error::InvalidConfig(format!(
                "schedule must be constant or cosine, got {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Prototypes {
    Anchored,
    Random,
}

/// Everything that determines a training run. The defaults are the desk
/// preset; [`TrainConfig::paper`] switches the optimizer to the published
/// settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub prompts: usize,
    pub context_len: usize,
    pub vocab_size: usize,
    pub token_dim: usize,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub feature_dim: usize,
    pub identity_image: bool,
    pub tau: f64,
    pub sigma_init: f64,
    pub lr: f64,
    pub momentum: f64,
    pub schedule: Schedule,
    pub epochs: usize,
    pub batch_size: usize,
    pub classes: usize,
    pub shots: usize,
    pub test_per_class: usize,
    pub sigma_data: f64,
    pub prototypes: Prototypes,
    pub prototype_scale: f64,
    pub lambda_sg: f64,
    pub lambda_div: f64,
    pub k: usize,
    pub samples_per_template: usize,
    pub encoder_seed: u64,
    pub data_seed: u64,
    pub init_seed: u64,
    pub guidance: Guidance,
    pub init_template: String,
    pub handcrafted_template: String,
    pub zero_shot_template: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

/// Every key accepted by [`TrainConfig::set`], in file order. `seed` sets
/// the three seeds at once.
pub const KEYS: &[&str] = &[
    "prompts",
    "context_len",
    "vocab_size",
    "token_dim",
    "hidden_dim",
    "embed_dim",
    "feature_dim",
    "identity_image",
    "tau",
    "sigma_init",
    "lr",
    "momentum",
    "schedule",
    "epochs",
    "batch_size",
    "classes",
    "shots",
    "test_per_class",
    "sigma_data",
    "prototypes",
    "prototype_scale",
    "lambda_sg",
    "lambda_div",
    "k",
    "samples_per_template",
    "encoder_seed",
    "data_seed",
    "init_seed",
    "seed",
    "guidance",
    "init_template",
    "handcrafted_template",
    "zero_shot_template",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::InvalidConfig(format!("cannot parse {value:?} for {key}")))
}

impl TrainConfig {
    pub fn desk() -> Self {
        Self {
            prompts: 4,
            context_len: 4,
            vocab_size: 4096,
            token_dim: 32,
            hidden_dim: 64,
            embed_dim: 64,
            feature_dim: 64,
            identity_image: true,
            tau: 30.0,
            sigma_init: 0.02,
            lr: 0.5,
            momentum: 0.0,
            schedule: Schedule::Constant,
            epochs: 50,
            batch_size: 32,
            classes: 10,
            shots: 16,
            test_per_class: 50,
            sigma_data: 0.15,
            prototypes: Prototypes::Anchored,
            prototype_scale: 0.5,
            lambda_sg: 8.0,
            lambda_div: 1.0,
            k: 4,
            samples_per_template: 2,
            encoder_seed: 0,
            data_seed: 0,
            init_seed: 0,
            guidance: Guidance::Llm,
            init_template: "a photo of a".to_string(),
            handcrafted_template: "a photo of {cls}".to_string(),
            zero_shot_template: "a photo of a {cls}".to_string(),
        }
    }

    /// Published optimizer settings: SGD at 0.002, batch 128, 100 epochs.
    pub fn paper() -> Self {
        Self {
            lr: 0.002,
            batch_size: 128,
            epochs: 100,
            ..Self::desk()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            other => Err(Error::InvalidConfig(format!("unknown preset {other:?}"))),
        }
    }

    /// Sets one key from its text form. Dashes in `key` are read as
    /// underscores so flag spellings work too.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().replace('-', "_");
        let v = value;
        match key.as_str() {
            "prompts" => self.prompts = parse(&key, v)?,
            "context_len" => self.context_len = parse(&key, v)?,
            "vocab_size" => self.vocab_size = parse(&key, v)?,
            "token_dim" => self.token_dim = parse(&key, v)?,
            "hidden_dim" => self.hidden_dim = parse(&key, v)?,
            "embed_dim" => self.embed_dim = parse(&key, v)?,
            "feature_dim" => self.feature_dim = parse(&key, v)?,
            "identity_image" => self.identity_image = parse(&key, v)?,
            "tau" => self.tau = parse(&key, v)?,
            "sigma_init" => self.sigma_init = parse(&key, v)?,
            "lr" => self.lr = parse(&key, v)?,
            "momentum" => self.momentum = parse(&key, v)?,
            "schedule" => self.schedule = v.parse()?,
            "epochs" => self.epochs = parse(&key, v)?,
            "batch_size" => self.batch_size = parse(&key, v)?,
            "classes" => self.classes = parse(&key, v)?,
            "shots" => self.shots = parse(&key, v)?,
            "test_per_class" => self.test_per_class = parse(&key, v)?,
            "sigma_data" => self.sigma_data = parse(&key, v)?,
            "prototypes" => {
                self.prototypes = match v.trim() {
                    "anchored" => Prototypes::Anchored,
                    "random" => Prototypes::Random,
                    other => {
                        return Err(Error::InvalidConfig(format!(
                            "prototypes must be anchored or random, got {other:?}"
                        )))
                    }
                }
            }
            "prototype_scale" => self.prototype_scale = parse(&key, v)?,
            "lambda_sg" => self.lambda_sg = parse(&key, v)?,
            "lambda_div" => self.lambda_div = parse(&key, v)?,
            "k" => self.k = parse(&key, v)?,
            "samples_per_template" => self.samples_per_template = parse(&key, v)?,
            "encoder_seed" => self.encoder_seed = parse(&key, v)?,
            "data_seed" => self.data_seed = parse(&key, v)?,
            "init_seed" => self.init_seed = parse(&key, v)?,
            "seed" => {
                let s = parse(&key, v)?;
                self.encoder_seed = s;
                self.data_seed = s;
                self.init_seed = s;
            }
            "guidance" => self.guidance = v.parse()?,
            "init_template" => self.init_template = v.trim().to_string(),
            "handcrafted_template" => self.handcrafted_template = v.trim().to_string(),
            "zero_shot_template" => self.zero_shot_template = v.trim().to_string(),
            other => return Err(Error::InvalidConfig(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Applies a `key = value` text: one pair per line, `#` starts a comment.
    pub fn apply_kv(&mut self, text: &str) -> Result<()> {
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::InvalidConfig(format!("line {}: expected key = value", lineno + 1))
            })?;
            self.set(key, value)
                .map_err(|e| Error::InvalidConfig(format!("line {}: {e}", lineno + 1)))?;
        }
        Ok(())
    }

    /// Reads a config file on top of the desk preset and validates it.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::desk();
        cfg.apply_kv(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// The config as a file [`TrainConfig::apply_kv`] reads back unchanged.
    pub fn to_kv(&self) -> String {
        let v = serde_json::to_value(self).expect("config serializes");
        let mut out = String::new();
        for key in KEYS.iter().filter(|k| **k != "seed") {
            let value = match &v[*key] {
                serde_json::Value::String(s) => s.clone(),
                other => other.to_string(),
            };
            out.push_str(&format!("{key} = {value}\n"));
        }
        out
    }

    /// Range check of a single key, ignoring how it relates to the others.
    pub fn check_field(&self, key: &str) -> Result<()> {
        let key = key.trim().replace('-', "_");
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        let at_least_one = |v: usize| {
            if v == 0 {
                bad(format!("{key} must be >= 1"))
            } else {
                Ok(())
            }
        };
        let non_negative = |v: f64| {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                bad(format!("{key} must be >= 0, got {v}"))
            }
        };
        match key.as_str() {
            "prompts" => at_least_one(self.prompts),
            "context_len" => at_least_one(self.context_len),
            "vocab_size" => at_least_one(self.vocab_size),
            "token_dim" => at_least_one(self.token_dim),
            "hidden_dim" => at_least_one(self.hidden_dim),
            "embed_dim" => at_least_one(self.embed_dim),
            "feature_dim" => at_least_one(self.feature_dim),
            "epochs" => at_least_one(self.epochs),
            "batch_size" => at_least_one(self.batch_size),
            "shots" => at_least_one(self.shots),
            "test_per_class" => at_least_one(self.test_per_class),
            "k" => at_least_one(self.k),
            "samples_per_template" => at_least_one(self.samples_per_template),
            "classes" if self.classes < 4 || !self.classes.is_multiple_of(2) => bad(format!(
                "classes must be even and >= 4 (two per split), got {}",
                self.classes
            )),
            "tau" if !(self.tau > 0.0 && self.tau.is_finite()) => {
                bad(format!("tau must be > 0, got {}", self.tau))
            }
            "lr" => non_negative(self.lr),
            "momentum" if !(0.0..1.0).contains(&self.momentum) => {
                bad(format!("momentum must be in [0, 1), got {}", self.momentum))
            }
            "sigma_init" => non_negative(self.sigma_init),
            "sigma_data" => non_negative(self.sigma_data),
            "prototype_scale" => non_negative(self.prototype_scale),
            "lambda_sg" => non_negative(self.lambda_sg),
            "lambda_div" => non_negative(self.lambda_div),
            "handcrafted_template" => {
                crate::descriptions::fill_class_template(&self.handcrafted_template, "x").map(drop)
            }
            "zero_shot_template" => {
                crate::descriptions::fill_class_template(&self.zero_shot_template, "x").map(drop)
            }
            _ => Ok(()),
        }
    }

    /// Range checks plus the constraints between keys. `lr = 0` is accepted
    /// (it freezes the context); the command line rejects it.
    pub fn validate(&self) -> Result<()> {
        for key in KEYS {
            self.check_field(key)?;
        }
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        let raw = crate::descriptions::TEMPLATES.len() * self.samples_per_template;
        if self.k > raw {
            return bad(format!("k = {} exceeds the {raw} descriptions per class", self.k));
        }
        if self.identity_image && self.feature_dim != self.embed_dim {
            return bad(format!(
                "identity image encoder needs feature_dim == embed_dim ({} vs {})",
                self.feature_dim, self.embed_dim
            ));
        }
        if self.prototypes == Prototypes::Anchored && self.feature_dim != self.embed_dim {
            return bad("anchored prototypes need feature_dim == embed_dim".into());
        }
        Ok(())
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            vocab_size: self.vocab_size,
            token_dim: self.token_dim,
            hidden_dim: self.hidden_dim,
            embed_dim: self.embed_dim,
            feature_dim: self.feature_dim,
            seed: self.encoder_seed,
            identity_image: self.identity_image,
        }
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        DatasetSpec {
            classes: self.classes,
            shots: self.shots,
            test_per_class: self.test_per_class,
            sigma: self.sigma_data,
            feature_dim: self.feature_dim,
            seed: self.data_seed,
            prototypes: match self.prototypes {
                Prototypes::Random => PrototypeMode::Random,
                Prototypes::Anchored => PrototypeMode::Anchored {
                    context_len: self.context_len,
                    scale: self.prototype_scale,
                },
            },
            ..DatasetSpec::default()
        }
    }

    pub fn weights(&self) -> Result<LossWeights> {
        LossWeights::new(self.lambda_sg, self.lambda_div)
    }

    /// Learning rate for a 0-based epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.schedule {
            Schedule::Constant => self.lr,
            Schedule::Cosine => {
                let t = epoch as f64 / self.epochs as f64;
                0.5 * self.lr * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }

    /// Hash of every field except `epochs`, so a run can be extended.
    pub fn fingerprint(&self) -> String {
        let mut c = self.clone();
        c.epochs = 0;
        encoder::fingerprint(serde_json::to_string(&c).expect("config serializes").as_bytes())
    }
}
