//! Flat `key = value` run configuration.
//!
//! ```text
//! # comments start with '#'
//! data = data/synthetic.csv
//! split = generic
//! lookback = 96
//! ```
//!
//! Every key has a default and unknown keys are rejected.

use std::path::{Path, PathBuf};

use crate::data::{SplitPreset, WindowSpec};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::Schedule;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data: PathBuf,
    pub date_column: String,
    pub split: SplitPreset,
    pub window: WindowSpec,
    /// `channels` is filled in from the dataset at run time.
    pub model: ModelConfig,
    pub schedule: Schedule,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        RunConfig {
            data: PathBuf::from("data/ETTh2.csv"),
            date_column: "date".into(),
            split: SplitPreset::EttHourly,
            window: WindowSpec {
                lookback: model.lookback,
                horizon: model.horizon,
                stride: 1,
            },
            model,
            schedule: Schedule::default(),
            out_dir: PathBuf::from("runs/latest"),
        }
    }
}

/// Every accepted key, in echo order.
pub const KEYS: &[&str] = &[
    "data",
    "date_column",
    "split",
    "lookback",
    "horizon",
    "window_stride",
    "patch_len",
    "patch_stride",
    "model_dim",
    "ffn_dim",
    "num_heads",
    "ffn_activation",
    "logit_smoothing",
    "softmax_kind",
    "revin_affine",
    "revin_eps",
    "positional_embedding",
    "dropout",
    "attn_dropout",
    "head_dropout",
    "epochs",
    "patience",
    "lr",
    "lr_decay",
    "batch_size",
    "grad_clip",
    "seed",
    "out_dir",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!(
            "invalid value `{value}` for `{key}` (expected true or false)"
        ))),
    }
}

impl RunConfig {
    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "data" => self.data = PathBuf::from(value),
            "date_column" => self.date_column = value.to_string(),
            "split" => self.split = value.parse()?,
            "lookback" => {
                self.window.lookback = parse(key, value)?;
                self.model.lookback = self.window.lookback;
            }
            "horizon" => {
                self.window.horizon = parse(key, value)?;
                self.model.horizon = self.window.horizon;
            }
            "window_stride" => self.window.stride = parse(key, value)?,
            "patch_len" => self.model.patch_len = parse(key, value)?,
            "patch_stride" => self.model.patch_stride = parse(key, value)?,
            "model_dim" => self.model.model_dim = parse(key, value)?,
            "ffn_dim" => self.model.ffn_dim = parse(key, value)?,
            "num_heads" => self.model.num_heads = parse(key, value)?,
            "ffn_activation" => self.model.ffn_activation = value.parse()?,
            "logit_smoothing" => self.model.logit_smoothing = parse_bool(key, value)?,
            "softmax_kind" => self.model.softmax_kind = value.parse()?,
            "revin_affine" => self.model.revin_affine = parse_bool(key, value)?,
            "revin_eps" => self.model.revin_eps = parse(key, value)?,
            "positional_embedding" => self.model.positional_embedding = parse_bool(key, value)?,
            "dropout" => self.model.dropout = parse(key, value)?,
            "attn_dropout" => self.model.attn_dropout = parse(key, value)?,
            "head_dropout" => self.model.head_dropout = parse(key, value)?,
            "epochs" => self.schedule.epochs = parse(key, value)?,
            "patience" => self.schedule.patience = parse(key, value)?,
            "lr" => self.schedule.lr = parse(key, value)?,
            "lr_decay" => self.schedule.lr_decay = parse(key, value)?,
            "batch_size" => self.schedule.batch_size = parse(key, value)?,
            "grad_clip" => {
                self.schedule.grad_clip = match value {
                    "none" | "off" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "seed" => self.schedule.seed = parse(key, value)?,
            "out_dir" => self.out_dir = PathBuf::from(value),
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let v = match key {
            "data" => self.data.display().to_string(),
            "date_column" => self.date_column.clone(),
            "split" => self.split.name(),
            "lookback" => self.window.lookback.to_string(),
            "horizon" => self.window.horizon.to_string(),
            "window_stride" => self.window.stride.to_string(),
            "patch_len" => self.model.patch_len.to_string(),
            "patch_stride" => self.model.patch_stride.to_string(),
            "model_dim" => self.model.model_dim.to_string(),
            "ffn_dim" => self.model.ffn_dim.to_string(),
            "num_heads" => self.model.num_heads.to_string(),
            "ffn_activation" => self.model.ffn_activation.name().into(),
            "logit_smoothing" => self.model.logit_smoothing.to_string(),
            "softmax_kind" => self.model.softmax_kind.name().into(),
            "revin_affine" => self.model.revin_affine.to_string(),
            "revin_eps" => self.model.revin_eps.to_string(),
            "positional_embedding" => self.model.positional_embedding.to_string(),
            "dropout" => self.model.dropout.to_string(),
            "attn_dropout" => self.model.attn_dropout.to_string(),
            "head_dropout" => self.model.head_dropout.to_string(),
            "epochs" => self.schedule.epochs.to_string(),
            "patience" => self.schedule.patience.to_string(),
            "lr" => self.schedule.lr.to_string(),
            "lr_decay" => self.schedule.lr_decay.to_string(),
            "batch_size" => self.schedule.batch_size.to_string(),
            "grad_clip" => match self.schedule.grad_clip {
                Some(c) => c.to_string(),
                None => "none".into(),
            },
            "seed" => self.schedule.seed.to_string(),
            "out_dir" => self.out_dir.display().to_string(),
            _ => return None,
        };
        Some(v)
    }

    /// Applies `key = value` lines on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "line {}: expected `key = value`, got `{line}`",
                    n + 1
                ))
            })?;
            self.set(key.trim(), value).map_err(|e| match e {
                Error::Config(msg) => Error::Config(format!("line {}: {msg}", n + 1)),
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Applies `key=value` overrides, e.g. from the command line.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (key, value) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    /// Every effective value, one `key = value` line each, parseable by [`RunConfig::parse`].
    pub fn to_text(&self) -> String {
        KEYS.iter()
            .map(|k| format!("{k} = {}\n", self.get(k).expect("listed key")))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.window.validate()?;
        let mut model = self.model.clone();
        model.channels = model.channels.max(1);
        model.validate()?;
        if self.schedule.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        let (lr, decay) = (self.schedule.lr, self.schedule.lr_decay);
        if lr.is_nan() || lr < 0.0 || decay.is_nan() || decay <= 0.0 {
            return Err(Error::Config("lr must be ≥ 0 and lr_decay > 0".into()));
        }
        Ok(())
    }
}
