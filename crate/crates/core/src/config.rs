//! Flat `key = value` configuration files.
//!
//! Keys mirror the [`ModelConfig`] and [`TrainConfig`] field names. `#`
//! starts a comment. Unknown or repeated keys are errors. `n_features` and
//! `task` are not configurable: they come from the dataset.

use std::collections::HashSet;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    pub key: String,
    pub value: String,
    pub line: u64,
}

/// Split a config file into entries, rejecting malformed lines and repeats.
pub fn parse_entries(text: &str, source: &str) -> Result<Vec<Entry>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = (i + 1) as u64;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse {
            path: source.to_string(),
            line,
            message,
        };
        let (key, value) = content
            .split_once('=')
            .ok_or_else(|| err(format!("expected `key = value`, got `{content}`")))?;
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() {
            return Err(err("empty key".into()));
        }
        if !seen.insert(key.to_string()) {
            return Err(err(format!("key `{key}` given twice")));
        }
        out.push(Entry {
            key: key.to_string(),
            value: value.to_string(),
            line,
        });
    }
    Ok(out)
}

pub(crate) fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

impl Entry {
    pub(crate) fn error(&self, source: &str, message: impl Into<String>) -> Error {
        Error::Parse {
            path: source.to_string(),
            line: self.line,
            message: message.into(),
        }
    }

    pub(crate) fn parse<T: FromStr>(&self, source: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        self.value
            .parse()
            .map_err(|e| self.error(source, format!("bad value `{}` for `{}`: {e}", self.value, self.key)))
    }

    /// `none` (any case) or an empty value reads as `None`.
    pub(crate) fn parse_optional<T: FromStr>(&self, source: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        if self.value.is_empty() || self.value.eq_ignore_ascii_case("none") {
            Ok(None)
        } else {
            self.parse(source).map(Some)
        }
    }
}

/// Model and training settings read from one config file.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&read_text(path)?, &path.display().to_string())
    }

    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for entry in parse_entries(text, source)? {
            if !cfg.apply(&entry, source)? {
                return Err(entry.error(source, format!("unknown key `{}`", entry.key)));
            }
        }
        cfg.train.validate()?;
        Ok(cfg)
    }

    /// Apply one entry; returns `false` if the key is not a model or
    /// training key.
    pub(crate) fn apply(&mut self, e: &Entry, source: &str) -> Result<bool> {
        let (m, t) = (&mut self.model, &mut self.train);
        match e.key.as_str() {
            "n_layers" => m.n_layers = e.parse(source)?,
            "n_heads" => m.n_heads = e.parse(source)?,
            "d_model" => m.d_model = e.parse(source)?,
            "dropout" => m.dropout = e.parse(source)?,
            "lambda" => m.lambda = e.parse(source)?,
            "attention_kind" => m.attention_kind = e.parse(source)?,
            "diagonal_mask" => m.diagonal_mask = e.parse(source)?,
            "init_seed" => m.init_seed = e.parse(source)?,
            "learning_rate" => t.learning_rate = e.parse(source)?,
            "beta1" => t.beta1 = e.parse(source)?,
            "beta2" => t.beta2 = e.parse(source)?,
            "epsilon" => t.epsilon = e.parse(source)?,
            "epochs" => t.epochs = e.parse(source)?,
            "batch_size" => t.batch_size = e.parse(source)?,
            "mim_rate" => t.mim_rate = e.parse(source)?,
            "seed" => t.seed = e.parse(source)?,
            "labeled_fraction" => t.labeled_fraction = e.parse(source)?,
            "clip_norm" => t.clip_norm = e.parse_optional(source)?,
            "validation_fraction" => t.validation_fraction = e.parse(source)?,
            "patience" => t.patience = e.parse_optional(source)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}
