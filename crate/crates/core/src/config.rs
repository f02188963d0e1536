//! Flat `key = value` pipeline configuration.
//!
//! Lines are trimmed; blank lines and lines starting with `#` are ignored.
//! Keys may appear at most once per file. Values run to the end of the line.
//! Precedence is defaults, then the file, then `--set key=value` overrides.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub probe_data: Option<PathBuf>,
    pub selection_data: Option<PathBuf>,
    pub test_data: Option<PathBuf>,
    /// Used to fit a baseline head when `head_in` is not given.
    pub train_data: Option<PathBuf>,
    pub head_in: Option<PathBuf>,
    pub detector_in: Option<PathBuf>,
    pub out_dir: PathBuf,

    pub k: usize,
    pub eta: f64,
    pub lambda: f64,
    pub e1: usize,
    pub e2: usize,
    pub batch_size: usize,
    pub batches_per_epoch: usize,
    pub alpha: f64,
    pub beta: f64,
    pub r: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub ridge: f64,

    pub erm_epochs: usize,
    pub erm_lr: f64,
    pub erm_batch_size: usize,
}

impl Default for PipelineConfig {
    /// Hyperparameters of the Waterbirds setting.
    fn default() -> Self {
        PipelineConfig {
            probe_data: None,
            selection_data: None,
            test_data: None,
            train_data: None,
            head_in: None,
            detector_in: None,
            out_dir: PathBuf::from("out"),
            k: 2,
            eta: 5.0,
            lambda: 5.0,
            e1: 50,
            e2: 50,
            batch_size: 32,
            batches_per_epoch: 200,
            alpha: 1e-4,
            beta: 1e-3,
            r: 0.3,
            momentum: 0.9,
            weight_decay: 1e-4,
            seed: 0,
            ridge: 1e-8,
            erm_epochs: 20,
            erm_lr: 0.01,
            erm_batch_size: 64,
        }
    }
}

pub const KEYS: &[&str] = &[
    "probe_data",
    "selection_data",
    "test_data",
    "train_data",
    "head_in",
    "detector_in",
    "out_dir",
    "k",
    "eta",
    "lambda",
    "e1",
    "e2",
    "batch_size",
    "batches_per_epoch",
    "alpha",
    "beta",
    "r",
    "momentum",
    "weight_decay",
    "seed",
    "ridge",
    "erm_epochs",
    "erm_lr",
    "erm_batch_size",
];

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::ConfigValue {
        key: key.to_string(),
        message: format!("cannot parse `{value}` as {}", std::any::type_name::<T>()),
    })
}

fn parse_path(key: &str, value: &str) -> Result<PathBuf> {
    if value.is_empty() {
        return Err(Error::ConfigValue {
            key: key.into(),
            message: "empty path".into(),
        });
    }
    Ok(PathBuf::from(value))
}

impl PipelineConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "probe_data" => self.probe_data = Some(parse_path(key, value)?),
            "selection_data" => self.selection_data = Some(parse_path(key, value)?),
            "test_data" => self.test_data = Some(parse_path(key, value)?),
            "train_data" => self.train_data = Some(parse_path(key, value)?),
            "head_in" => self.head_in = Some(parse_path(key, value)?),
            "detector_in" => self.detector_in = Some(parse_path(key, value)?),
            "out_dir" => self.out_dir = parse_path(key, value)?,
            "k" => self.k = parse_num(key, value)?,
            "eta" => self.eta = parse_num(key, value)?,
            "lambda" => self.lambda = parse_num(key, value)?,
            "e1" => self.e1 = parse_num(key, value)?,
            "e2" => self.e2 = parse_num(key, value)?,
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "batches_per_epoch" => self.batches_per_epoch = parse_num(key, value)?,
            "alpha" => self.alpha = parse_num(key, value)?,
            "beta" => self.beta = parse_num(key, value)?,
            "r" => self.r = parse_num(key, value)?,
            "momentum" => self.momentum = parse_num(key, value)?,
            "weight_decay" => self.weight_decay = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "ridge" => self.ridge = parse_num(key, value)?,
            "erm_epochs" => self.erm_epochs = parse_num(key, value)?,
            "erm_lr" => self.erm_lr = parse_num(key, value)?,
            "erm_batch_size" => self.erm_batch_size = parse_num(key, value)?,
            _ => {
                return Err(Error::ConfigValue {
                    key: key.into(),
                    message: "unknown key".into(),
                })
            }
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut config = PipelineConfig::default();
        let mut seen: Vec<&str> = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Config {
                line: n + 1,
                message: format!("expected `key = value`, got `{line}`"),
            })?;
            let key = key.trim();
            if seen.contains(&key) {
                return Err(Error::Config {
                    line: n + 1,
                    message: format!("duplicate key `{key}`"),
                });
            }
            seen.push(key);
            config.set(key, value).map_err(|e| match e {
                Error::ConfigValue { key, message } => Error::Config {
                    line: n + 1,
                    message: format!("`{key}`: {message}"),
                },
                other => other,
            })?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Applies `key=value` overrides. Repeating a key with a different value
    /// is an error.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        let mut applied: Vec<(String, String)> = Vec::new();
        for item in overrides {
            let item = item.as_ref();
            let (key, value) = item.split_once('=').ok_or_else(|| Error::ConfigValue {
                key: item.to_string(),
                message: "override must look like key=value".into(),
            })?;
            let (key, value) = (key.trim().to_string(), value.trim().to_string());
            if let Some((_, prev)) = applied.iter().find(|(k, _)| *k == key) {
                if *prev != value {
                    return Err(Error::ConfigValue {
                        key,
                        message: format!("conflicting overrides `{prev}` and `{value}`"),
                    });
                }
                continue;
            }
            self.set(&key, &value)?;
            applied.push((key, value));
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, message: String| {
            Err(Error::ConfigValue {
                key: key.into(),
                message,
            })
        };
        if self.k == 0 {
            return bad("k", "must be >= 1".into());
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return bad("eta", format!("must be > 0, got {}", self.eta));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda", format!("must be >= 0, got {}", self.lambda));
        }
        for (key, lr) in [("alpha", self.alpha), ("beta", self.beta), ("erm_lr", self.erm_lr)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return bad(key, format!("must be > 0, got {lr}"));
            }
        }
        if !(self.r > 0.0 && self.r <= 0.5) {
            return bad("r", format!("must be in (0, 0.5], got {}", self.r));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum", format!("must be in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay", format!("must be >= 0, got {}", self.weight_decay));
        }
        if !(self.ridge >= 0.0 && self.ridge.is_finite()) {
            return bad("ridge", format!("must be >= 0, got {}", self.ridge));
        }
        if self.batch_size < 4 {
            return bad("batch_size", format!("must be >= 2 x classes, got {}", self.batch_size));
        }
        if self.erm_batch_size == 0 {
            return bad("erm_batch_size", "must be >= 1".into());
        }
        if let (Some(p), Some(s)) = (&self.probe_data, &self.selection_data) {
            if p == s {
                return bad("selection_data", "must differ from probe_data".into());
            }
        }
        Ok(())
    }

    /// Serializes every key that has a value, in `KEYS` order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        let entries: Vec<(&str, Option<String>)> = vec![
            ("probe_data", path(&self.probe_data)),
            ("selection_data", path(&self.selection_data)),
            ("test_data", path(&self.test_data)),
            ("train_data", path(&self.train_data)),
            ("head_in", path(&self.head_in)),
            ("detector_in", path(&self.detector_in)),
            ("out_dir", Some(self.out_dir.display().to_string())),
            ("k", Some(self.k.to_string())),
            ("eta", Some(self.eta.to_string())),
            ("lambda", Some(self.lambda.to_string())),
            ("e1", Some(self.e1.to_string())),
            ("e2", Some(self.e2.to_string())),
            ("batch_size", Some(self.batch_size.to_string())),
            ("batches_per_epoch", Some(self.batches_per_epoch.to_string())),
            ("alpha", Some(self.alpha.to_string())),
            ("beta", Some(self.beta.to_string())),
            ("r", Some(self.r.to_string())),
            ("momentum", Some(self.momentum.to_string())),
            ("weight_decay", Some(self.weight_decay.to_string())),
            ("seed", Some(self.seed.to_string())),
            ("ridge", Some(self.ridge.to_string())),
            ("erm_epochs", Some(self.erm_epochs.to_string())),
            ("erm_lr", Some(self.erm_lr.to_string())),
            ("erm_batch_size", Some(self.erm_batch_size.to_string())),
        ];
        for (key, value) in entries {
            if let Some(v) = value {
                let _ = writeln!(out, "{key} = {v}");
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_the_documented_setting() {
        let c = PipelineConfig::default();
        assert_eq!((c.k, c.eta, c.lambda, c.e1, c.e2), (2, 5.0, 5.0, 50, 50));
        assert_eq!((c.batch_size, c.batches_per_epoch), (32, 200));
        assert_eq!((c.alpha, c.beta, c.r), (0.0001, 0.001, 0.3));
        assert_eq!((c.momentum, c.weight_decay), (0.9, 1e-4));
    }

    #[test]
    fn parse_with_comments() {
        let c = PipelineConfig::parse("# comment\n\n  k = 4\nlambda=0\nprobe_data = a b.scpb\n").unwrap();
        assert_eq!(c.k, 4);
        assert_eq!(c.lambda, 0.0);
        assert_eq!(c.probe_data, Some(PathBuf::from("a b.scpb")));
    }

    #[test]
    fn parse_errors() {
        assert!(matches!(PipelineConfig::parse("nope = 1"), Err(Error::Config { line: 1, .. })));
        assert!(matches!(PipelineConfig::parse("k = two"), Err(Error::Config { line: 1, .. })));
        assert!(matches!(PipelineConfig::parse("k\n"), Err(Error::Config { line: 1, .. })));
        assert!(matches!(PipelineConfig::parse("k = 1\nk = 2"), Err(Error::Config { line: 2, .. })));
        assert!(PipelineConfig::parse("r = 0.7").is_err());
        assert!(PipelineConfig::parse("probe_data = x\nselection_data = x").is_err());
    }

    #[test]
    fn precedence_pairs() {
        // file beats defaults
        let mut c = PipelineConfig::parse("eta = 1.5").unwrap();
        assert_eq!(c.eta, 1.5);
        assert_eq!(c.lambda, PipelineConfig::default().lambda);
        // overrides beat file
        c.apply_overrides(&["eta=2.5"]).unwrap();
        assert_eq!(c.eta, 2.5);
        // overrides beat defaults
        let mut d = PipelineConfig::default();
        d.apply_overrides(&["lambda=0"]).unwrap();
        assert_eq!(d.lambda, 0.0);
    }

    #[test]
    fn override_errors() {
        let mut c = PipelineConfig::default();
        assert!(c.apply_overrides(&["bogus=1"]).is_err());
        assert!(c.apply_overrides(&["k=x"]).is_err());
        assert!(c.apply_overrides(&["k"]).is_err());
        assert!(c.apply_overrides(&["k=3", "k=4"]).is_err());
        assert!(c.apply_overrides(&["k=3", "k=3"]).is_ok());
    }

    #[test]
    fn default_round_trips() {
        let c = PipelineConfig::default();
        assert_eq!(PipelineConfig::parse(&c.to_text()).unwrap(), c);
        assert_eq!(KEYS.len(), c.to_text().lines().count() + 6);
    }
}
