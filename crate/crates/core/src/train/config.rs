//! Run configuration and its flat `key = value` text form.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use thiserror::Error;

use crate::data::CANVAS;
use crate::nets::ArchConfig;
use crate::optim::AdamConfig;

/// Snapshot epochs used when none are configured, clipped to the run length.
pub const DEFAULT_SNAPSHOTS: [u32; 7] = [1, 5, 10, 20, 30, 50, 100];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("{key}: cannot parse {value:?}")]
    Value { key: String, value: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: u32,
    pub batch_size: usize,
    pub z_dim: usize,
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub adam_eps: f32,
    pub leaky_slope: f32,
    pub init_std: f32,
    /// Generator channel widths, coarsest first.
    pub widths: Vec<usize>,
    pub master_seed: u64,
    /// `None` selects [`DEFAULT_SNAPSHOTS`] within `1..=epochs` plus the
    /// final epoch.
    pub snapshot_epochs: Option<Vec<u32>>,
    pub data: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let arch = ArchConfig::default();
        let adam = AdamConfig::default();
        Self {
            epochs: 100,
            batch_size: 64,
            z_dim: arch.z_dim,
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            adam_eps: adam.eps,
            leaky_slope: arch.leaky_slope,
            init_std: arch.init_std,
            widths: arch.widths,
            master_seed: 0,
            snapshot_epochs: None,
            data: None,
            out_dir: PathBuf::from("out"),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::Value {
        key: key.to_string(),
        value: value.to_string(),
    })
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>, ConfigError> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl TrainConfig {
    pub fn arch(&self) -> ArchConfig {
        ArchConfig {
            z_dim: self.z_dim,
            image_size: CANVAS,
            widths: self.widths.clone(),
            leaky_slope: self.leaky_slope,
            init_std: self.init_std,
            ..ArchConfig::default()
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }

    /// Effective snapshot epochs, ascending and deduplicated.
    pub fn snapshots(&self) -> Vec<u32> {
        let mut s = match &self.snapshot_epochs {
            Some(list) => list.clone(),
            None => {
                let mut s: Vec<u32> = DEFAULT_SNAPSHOTS
                    .iter()
                    .copied()
                    .filter(|&e| e <= self.epochs)
                    .collect();
                s.push(self.epochs);
                s
            }
        };
        s.sort_unstable();
        s.dedup();
        s
    }

    /// Sets one field from its text form. Keys may use `-` or `_`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let value = value.trim();
        match key.trim().replace('-', "_").as_str() {
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "z_dim" => self.z_dim = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "beta1" => self.beta1 = parse(key, value)?,
            "beta2" => self.beta2 = parse(key, value)?,
            "adam_eps" => self.adam_eps = parse(key, value)?,
            "leaky_slope" => self.leaky_slope = parse(key, value)?,
            "init_std" => self.init_std = parse(key, value)?,
            "widths" => self.widths = parse_list(key, value)?,
            "seed" => self.master_seed = parse(key, value)?,
            "snapshot_epochs" => self.snapshot_epochs = Some(parse_list(key, value)?),
            "data" => self.data = Some(PathBuf::from(value)),
            "out" => self.out_dir = PathBuf::from(value),
            other => return Err(ConfigError::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    /// Applies every `key = value` line of `text` on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                msg: format!("expected `key = value`, got {line:?}"),
            })?;
            self.set(k, v).map_err(|e| ConfigError::Syntax {
                line: i + 1,
                msg: e.to_string(),
            })?;
        }
        Ok(())
    }

    /// Defaults overlaid with `text`.
    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    /// The effective configuration as `key = value` lines; parsing it back
    /// with [`TrainConfig::from_text`] reproduces the run.
    pub fn echo(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").expect("string write");
        kv("epochs", self.epochs.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("z_dim", self.z_dim.to_string());
        kv("lr", self.lr.to_string());
        kv("beta1", self.beta1.to_string());
        kv("beta2", self.beta2.to_string());
        kv("adam_eps", self.adam_eps.to_string());
        kv("leaky_slope", self.leaky_slope.to_string());
        kv("init_std", self.init_std.to_string());
        kv("widths", join(&self.widths));
        kv("seed", self.master_seed.to_string());
        match &self.snapshot_epochs {
            Some(list) => kv("snapshot_epochs", join(list)),
            // left unset so a resumed, longer run still snapshots its last epoch
            None => kv("# snapshot_epochs", format!("{} (default)", join(&self.snapshots()))),
        }
        if let Some(d) = &self.data {
            kv("data", d.display().to_string());
        }
        kv("out", self.out_dir.display().to_string());
        s
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        for (name, v) in [
            ("lr", self.lr),
            ("adam_eps", self.adam_eps),
            ("init_std", self.init_std),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return bad(format!("{name} must be in [0, 1), got {v}"));
            }
        }
        if !(self.leaky_slope.is_finite() && self.leaky_slope >= 0.0) {
            return bad(format!("leaky_slope must be non-negative, got {}", self.leaky_slope));
        }
        if let Some(s) = &self.snapshot_epochs {
            if s.is_empty() || s.iter().any(|&e| e == 0 || e > self.epochs) {
                return bad(format!("snapshot_epochs {s:?} must lie within 1..={}", self.epochs));
            }
        }
        self.arch().validate().map_err(|e| ConfigError::Invalid(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_echo_has_the_published_hyperparameters() {
        let echo = TrainConfig::default().echo();
        for line in [
            "lr = 0.0002",
            "beta1 = 0.5",
            "batch_size = 64",
            "z_dim = 100",
            "leaky_slope = 0.2",
            "epochs = 100",
            "init_std = 0.02",
            "# snapshot_epochs = 1,5,10,20,30,50,100 (default)",
        ] {
            assert!(echo.lines().any(|l| l == line), "missing {line:?} in\n{echo}");
        }
    }

    #[test]
    fn echo_round_trips() {
        let mut c = TrainConfig {
            epochs: 7,
            widths: vec![8, 4],
            master_seed: 99,
            data: Some("d/m.tsv".into()),
            adam_eps: 1e-8,
            ..TrainConfig::default()
        };
        c.lr = 3.3e-4;
        let back = TrainConfig::from_text(&c.echo()).unwrap();
        assert_eq!(back.echo(), c.echo());
        assert_eq!(back.snapshots(), vec![1, 5, 7]);
        assert_eq!(back.snapshot_epochs, None);
        let explicit = TrainConfig { snapshot_epochs: Some(vec![2, 3]), ..c };
        assert_eq!(TrainConfig::from_text(&explicit.echo()).unwrap(), explicit);
        assert_eq!(back.adam_eps, 1e-8);
    }

    #[test]
    fn snapshots_clip_to_run_length() {
        let c = TrainConfig { epochs: 30, ..TrainConfig::default() };
        assert_eq!(c.snapshots(), vec![1, 5, 10, 20, 30]);
        let c = TrainConfig { epochs: 3, ..TrainConfig::default() };
        assert_eq!(c.snapshots(), vec![1, 3]);
    }

    #[test]
    fn text_errors() {
        assert!(matches!(TrainConfig::from_text("epochs 3"), Err(ConfigError::Syntax { line: 1, .. })));
        assert!(matches!(TrainConfig::from_text("# c\ncolour = red"), Err(ConfigError::Syntax { line: 2, .. })));
        assert!(TrainConfig::from_text("lr = fast").is_err());
        let c = TrainConfig::from_text("batch-size = 8\n").unwrap();
        assert_eq!(c.batch_size, 8);
    }

    #[test]
    fn validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = [
            TrainConfig { epochs: 0, ..TrainConfig::default() },
            TrainConfig { lr: -1.0, ..TrainConfig::default() },
            TrainConfig { beta1: 1.0, ..TrainConfig::default() },
            TrainConfig { snapshot_epochs: Some(vec![101]), ..TrainConfig::default() },
            TrainConfig { widths: vec![8; 6], ..TrainConfig::default() },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }
}
