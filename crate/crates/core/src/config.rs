//! Plain-text key/value configuration files.
//!
//! Format: one `key = value` pair per line; blank lines and lines starting
//! with `#` are ignored, as is anything after `#` on a value. Every key has a
//! default, so an empty file is valid; unknown or duplicate keys are errors.
//!
//! Training keys (`train --config`):
//!
//! | key               | default | meaning                                    |
//! |-------------------|---------|--------------------------------------------|
//! | seed              | 7       | master seed for init/shuffle/noise        |
//! | batch_size        | 64      | training batch size                        |
//! | patience          | 20      | early-stop patience in epochs              |
//! | max_epochs        | 200     | per-stage epoch cap                        |
//! | lr                | 1e-4    | stage-A learning rate                      |
//! | lr_high           | 1e-4    | stage-B rate for the branch-1 coder pair   |
//! | lr_low            | 1e-5    | stage-B rate for transferred/cloned groups |
//! | train_snr_db      | 10      | channel SNR during training                |
//! | channel           | awgn    | awgn or rayleigh                           |
//! | base_width        | 16      | first-layer feature width F                |
//! | branches          | 2       | number of sub-semantic branches L          |
//! | d                 | 8,8     | per-branch payload channels                |
//! | train_fraction    | 0.8     | dataset split                              |
//! | val_fraction      | 0.1     | dataset split                              |
//! | test_fraction     | 0.1     | dataset split                              |
//! | alternate_levels  | false   | strategy-3 common-layer correction epochs  |
//!
//! Synthetic dataset keys (`gen-data --spec`): `count` (512), `height` (32),
//! `width` (32), `seed` (7).

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::channel::ChannelKind;
use crate::data::SyntheticSpec;
use crate::net::SafeConfig;
use crate::train::TrainPlan;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: {detail}")]
    Parse { line: usize, detail: String },
    #[error("unknown key '{0}'")]
    UnknownKey(String),
    #[error("duplicate key '{0}'")]
    DuplicateKey(String),
    #[error("key '{key}': {detail}")]
    InvalidValue { key: String, detail: String },
    #[error("{0}")]
    Io(String),
}

/// Parsed `key = value` pairs in file order.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>, ConfigError> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (no, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(i) => &raw[..i],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or(ConfigError::Parse {
            line: no + 1,
            detail: format!("expected 'key = value', got '{line}'"),
        })?;
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if key.is_empty() || value.is_empty() {
            return Err(ConfigError::Parse {
                line: no + 1,
                detail: "empty key or value".into(),
            });
        }
        if !seen.insert(key.clone()) {
            return Err(ConfigError::DuplicateKey(key));
        }
        out.push((key, value));
    }
    Ok(out)
}

fn parse_as<T: std::str::FromStr>(key: &str, value: &str, what: &str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::InvalidValue {
        key: key.to_string(),
        detail: format!("'{value}' is not a valid {what}"),
    })
}

/// Settings behind `train --config`.
#[derive(Debug, Clone)]
pub struct TrainSettings {
    pub seed: u64,
    pub batch_size: usize,
    pub patience: usize,
    pub max_epochs: usize,
    pub lr: f64,
    pub lr_high: f64,
    pub lr_low: f64,
    pub train_snr_db: f64,
    pub channel: ChannelKind,
    pub base_width: usize,
    pub branches: usize,
    pub d: Vec<usize>,
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub alternate_levels: bool,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            seed: 7,
            batch_size: 64,
            patience: 20,
            max_epochs: 200,
            lr: 1e-4,
            lr_high: 1e-4,
            lr_low: 1e-5,
            train_snr_db: 10.0,
            channel: ChannelKind::Awgn,
            base_width: 16,
            branches: 2,
            d: vec![8, 8],
            train_fraction: 0.8,
            val_fraction: 0.1,
            test_fraction: 0.1,
            alternate_levels: false,
        }
    }
}

impl TrainSettings {
    pub fn from_str(text: &str) -> Result<Self, ConfigError> {
        let mut s = TrainSettings::default();
        for (key, value) in parse_kv(text)? {
            match key.as_str() {
                "seed" => s.seed = parse_as(&key, &value, "integer")?,
                "batch_size" => s.batch_size = parse_as(&key, &value, "integer")?,
                "patience" => s.patience = parse_as(&key, &value, "integer")?,
                "max_epochs" => s.max_epochs = parse_as(&key, &value, "integer")?,
                "lr" => s.lr = parse_as(&key, &value, "number")?,
                "lr_high" => s.lr_high = parse_as(&key, &value, "number")?,
                "lr_low" => s.lr_low = parse_as(&key, &value, "number")?,
                "train_snr_db" => s.train_snr_db = parse_as(&key, &value, "number")?,
                "channel" => {
                    s.channel = value.parse().map_err(|e: String| ConfigError::InvalidValue {
                        key,
                        detail: e,
                    })?
                }
                "base_width" => s.base_width = parse_as(&key, &value, "integer")?,
                "branches" => s.branches = parse_as(&key, &value, "integer")?,
                "d" => {
                    s.d = value
                        .split(',')
                        .map(|v| parse_as("d", v.trim(), "integer"))
                        .collect::<Result<Vec<usize>, _>>()?
                }
                "train_fraction" => s.train_fraction = parse_as(&key, &value, "number")?,
                "val_fraction" => s.val_fraction = parse_as(&key, &value, "number")?,
                "test_fraction" => s.test_fraction = parse_as(&key, &value, "number")?,
                "alternate_levels" => s.alternate_levels = parse_as(&key, &value, "boolean")?,
                _ => return Err(ConfigError::UnknownKey(key)),
            }
        }
        Ok(s)
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path)
            .map_err(|e| ConfigError::Io(format!("read {}: {e}", path.display())))?;
        Self::from_str(&text)
    }

    /// Architecture config for images of the given extent.
    pub fn safe_config(&self, height: usize, width: usize) -> SafeConfig {
        SafeConfig {
            branches: self.branches,
            d: self.d.clone(),
            base_width: self.base_width,
            input_channels: 3,
            input_hw: (height, width),
            ..SafeConfig::default()
        }
    }

    pub fn train_plan(&self, strategy: u8) -> TrainPlan {
        TrainPlan {
            strategy,
            batch_size: self.batch_size,
            patience: self.patience,
            max_epochs: self.max_epochs,
            seed: self.seed,
            train_snr_db: self.train_snr_db,
            channel: self.channel,
            lr: self.lr,
            lr_high: self.lr_high,
            lr_low: self.lr_low,
            alternate_levels: self.alternate_levels,
            lr_overrides: Vec::new(),
        }
    }

    pub fn split_fractions(&self) -> [f64; 3] {
        [self.train_fraction, self.val_fraction, self.test_fraction]
    }
}

/// Settings behind `gen-data --spec`.
pub fn synthetic_spec_from_str(text: &str) -> Result<SyntheticSpec, ConfigError> {
    let mut s = SyntheticSpec::default();
    for (key, value) in parse_kv(text)? {
        match key.as_str() {
            "count" => s.count = parse_as(&key, &value, "integer")?,
            "height" => s.height = parse_as(&key, &value, "integer")?,
            "width" => s.width = parse_as(&key, &value, "integer")?,
            "seed" => s.seed = parse_as(&key, &value, "integer")?,
            _ => return Err(ConfigError::UnknownKey(key)),
        }
    }
    Ok(s)
}

pub fn synthetic_spec_from_file(path: &Path) -> Result<SyntheticSpec, ConfigError> {
    let text = fs::read_to_string(path)
        .map_err(|e| ConfigError::Io(format!("read {}: {e}", path.display())))?;
    synthetic_spec_from_str(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let s = TrainSettings::from_str("").unwrap();
        assert_eq!(s.batch_size, 64);
        assert_eq!(s.patience, 20);
        assert_eq!(s.d, vec![8, 8]);
        assert_eq!(s.channel, ChannelKind::Awgn);
    }

    #[test]
    fn parses_values_comments_and_lists() {
        let text = "
# a comment
seed = 42
channel = rayleigh   # inline comment
d = 8, 16
alternate_levels = true
lr_low = 2e-6
";
        let s = TrainSettings::from_str(text).unwrap();
        assert_eq!(s.seed, 42);
        assert_eq!(s.channel, ChannelKind::Rayleigh);
        assert_eq!(s.d, vec![8, 16]);
        assert!(s.alternate_levels);
        assert!((s.lr_low - 2e-6).abs() < 1e-18);
    }

    #[test]
    fn unknown_key_is_an_error() {
        let err = TrainSettings::from_str("learning_rate = 0.1").unwrap_err();
        assert!(matches!(err, ConfigError::UnknownKey(k) if k == "learning_rate"));
    }

    #[test]
    fn duplicate_and_malformed_lines_are_errors() {
        assert!(matches!(
            TrainSettings::from_str("seed = 1\nseed = 2"),
            Err(ConfigError::DuplicateKey(_))
        ));
        assert!(matches!(
            TrainSettings::from_str("just some words"),
            Err(ConfigError::Parse { line: 1, .. })
        ));
        assert!(matches!(
            TrainSettings::from_str("batch_size = many"),
            Err(ConfigError::InvalidValue { .. })
        ));
    }

    #[test]
    fn synthetic_spec_parsing() {
        let s = synthetic_spec_from_str("count = 12\nheight = 16\nwidth = 16").unwrap();
        assert_eq!((s.count, s.height, s.width, s.seed), (12, 16, 16, 7));
        assert!(synthetic_spec_from_str("shapes = 4").is_err());
    }
}
