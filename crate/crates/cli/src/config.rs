//! Training configuration, config-file parsing and flag merging.
//!
//! Config files are flat `key=value` text with keys identical to the CLI
//! flag names; explicit flags override file values which override the
//! defaults.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use tsnca_core::nn::{self, UNetConfig};
use tsnca_core::optim::AdamConfig;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub stage: u8,
    pub batch_size: usize,
    pub crop_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub max_steps: u64,
    pub seed: u64,
    pub use_hs_input: bool,
    pub use_ssim_loss_stage1: bool,
    pub with_channel_attention: bool,
    pub base_channels: usize,
    pub depth: usize,
    pub vgg_weights: Option<PathBuf>,
    pub vgg_tap: Option<usize>,
}

impl TrainConfig {
    pub fn stage1() -> Self {
        TrainConfig {
            stage: 1,
            batch_size: 4,
            crop_size: 64,
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            max_steps: 500,
            seed: 0,
            use_hs_input: true,
            use_ssim_loss_stage1: false,
            with_channel_attention: true,
            base_channels: nn::DEFAULT_BASE_CHANNELS,
            depth: nn::DEFAULT_DEPTH,
            vgg_weights: None,
            vgg_tap: None,
        }
    }

    pub fn stage2() -> Self {
        TrainConfig {
            stage: 2,
            ..Self::stage1()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        let factor = 1usize << self.depth;
        if self.crop_size == 0 || !self.crop_size.is_multiple_of(factor) {
            return Err(Error::Config(format!(
                "crop size {} must be a positive multiple of 2^depth = {}",
                self.crop_size, factor
            )));
        }
        if self.stage != 1 && self.stage != 2 {
            return Err(Error::Config(format!(
                "stage must be 1 or 2, got {}",
                self.stage
            )));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }

    pub fn enhancer_config(&self) -> UNetConfig {
        UNetConfig::enhancer(self.base_channels, self.depth)
    }

    pub fn restorer_config(&self) -> UNetConfig {
        UNetConfig::restorer(self.base_channels, self.depth, self.with_channel_attention)
    }

    /// Applies `key=value` entries from a config file. Unknown keys are
    /// errors so typos cannot silently change a run.
    pub fn apply_file_entries(&mut self, entries: &BTreeMap<String, String>) -> Result<()> {
        for (key, value) in entries {
            self.apply_entry(key, value)?;
        }
        Ok(())
    }

    fn apply_entry(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str| Error::Config(format!("bad value `{value}` for `{key}` ({what})"));
        match key {
            "batch" => self.batch_size = value.parse().map_err(|_| bad("positive integer"))?,
            "crop" => self.crop_size = value.parse().map_err(|_| bad("positive integer"))?,
            "lr" => self.learning_rate = value.parse().map_err(|_| bad("float"))?,
            "beta1" => self.beta1 = value.parse().map_err(|_| bad("float"))?,
            "beta2" => self.beta2 = value.parse().map_err(|_| bad("float"))?,
            "epsilon" => self.epsilon = value.parse().map_err(|_| bad("float"))?,
            "steps" => self.max_steps = value.parse().map_err(|_| bad("integer"))?,
            "seed" => self.seed = value.parse().map_err(|_| bad("integer"))?,
            "base-channels" => {
                self.base_channels = value.parse().map_err(|_| bad("positive integer"))?
            }
            "depth" => self.depth = value.parse().map_err(|_| bad("positive integer"))?,
            "no-hs-input" => {
                self.use_hs_input = !parse_bool(value).ok_or_else(|| bad("true/false"))?
            }
            "ssim-loss-stage1" => {
                self.use_ssim_loss_stage1 = parse_bool(value).ok_or_else(|| bad("true/false"))?
            }
            "no-ca" => {
                self.with_channel_attention = !parse_bool(value).ok_or_else(|| bad("true/false"))?
            }
            "vgg-weights" => self.vgg_weights = Some(PathBuf::from(value)),
            "vgg-tap" => self.vgg_tap = Some(value.parse().map_err(|_| bad("integer"))?),
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }
}

fn parse_bool(s: &str) -> Option<bool> {
    match s {
        "true" | "1" => Some(true),
        "false" | "0" => Some(false),
        _ => None,
    }
}

/// Parses flat `key=value` lines; blank lines and `#` comments are skipped.
pub fn parse_config_file(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut entries = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!(
                "{}:{}: expected key=value, got `{line}`",
                path.display(),
                lineno + 1
            ))
        })?;
        entries.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::TempDir;

    #[test]
    fn file_entries_override_defaults() {
        let dir = TempDir::new("config");
        let path = dir.path().join("run.cfg");
        fs::write(
            &path,
            "# run settings\ncrop=32\nbatch=2\nno-ca=true\nseed=7\n",
        )
        .unwrap();
        let mut cfg = TrainConfig::stage2();
        cfg.apply_file_entries(&parse_config_file(&path).unwrap())
            .unwrap();
        assert_eq!(cfg.crop_size, 32);
        assert_eq!(cfg.batch_size, 2);
        assert_eq!(cfg.seed, 7);
        assert!(!cfg.with_channel_attention);
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_keys_and_malformed_lines_error() {
        let dir = TempDir::new("config-bad");
        let path = dir.path().join("run.cfg");
        fs::write(&path, "cropsize=32\n").unwrap();
        let mut cfg = TrainConfig::stage1();
        let err = cfg
            .apply_file_entries(&parse_config_file(&path).unwrap())
            .unwrap_err();
        assert!(err.to_string().contains("unknown config key"));

        fs::write(&path, "just a line\n").unwrap();
        assert!(parse_config_file(&path).is_err());
    }

    #[test]
    fn crop_must_divide_by_depth_factor() {
        let mut cfg = TrainConfig::stage1();
        cfg.crop_size = 60;
        assert!(cfg.validate().is_err());
        cfg.crop_size = 64;
        cfg.validate().unwrap();
    }
}
