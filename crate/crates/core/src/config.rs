//! Run configuration: one file drives every command.
//!
//! Both TOML and JSON are accepted (dispatched on the file extension) and
//! unknown keys anywhere in the document are rejected so that typos fail
//! loudly instead of silently falling back to defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::grpo::PipelineConfig;
use crate::guidance::GuidanceConfig;
use crate::indicators::IndicatorConfig;
use crate::market::Regime;
use crate::portfolio::BacktestConfig;

/// Synthetic-market generation settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// Number of synthetic symbols (named SYN0, SYN1, ...).
    pub symbols: usize,
    /// Trading days per symbol.
    pub days: usize,
    pub regime: Regime,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            symbols: 3,
            days: 160,
            regime: Regime::default(),
        }
    }
}

/// Windowing and chronological split settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowConfig {
    /// Input window length T.
    pub t: usize,
    /// Forecast horizon T'.
    pub horizon: usize,
    pub stride: usize,
    pub train_frac: f64,
    pub val_frac: f64,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            t: 10,
            horizon: 10,
            stride: 1,
            train_frac: 0.7,
            val_frac: 0.15,
        }
    }
}

impl WindowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t == 0 || self.horizon == 0 || self.stride == 0 {
            return Err(Error::Parameter(
                "t, horizon, and stride must be positive".into(),
            ));
        }
        if !(self.train_frac > 0.0
            && self.val_frac > 0.0
            && self.train_frac + self.val_frac < 1.0)
        {
            return Err(Error::Parameter(
                "train_frac and val_frac must be positive and sum below 1".into(),
            ));
        }
        Ok(())
    }
}

/// Epoch/step settings for backbone supervised training.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneTrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
}

impl Default for BackboneTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            learning_rate: 0.05,
        }
    }
}

/// The full workbench configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Run directory for artifacts; commands create it if needed.
    pub out_dir: PathBuf,
    /// Worker threads for embarrassingly parallel stages.
    pub workers: usize,
    pub synth: SynthConfig,
    pub windows: WindowConfig,
    pub indicators: IndicatorConfig,
    pub pipeline: PipelineConfig,
    pub backbone: BackboneConfig,
    pub backbone_train: BackboneTrainConfig,
    pub guidance: GuidanceConfig,
    pub backtest: BacktestConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            out_dir: PathBuf::from("runs/default"),
            workers: 1,
            synth: SynthConfig::default(),
            windows: WindowConfig::default(),
            indicators: IndicatorConfig::default(),
            pipeline: PipelineConfig::default(),
            backbone: BackboneConfig::default(),
            backbone_train: BackboneTrainConfig::default(),
            guidance: GuidanceConfig::default(),
            backtest: BacktestConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.workers == 0 {
            return Err(Error::Parameter("workers must be >= 1".into()));
        }
        if self.synth.symbols == 0 || self.synth.days == 0 {
            return Err(Error::Parameter(
                "synth.symbols and synth.days must be positive".into(),
            ));
        }
        self.windows.validate()?;
        self.indicators.validate()?;
        self.pipeline.grpo.validate()?;
        self.backbone.validate()?;
        self.guidance.validate()?;
        self.backtest.validate()?;
        if self.backbone.t != self.windows.t || self.backbone.horizon != self.windows.horizon {
            return Err(Error::Config(format!(
                "backbone t/horizon ({}, {}) must match windows ({}, {})",
                self.backbone.t, self.backbone.horizon, self.windows.t, self.windows.horizon
            )));
        }
        Ok(())
    }

    /// Parses a config file, dispatching on its extension (`.toml` or
    /// `.json`). Unknown keys are an error.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let ext = path
            .extension()
            .map(|e| e.to_string_lossy().to_lowercase())
            .unwrap_or_default();
        let cfg: Self = match ext.as_str() {
            "toml" => toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?,
            "json" => serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()))?,
            other => {
                return Err(Error::Config(format!(
                    "unsupported config extension '{other}'; use .toml or .json"
                )))
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_temp(dir: &tempfile::TempDir, name: &str, body: &str) -> PathBuf {
        let path = dir.path().join(name);
        let mut f = std::fs::File::create(&path).unwrap();
        f.write_all(body.as_bytes()).unwrap();
        path
    }

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn toml_round_trip_preserves_values() {
        let mut cfg = RunConfig::default();
        cfg.seed = 99;
        cfg.pipeline.grpo.epsilon = 0.1;
        let text = cfg.to_toml().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = write_temp(&dir, "run.toml", &text);
        let loaded = RunConfig::load(&path).unwrap();
        assert_eq!(loaded.seed, 99);
        assert_eq!(loaded.pipeline.grpo.epsilon, 0.1);
    }

    #[test]
    fn json_is_accepted() {
        let cfg = RunConfig::default();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = write_temp(&dir, "run.json", &text);
        let loaded = RunConfig::load(&path).unwrap();
        assert_eq!(loaded.seed, cfg.seed);
    }

    #[test]
    fn partial_files_fill_in_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_temp(&dir, "run.toml", "seed = 5\n[windows]\nt = 10\n");
        let loaded = RunConfig::load(&path).unwrap();
        assert_eq!(loaded.seed, 5);
        assert_eq!(loaded.windows.horizon, 10);
        assert_eq!(loaded.pipeline.grpo.beta, 0.04);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        for body in [
            "sseed = 5\n",
            "[windows]\nt = 10\ntt = 3\n",
            "[pipeline.grpo]\nepsilonn = 0.3\n",
        ] {
            let path = write_temp(&dir, "bad.toml", body);
            assert!(
                matches!(RunConfig::load(&path), Err(Error::Config(_))),
                "accepted bad config {body:?}"
            );
        }
    }

    #[test]
    fn invalid_values_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_temp(&dir, "bad.toml", "[windows]\ntrain_frac = 0.9\nval_frac = 0.5\n");
        assert!(RunConfig::load(&path).is_err());
        let path = write_temp(&dir, "bad2.toml", "[backbone]\nt = 12\n");
        assert!(RunConfig::load(&path).is_err(), "t mismatch should fail");
        let path = write_temp(&dir, "bad.yaml", "seed: 3\n");
        assert!(RunConfig::load(&path).is_err());
    }
}
