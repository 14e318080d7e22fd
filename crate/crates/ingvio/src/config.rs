//! TOML configuration: a versioned file with optional `[scenario]`,
//! `[estimator]` and `[montecarlo]` sections. Missing keys take their
//! defaults; unknown keys are errors.

use std::path::Path;

use ingvio_core::estimator::EstimatorConfig;
use ingvio_core::simulator::ScenarioConfig;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MonteCarloConfig {
    pub runs: usize,
    /// Two-sided confidence of the ANEES interval.
    pub confidence: f64,
}

impl Default for MonteCarloConfig {
    fn default() -> Self {
        Self { runs: 50, confidence: 0.95 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub schema_version: u32,
    #[serde(default)]
    pub scenario: ScenarioConfig,
    #[serde(default)]
    pub estimator: EstimatorConfig,
    #[serde(default)]
    pub montecarlo: MonteCarloConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            schema_version: CONFIG_SCHEMA_VERSION,
            scenario: ScenarioConfig::default(),
            estimator: EstimatorConfig::default(),
            montecarlo: MonteCarloConfig::default(),
        }
    }
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if cfg.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::Config(format!("unsupported schema_version {} (expected {CONFIG_SCHEMA_VERSION})", cfg.schema_version)));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// `path` when given, defaults otherwise.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |e: ingvio_core::Error| Error::Config(e.to_string());
        self.scenario.validate().map_err(wrap)?;
        self.estimator.validate().map_err(wrap)?;
        if self.montecarlo.runs < 2 {
            return Err(Error::Config("montecarlo.runs must be at least 2".into()));
        }
        if !(self.montecarlo.confidence > 0.0 && self.montecarlo.confidence < 1.0) {
            return Err(Error::Config("montecarlo.confidence must lie in (0, 1)".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
