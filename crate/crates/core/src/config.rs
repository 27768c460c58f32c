//! Experiment configuration files.
//!
//! A config is TOML with `[network]`, `[pretrain]`, `[transfer]` and
//! `[experiment]` tables; optimizer settings nest as `[pretrain.adam]` and
//! `[transfer.adam]`. Unknown keys are rejected.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::NetworkConfig;
use crate::transfer::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config: {0}")]
    Parse(String),
    #[error("config: {0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    TargetOnly,
    Finetune,
    RegiontransSmatch,
    RegiontransAmatch,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::TargetOnly,
        Method::Finetune,
        Method::RegiontransSmatch,
        Method::RegiontransAmatch,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::TargetOnly => "target-only",
            Method::Finetune => "finetune",
            Method::RegiontransSmatch => "regiontrans-smatch",
            Method::RegiontransAmatch => "regiontrans-amatch",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| ConfigError::Invalid(format!("unknown method '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSettings {
    pub seeds: Vec<u64>,
    pub methods: Vec<Method>,
    /// Trade-off weights for the w sweep, run with auxiliary matching when
    /// available.
    pub w_sweep: Vec<f64>,
}

impl Default for ExperimentSettings {
    fn default() -> Self {
        ExperimentSettings {
            seeds: (1..=5).collect(),
            methods: Method::ALL.to_vec(),
            w_sweep: vec![0.0, 0.25, 0.5, 0.75, 1.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub network: NetworkConfig,
    /// Source pre-training schedule.
    pub pretrain: TrainConfig,
    /// Target-side schedule shared by target-only, fine-tuning and transfer.
    pub transfer: TrainConfig,
    pub experiment: ExperimentSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            network: NetworkConfig::default(),
            pretrain: TrainConfig::pretrain_default(),
            transfer: TrainConfig::default(),
            experiment: ExperimentSettings::default(),
        }
    }
}

const PAPER: &str = include_str!("../configs/paper.toml");
const DESK: &str = include_str!("../configs/desk.toml");

impl ExperimentConfig {
    /// The published architecture with the default schedule.
    pub fn paper() -> Self {
        ExperimentConfig::from_toml(PAPER).expect("bundled config parses")
    }

    /// A smaller network and schedule sized for a single CPU core.
    pub fn desk() -> Self {
        ExperimentConfig::from_toml(DESK).expect("bundled config parses")
    }

    pub fn profile(name: &str) -> Result<Self, ConfigError> {
        match name {
            "paper" => Ok(Self::paper()),
            "desk" => Ok(Self::desk()),
            _ => Err(ConfigError::Invalid(format!("unknown profile '{name}'"))),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// A bundled profile name or a path to a config file.
    pub fn load(name_or_path: &str) -> Result<Self, ConfigError> {
        if let Ok(cfg) = Self::profile(name_or_path) {
            return Ok(cfg);
        }
        let path = Path::new(name_or_path);
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.network
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        for (name, t) in [("pretrain", &self.pretrain), ("transfer", &self.transfer)] {
            t.validate()
                .map_err(|e| ConfigError::Invalid(format!("[{name}] {e}")))?;
        }
        let e = &self.experiment;
        if e.seeds.is_empty() {
            return Err(ConfigError::Invalid("experiment.seeds is empty".into()));
        }
        if e.methods.is_empty() {
            return Err(ConfigError::Invalid("experiment.methods is empty".into()));
        }
        if let Some(w) = e.w_sweep.iter().find(|w| !(0.0..=1.0).contains(*w)) {
            return Err(ConfigError::Invalid(format!("w_sweep value {w} is outside [0, 1]")));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_profiles_parse() {
        let paper = ExperimentConfig::paper();
        assert_eq!(paper.network, NetworkConfig::default());
        assert_eq!(paper.transfer.w, 0.75);
        assert_eq!(paper.transfer.epochs, 200);
        assert_eq!(paper.pretrain.epochs, 100);
        assert_eq!(paper.transfer.adam.lr, 1e-3);
        let desk = ExperimentConfig::desk();
        assert_eq!(desk.transfer.w, 0.25);
        assert_eq!(desk.experiment.w_sweep, vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        assert_eq!(desk.experiment.seeds, vec![1, 2, 3, 4, 5]);
    }

    #[test]
    fn round_trip_and_unknown_keys() {
        let cfg = ExperimentConfig::desk();
        assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        assert!(ExperimentConfig::from_toml("[transfer]\nwidth = 3\n").is_err());
        assert!(ExperimentConfig::from_toml("[transfer.adam]\nlearning_rate = 3\n").is_err());
        assert!(ExperimentConfig::from_toml("[bogus]\n").is_err());
        let partial = ExperimentConfig::from_toml("[transfer]\nw = 0.5\n").unwrap();
        assert_eq!(partial.transfer.w, 0.5);
        assert_eq!(partial.transfer.epochs, 200);
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(ExperimentConfig::from_toml("[transfer]\nw = 1.5\n").is_err());
        assert!(ExperimentConfig::from_toml("[experiment]\nseeds = []\n").is_err());
        assert!(ExperimentConfig::from_toml("[experiment]\nmethods = ['magic']\n").is_err());
        assert!(ExperimentConfig::from_toml("[network]\nkernel_size = 4\n").is_err());
    }

    #[test]
    fn method_names() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("fine-tune".parse::<Method>().is_err());
    }
}
