use std::collections::HashSet;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::baselines::{MethodKind, MethodSettings};
use crate::diffnet::NetSpec;
use crate::scenarios::{ScenarioSpec, SourceSpec};

#[derive(Debug, thiserror::Error)]
#[error("config error at `{path}`: {msg}")]
pub struct ConfigError {
    pub path: String,
    pub msg: String,
}

impl ConfigError {
    pub fn new(path: impl Into<String>, msg: impl Into<String>) -> Self {
        Self {
            path: path.into(),
            msg: msg.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub rate: f64,
    pub batch_size: usize,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1500,
            rate: 0.05,
            batch_size: 64,
            momentum: 0.9,
            seed: 0,
        }
    }
}

/// Everything one experiment needs. Unknown keys anywhere are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub source: SourceSpec,
    pub net: NetSpec,
    pub training: TrainConfig,
    pub scenarios: Vec<ScenarioSpec>,
    pub methods: Vec<MethodKind>,
    pub method_settings: MethodSettings,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    /// Carry the adapted net from one batch to the next.
    pub online: bool,
    /// Dump every negative-sample chain as CSV.
    pub trace: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            source: SourceSpec::default(),
            net: NetSpec::new(2, vec![32, 32], 4).with_norm(true),
            training: TrainConfig::default(),
            scenarios: Vec::new(),
            methods: MethodKind::ALL.to_vec(),
            method_settings: MethodSettings::default(),
            seeds: vec![0],
            out_dir: PathBuf::from("runs"),
            online: false,
            trace: false,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            ConfigError::new(path, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    /// Checks that do not depend on which command runs.
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.source
            .validate()
            .map_err(|e| ConfigError::new("source", e.to_string()))?;
        self.net
            .validate()
            .map_err(|e| ConfigError::new("net", e.to_string()))?;
        if self.net.input_dim != self.source.dim {
            return Err(ConfigError::new(
                "net.input_dim",
                format!("must equal source.dim ({})", self.source.dim),
            ));
        }
        if self.net.num_classes != self.source.num_classes {
            return Err(ConfigError::new(
                "net.num_classes",
                format!("must equal source.num_classes ({})", self.source.num_classes),
            ));
        }
        let t = &self.training;
        if t.batch_size == 0 {
            return Err(ConfigError::new("training.batch_size", "must be >= 1"));
        }
        if !(t.rate > 0.0 && t.rate.is_finite()) {
            return Err(ConfigError::new("training.rate", "must be > 0"));
        }
        if !(0.0..1.0).contains(&t.momentum) {
            return Err(ConfigError::new("training.momentum", "must lie in [0, 1)"));
        }
        let mut names = HashSet::new();
        for (i, s) in self.scenarios.iter().enumerate() {
            s.validate()
                .map_err(|e| ConfigError::new(format!("scenarios[{i}]"), e.to_string()))?;
            if !names.insert(s.name.as_str()) {
                return Err(ConfigError::new(format!("scenarios[{i}].name"), "duplicate scenario name"));
            }
            if s.name.is_empty() || !s.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
                return Err(ConfigError::new(
                    format!("scenarios[{i}].name"),
                    "use letters, digits, '_' or '-'",
                ));
            }
        }
        let ms = &self.method_settings;
        ms.mita
            .validate()
            .map_err(|e| ConfigError::new("method_settings.mita", e.to_string()))?;
        if !(ms.tent.rate >= 0.0) {
            return Err(ConfigError::new("method_settings.tent.rate", "must be >= 0"));
        }
        Ok(())
    }

    pub fn validate_for_run(&self) -> Result<(), ConfigError> {
        if self.scenarios.is_empty() {
            return Err(ConfigError::new("scenarios", "at least one scenario required"));
        }
        if self.methods.is_empty() {
            return Err(ConfigError::new("methods", "at least one method required"));
        }
        if self.seeds.is_empty() {
            return Err(ConfigError::new("seeds", "at least one seed required"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_gives_defaults() {
        let cfg = ExperimentConfig::from_json("{}").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
    }

    #[test]
    fn unknown_key_reports_path() {
        let err = ExperimentConfig::from_json(r#"{"method_settings": {"tent": {"stepz": 3}}}"#).unwrap_err();
        assert_eq!(err.path, "method_settings.tent.stepz");
        assert!(err.msg.contains("stepz"), "{}", err.msg);
        let err = ExperimentConfig::from_json(r#"{"bogus": 1}"#).unwrap_err();
        assert!(err.msg.contains("bogus"));
    }

    #[test]
    fn semantic_errors() {
        let err = ExperimentConfig::from_json(r#"{"net": {"input_dim": 3, "num_classes": 4}}"#).unwrap_err();
        assert_eq!(err.path, "net.input_dim");
        let err = ExperimentConfig::from_json(r#"{"methods": ["eata"]}"#).unwrap_err();
        assert!(err.path.starts_with("methods"));
        let text = r#"{"scenarios": [{"name": "x", "regime": "pure", "dist_a": {"kind": "rotate", "severity": 9}, "batch_size": 10, "num_batches": 1}]}"#;
        let err = ExperimentConfig::from_json(text).unwrap_err();
        assert_eq!(err.path, "scenarios[0]");
    }

    #[test]
    fn json_round_trip() {
        let cfg = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    }
}
