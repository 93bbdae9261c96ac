//! Experiment configuration: one JSON document covering the federation,
//! the generator, the attack and anomaly detection.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::anomaly::{EmbeddingSource, ScoreMetric};
use crate::dp::DpConfig;
use crate::fed::FedConfig;
use crate::secagg::Backend;
use crate::synthgen::GenSpec;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("config is not valid JSON for this schema: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("unsupported schema_version {0} (expected {SCHEMA_VERSION})")]
    Schema(u32),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnomalyConfig {
    /// Plant anomalies in every client graph and report detection quality.
    pub enabled: bool,
    pub fraction: f64,
    /// Shift norm; `None` means three times the class separation.
    pub magnitude: Option<f64>,
    pub embedding: EmbeddingSource,
    pub metric: ScoreMetric,
    /// Fixed threshold; `None` selects the default rule.
    pub threshold: Option<f64>,
    pub sweep_points: usize,
}

impl Default for AnomalyConfig {
    fn default() -> Self {
        AnomalyConfig {
            enabled: false,
            fraction: 0.05,
            magnitude: None,
            embedding: EmbeddingSource::Projection,
            metric: ScoreMetric::SquaredDistance,
            threshold: None,
            sweep_points: 21,
        }
    }
}

impl AnomalyConfig {
    pub fn magnitude_for(&self, spec: &GenSpec) -> f64 {
        self.magnitude.unwrap_or(3.0 * spec.class_separation)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub fed: FedConfig,
    #[serde(default)]
    pub graph: GenSpec,
    #[serde(default)]
    pub anomaly: AnomalyConfig,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs")
}

/// Every section at its own defaults. Omitted JSON sections and fields
/// fall back to these.
impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            fed: FedConfig::default(),
            graph: GenSpec::default(),
            anomaly: AnomalyConfig::default(),
            out_dir: default_out_dir(),
        }
    }
}

impl ExperimentConfig {
    /// Desk scale: 10 clients of 2000 nodes, 50 rounds, no noise, plain
    /// aggregation.
    pub fn desk() -> Self {
        let base = ExperimentConfig::default();
        ExperimentConfig {
            fed: FedConfig {
                rounds: 50,
                dp: DpConfig { noise_multiplier: 0.0, ..DpConfig::default() },
                ..base.fed
            },
            ..base
        }
    }

    /// Full-scale settings: 100 rounds, σ = 1.1, masked secure aggregation
    /// and client graphs of 2k to 10k nodes.
    pub fn paper_scale() -> Self {
        let base = ExperimentConfig::default();
        ExperimentConfig {
            fed: FedConfig { backend: Backend::Masked, ..base.fed },
            graph: GenSpec { num_nodes: 2000, max_nodes: Some(10_000), ..base.graph },
            ..base
        }
    }

    /// Applies the Table-1 scale settings on top of an existing config.
    pub fn to_paper_scale(mut self) -> Self {
        let p = ExperimentConfig::paper_scale();
        self.fed.rounds = p.fed.rounds;
        self.fed.dp.noise_multiplier = p.fed.dp.noise_multiplier;
        self.fed.backend = p.fed.backend;
        if self.fed.backend.is_protected() {
            self.fed.robust_mode = crate::threat::RobustMode::Off;
        }
        self.graph.num_nodes = p.graph.num_nodes;
        self.graph.max_nodes = p.graph.max_nodes;
        self
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self, ConfigError> {
        let cfg: ExperimentConfig = serde_json::from_slice(bytes)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let bytes = std::fs::read(path).map_err(|source| ConfigError::Read { path: path.to_path_buf(), source })?;
        ExperimentConfig::from_json(&bytes)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Sets the master seed of both the generator and the federation.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.fed.seed = seed;
        self.graph.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(ConfigError::Schema(self.schema_version));
        }
        self.fed.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.graph.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let a = &self.anomaly;
        if !(a.fraction > 0.0 && a.fraction < 1.0) {
            return Err(ConfigError::Invalid("anomaly.fraction must lie in (0, 1)".into()));
        }
        if matches!(a.magnitude, Some(m) if !(m > 0.0 && m.is_finite())) {
            return Err(ConfigError::Invalid("anomaly.magnitude must be positive".into()));
        }
        if matches!(a.threshold, Some(t) if !t.is_finite()) {
            return Err(ConfigError::Invalid("anomaly.threshold must be finite".into()));
        }
        if a.sweep_points < 2 {
            return Err(ConfigError::Invalid("anomaly.sweep_points must be at least 2".into()));
        }
        Ok(())
    }
}
