//! Effective run configuration: defaults, optional JSON config file, flag
//! overrides, validation, and the echo written alongside every output.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use occot::dataset::AttributeTable;
use occot::losses::{MpoHyper, MpoWeights, QualityArg, StagedWeights};
use occot::pipeline::PipelineConfig;

use crate::CliError;

/// Model backend selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Mock,
    Fixture,
    Http,
}

/// Expert backend selection. Only the deterministic mock ships; real
/// reconstruction services plug in behind the same contract.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpertKind {
    #[default]
    Mock,
}

/// Objective hyperparameters surfaced in the configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MpoSettings {
    pub beta: f64,
    pub delta: f64,
    pub w_p: f64,
    pub w_q: f64,
    pub w_g: f64,
    pub quality_arg: QualityArg,
}

impl Default for MpoSettings {
    fn default() -> Self {
        Self {
            beta: 0.1,
            delta: 0.0,
            w_p: 1.0,
            w_q: 1.0,
            w_g: 1.0,
            quality_arg: QualityArg::LogRatio,
        }
    }
}

impl MpoSettings {
    pub fn hyper(&self) -> MpoHyper {
        MpoHyper {
            beta: self.beta,
            delta: self.delta,
        }
    }

    pub fn weights(&self) -> MpoWeights {
        MpoWeights {
            w_p: self.w_p,
            w_q: self.w_q,
            w_g: self.w_g,
        }
    }
}

/// The complete effective configuration. Unknown keys in a config file are
/// rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub backend: BackendKind,
    /// HTTP backend endpoint, e.g. `http://localhost:8000`.
    pub base_url: Option<String>,
    pub endpoint_path: String,
    pub model: Option<String>,
    pub timeout_secs: u64,
    pub max_retries: u32,
    pub max_in_flight: usize,
    pub expert: ExpertKind,
    pub expert_failure_rate: f64,
    /// Mock-backend answer corruption probability.
    pub noise: f64,
    pub seed: u64,
    pub clarity_threshold: f64,
    pub pipeline: PipelineConfig,
    pub mpo: MpoSettings,
    pub staged: StagedWeights,
    pub attribute_table: AttributeTable,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            backend: BackendKind::Mock,
            base_url: None,
            endpoint_path: "/v1/chat/completions".to_string(),
            model: None,
            timeout_secs: 30,
            max_retries: 2,
            max_in_flight: 8,
            expert: ExpertKind::Mock,
            expert_failure_rate: 0.0,
            noise: 0.0,
            seed: 42,
            clarity_threshold: occot::dataset::DEFAULT_CLARITY_THRESHOLD,
            pipeline: PipelineConfig::default(),
            mpo: MpoSettings::default(),
            staged: StagedWeights::default(),
            attribute_table: AttributeTable::default(),
        }
    }
}

impl RunConfig {
    /// Loads the file when given, otherwise starts from defaults.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(Self::default()),
            Some(path) => {
                let content = std::fs::read_to_string(path).map_err(|err| {
                    CliError::Config(format!("cannot read config `{}`: {err}", path.display()))
                })?;
                serde_json::from_str(&content).map_err(|err| {
                    CliError::Config(format!("invalid config `{}`: {err}", path.display()))
                })
            }
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let in_unit = |name: &str, v: f64| -> Result<(), CliError> {
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return Err(CliError::Config(format!("{name} {v} outside [0, 1]")));
            }
            Ok(())
        };
        in_unit("expert_failure_rate", self.expert_failure_rate)?;
        in_unit("noise", self.noise)?;
        in_unit("clarity_threshold", self.clarity_threshold)?;
        if self.pipeline.workers == 0 {
            return Err(CliError::Config("workers must be >= 1".to_string()));
        }
        if self.backend == BackendKind::Http {
            if self.base_url.is_none() {
                return Err(CliError::Config(
                    "http backend requires base_url (--base-url)".to_string(),
                ));
            }
            if self.model.is_none() {
                return Err(CliError::Config(
                    "http backend requires a model name (--model)".to_string(),
                ));
            }
        }
        self.mpo
            .hyper()
            .validate()
            .and_then(|()| self.mpo.weights().validate())
            .and_then(|()| self.staged.validate())
            .map_err(|err| CliError::Config(err.to_string()))?;
        if self.attribute_table.is_empty() {
            return Err(CliError::Config("attribute table is empty".to_string()));
        }
        Ok(())
    }
}

/// Echo of the effective configuration plus the invocation parameters,
/// written next to each command's output for reproducibility.
#[derive(Debug, Serialize)]
pub struct ConfigEcho<'a, P: Serialize> {
    pub command: &'a str,
    pub params: P,
    pub config: &'a RunConfig,
}

/// Writes the echo as pretty JSON. For directory outputs pass
/// `dir.join("config-echo.json")`; for file outputs use
/// [`echo_path_for_file`].
pub fn write_echo<P: Serialize>(path: &Path, echo: &ConfigEcho<'_, P>) -> anyhow::Result<()> {
    let body = serde_json::to_string_pretty(echo)?;
    std::fs::write(path, body + "\n")
        .map_err(|err| anyhow::anyhow!("cannot write `{}`: {err}", path.display()))
}

/// `runs.jsonl` -> `runs.config.json` in the same directory.
pub fn echo_path_for_file(output: &Path) -> PathBuf {
    output.with_extension("config.json")
}
