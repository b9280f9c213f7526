//! JSON run configuration shared by the CLI and the experiment runner.
//!
//! Unknown keys are rejected everywhere and reported with their key path.
//! Relative paths are resolved against the directory holding the config file.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{with_cache, Backend, DecodingParams, HttpBackend, HttpConfig, RetryPolicy, ScriptedBackend};
use crate::constraint::MatchPolicy;
use crate::data::DataRef;
use crate::experiments::ExperimentConfig;
use crate::strategies::{MergeMode, StrategyId, StrategySpec, TemplateSet, SENTENCE};
use crate::synthetic::{CompoundTable, SyntheticBackend, SyntheticModelConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    Read { path: String, message: String },
    #[error("{path}: invalid config at `{key}`: {message}")]
    Schema { path: String, key: String, message: String },
    #[error("invalid config at `{key}`: {message}")]
    Invalid { key: String, message: String },
}

impl ConfigError {
    pub fn invalid(key: &str, message: impl Into<String>) -> Self {
        Self::Invalid {
            key: key.to_string(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Http,
    Scripted,
    Synthetic,
}

fn default_model_id() -> String {
    "synthetic".into()
}
fn default_max_in_flight() -> usize {
    8
}
fn default_timeout_secs() -> u64 {
    120
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    #[serde(default = "default_model_id")]
    pub model_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_url: Option<String>,
    #[serde(default)]
    pub params: DecodingParams,
    #[serde(default)]
    pub synthetic: SyntheticModelConfig,
    /// Compound table for the synthetic model's split behaviour.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compounds: Option<DataRef>,
    /// Canned responses for the scripted backend, served in order.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub responses: Vec<String>,
    /// JSON array of responses, appended after `responses`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub responses_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_dir: Option<PathBuf>,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    #[serde(default)]
    pub supports_top_k: bool,
}

impl BackendConfig {
    pub fn new(kind: BackendKind) -> Self {
        Self {
            kind,
            model_id: default_model_id(),
            base_url: None,
            params: DecodingParams::default(),
            synthetic: SyntheticModelConfig::default(),
            compounds: None,
            responses: Vec::new(),
            responses_path: None,
            cache_dir: None,
            retry: RetryPolicy::default(),
            max_in_flight: default_max_in_flight(),
            timeout_secs: default_timeout_secs(),
            supports_top_k: false,
        }
    }

    fn resolve(&mut self, base: &Path) {
        self.compounds = self.compounds.take().map(|c| c.resolve(base));
        self.responses_path = self.responses_path.take().map(|p| base.join(p));
        self.cache_dir = self.cache_dir.take().map(|p| base.join(p));
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.params
            .validate()
            .map_err(|e| ConfigError::invalid("backend.params", e.to_string()))?;
        match self.kind {
            BackendKind::Http if self.base_url.as_deref().is_none_or(str::is_empty) => {
                return Err(ConfigError::invalid("backend.base_url", "required for kind \"http\""));
            }
            BackendKind::Synthetic => self
                .synthetic
                .validate()
                .map_err(|e| ConfigError::invalid("backend.synthetic", e.to_string()))?,
            _ => {}
        }
        if self.max_in_flight == 0 {
            return Err(ConfigError::invalid("backend.max_in_flight", "must be at least 1"));
        }
        if let Some(c) = &self.compounds {
            if !c.exists() {
                return Err(ConfigError::invalid("backend.compounds", format!("{c} does not exist")));
            }
        }
        if let Some(p) = &self.responses_path {
            if !p.exists() {
                return Err(ConfigError::invalid(
                    "backend.responses_path",
                    format!("{} does not exist", p.display()),
                ));
            }
        }
        Ok(())
    }

    /// Reads `responses` followed by the contents of `responses_path`.
    pub fn scripted_responses(&self) -> Result<Vec<String>, ConfigError> {
        let mut out = self.responses.clone();
        if let Some(path) = &self.responses_path {
            out.extend(load_responses(path)?);
        }
        Ok(out)
    }

    /// Builds the backend. `fallback_compounds` feeds the synthetic model
    /// when no compound table is configured.
    pub fn build(&self, fallback_compounds: Option<CompoundTable>) -> Result<Arc<dyn Backend>, ConfigError> {
        let inner: Arc<dyn Backend> = match self.kind {
            BackendKind::Http => {
                let mut http = HttpConfig::new(self.base_url.clone().unwrap_or_default());
                http.retry = self.retry.clone();
                http.max_in_flight = self.max_in_flight;
                http.timeout = Duration::from_secs(self.timeout_secs);
                http.supports_top_k = self.supports_top_k;
                Arc::new(HttpBackend::new(http).map_err(|e| ConfigError::invalid("backend", e.to_string()))?)
            }
            BackendKind::Scripted => Arc::new(ScriptedBackend::new(self.scripted_responses()?)),
            BackendKind::Synthetic => {
                let compounds = match &self.compounds {
                    Some(c) => {
                        let text = c.read().map_err(|e| ConfigError::invalid("backend.compounds", e))?;
                        CompoundTable::parse(&text).map_err(|e| ConfigError::invalid("backend.compounds", e))?
                    }
                    None => fallback_compounds.unwrap_or_default(),
                };
                Arc::new(
                    SyntheticBackend::new(self.synthetic.clone(), compounds)
                        .map_err(|e| ConfigError::invalid("backend.synthetic", e.to_string()))?,
                )
            }
        };
        match &self.cache_dir {
            Some(dir) => {
                Ok(Arc::new(with_cache(inner, dir).map_err(|e| {
                    ConfigError::invalid("backend.cache_dir", e.to_string())
                })?))
            }
            None => Ok(inner),
        }
    }
}

/// Reads a JSON array of response strings.
pub fn load_responses(path: &Path) -> Result<Vec<String>, ConfigError> {
    let read_err = |message: String| ConfigError::Read {
        path: path.display().to_string(),
        message,
    };
    let text = fs::read_to_string(path).map_err(|e| read_err(e.to_string()))?;
    serde_json::from_str(&text).map_err(|e| read_err(format!("expected a JSON array of strings: {e}")))
}

fn default_template() -> String {
    SENTENCE.into()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategyConfig {
    pub id: StrategyId,
    #[serde(default)]
    pub k: u32,
    #[serde(default)]
    pub merge_mode: MergeMode,
    #[serde(default = "default_template")]
    pub template: String,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        Self {
            id: StrategyId::Vanilla,
            k: 0,
            merge_mode: MergeMode::Concat,
            template: default_template(),
        }
    }
}

impl StrategyConfig {
    pub fn spec(&self) -> StrategySpec {
        StrategySpec {
            id: self.id,
            k: if self.id == StrategyId::Vanilla { 0 } else { self.k },
            merge_mode: self.merge_mode,
        }
    }
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("results")
}
fn default_parallelism() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Names the JSONL/CSV outputs; defaults to the experiment name.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub backend: BackendConfig,
    #[serde(default)]
    pub strategy: StrategyConfig,
    /// Required by `experiment run`; `gen` only reads the other sections.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub experiment: Option<ExperimentConfig>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub templates_dir: Option<PathBuf>,
    #[serde(default)]
    pub policy: MatchPolicy,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    #[serde(default)]
    pub seed: u64,
}

impl RunConfig {
    /// Parses, resolves relative paths against `base` and validates.
    pub fn from_json(text: &str, base: &Path, origin: &str) -> Result<Self, ConfigError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let mut cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let key = e.path().to_string();
            ConfigError::Schema {
                path: origin.to_string(),
                key: if key == "." { "(root)".into() } else { key },
                message: e.into_inner().to_string(),
            }
        })?;
        cfg.resolve(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_json(&text, base, &path.display().to_string())
    }

    fn resolve(&mut self, base: &Path) {
        self.backend.resolve(base);
        self.output_dir = base.join(&self.output_dir);
        self.templates_dir = self.templates_dir.take().map(|p| base.join(p));
        if let Some(e) = &mut self.experiment {
            e.resolve(base);
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.backend.validate()?;
        if self.parallelism == 0 {
            return Err(ConfigError::invalid("parallelism", "must be at least 1"));
        }
        let templates = self.templates()?;
        templates
            .prompt(&self.strategy.template)
            .map_err(|e| ConfigError::invalid("strategy.template", e.to_string()))?;
        match &self.experiment {
            Some(e) => e.validate(&templates),
            None => Ok(()),
        }
    }

    pub fn require_experiment(&self) -> Result<&ExperimentConfig, ConfigError> {
        self.experiment
            .as_ref()
            .ok_or_else(|| ConfigError::invalid("experiment", "an experiment section is required"))
    }

    pub fn templates(&self) -> Result<TemplateSet, ConfigError> {
        match &self.templates_dir {
            Some(dir) => TemplateSet::with_dir(dir).map_err(|e| ConfigError::invalid("templates_dir", e.to_string())),
            None => Ok(TemplateSet::builtin()),
        }
    }

    pub fn experiment_id(&self) -> String {
        self.id
            .clone()
            .or_else(|| self.experiment.as_ref().map(|e| e.name().to_string()))
            .unwrap_or_else(|| "run".into())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<RunConfig, ConfigError> {
        RunConfig::from_json(text, Path::new("/base"), "cfg.json")
    }

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = parse(r#"{"backend": {"kind": "synthetic"}, "experiment": {"name": "constraint_scaling"}}"#).unwrap();
        assert_eq!(cfg.strategy.id, StrategyId::Vanilla);
        assert_eq!(cfg.strategy.template, "sentence");
        assert_eq!(cfg.output_dir, Path::new("/base/results"));
        assert_eq!(cfg.parallelism, 1);
        assert_eq!(cfg.experiment_id(), "constraint_scaling");
        assert_eq!(cfg.backend.params, DecodingParams::greedy());
    }

    #[test]
    fn unknown_key_is_named() {
        let err = parse(
            r#"{"backend": {"kind": "synthetic"}, "strateggy": {}, "experiment": {"name": "constraint_scaling"}}"#,
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("strateggy"), "{msg}");

        let err = parse(r#"{"backend": {"kind": "synthetic", "synthetic": {"p0": 1}}, "experiment": {"name": "constraint_scaling"}}"#)
            .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("backend.synthetic") && msg.contains("p0"), "{msg}");
    }

    #[test]
    fn validation_errors() {
        let http = parse(r#"{"backend": {"kind": "http"}, "experiment": {"name": "constraint_scaling"}}"#);
        assert!(http.unwrap_err().to_string().contains("backend.base_url"));
        let tpl = parse(
            r#"{"backend": {"kind": "synthetic"}, "strategy": {"id": "rj", "template": "nope"},
                "experiment": {"name": "constraint_scaling"}}"#,
        );
        assert!(tpl.unwrap_err().to_string().contains("strategy.template"));
        let missing = parse(
            r#"{"backend": {"kind": "scripted", "responses_path": "nope.json"},
                "experiment": {"name": "constraint_scaling"}}"#,
        );
        assert!(missing.unwrap_err().to_string().contains("responses_path"));
    }

    #[test]
    fn vanilla_ignores_budget() {
        let s = StrategyConfig {
            k: 4,
            ..StrategyConfig::default()
        };
        assert_eq!(s.spec().k, 0);
    }
}
