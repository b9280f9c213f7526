//! Batch experiments: planning, resumable execution and reporting.
//!
//! Every experiment expands into a deterministic list of [`TrialSpec`]s.
//! Trials run on a bounded worker pool; finished trials are appended as one
//! JSON line each to `<output_dir>/<experiment_id>.jsonl` by a single writer.
//! Rerunning the same definition skips trial indices already on disk.

mod protocols;
mod report;
mod runner;
mod source;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::AtomicBool;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backend::{Backend, DecodingParams};
use crate::config::{ConfigError, RunConfig};
use crate::constraint::{ConstraintError, MatchPolicy};
use crate::data::DataRef;
use crate::metrics::{MetricsError, TrialMetrics};
use crate::strategies::{StrategyError, StrategyId, StrategyOutcome, StrategySpec, TemplateError, TemplateSet};
use crate::synthetic::CompoundTable;

pub use protocols::{
    compound_summary, decoding_sweep_summary, default_temperature_grid, default_top_k_grid, default_top_p_grid,
    plan_compound, plan_constraint_scaling, plan_decoding_sweep, plan_downstream, plan_position_bias,
    plan_strategy_comparison, position_trends, run_compound_experiment, run_constraint_scaling, run_decoding_sweep,
    run_downstream, run_experiment, run_position_bias, run_strategy_comparison, strategy_curve, AxisSummary,
    ClassStats, ComparisonParams, CompoundParams, CompoundSummary, CurvePoint, DownstreamParams, DownstreamTask,
    GridCell, PositionBiasParams, PositionTrend, ScalingParams, SweepParams,
};
pub use report::{
    rescore_record, summarize, write_summary, write_summary_csv, ExperimentReport, GroupSummary, ReportDetails,
    RescoreResult,
};
pub use runner::{execute, read_records, results_path, run_trial, run_trials_in_memory, RunStats};
pub use source::{
    parse_client_rows, parse_commongen, parse_keyword_sets, parse_pool, KeywordSource, LoadedSource, SourceKind,
};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("experiment configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Constraint(#[from] ConstraintError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("trial {trial_index}: {source}")]
    Strategy {
        trial_index: u64,
        #[source]
        source: StrategyError,
    },
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("{path} line {line}: {message}")]
    Record { path: String, line: usize, message: String },
    #[error(
        "{path}: trial {trial_index} was written by a different experiment definition; use a new id or output dir"
    )]
    SpecMismatch { path: String, trial_index: u64 },
    #[error("{path}: trial {trial_index} appears more than once")]
    Duplicate { path: String, trial_index: u64 },
}

impl ExperimentError {
    pub fn is_backend(&self) -> bool {
        matches!(
            self,
            ExperimentError::Strategy {
                source: StrategyError::Backend { .. },
                ..
            }
        )
    }

    pub(crate) fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        ExperimentError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        }
    }
}

impl From<ConfigError> for ExperimentError {
    fn from(e: ConfigError) -> Self {
        ExperimentError::Config(e.to_string())
    }
}

/// Experiment selection, tagged by `name` in the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum ExperimentConfig {
    ConstraintScaling(ScalingParams),
    PositionBias(PositionBiasParams),
    Compound(CompoundParams),
    DecodingSweep(SweepParams),
    Downstream(DownstreamParams),
    StrategyComparison(ComparisonParams),
}

impl ExperimentConfig {
    pub fn name(&self) -> &'static str {
        match self {
            ExperimentConfig::ConstraintScaling(_) => "constraint_scaling",
            ExperimentConfig::PositionBias(_) => "position_bias",
            ExperimentConfig::Compound(_) => "compound",
            ExperimentConfig::DecodingSweep(_) => "decoding_sweep",
            ExperimentConfig::Downstream(_) => "downstream",
            ExperimentConfig::StrategyComparison(_) => "strategy_comparison",
        }
    }

    pub(crate) fn resolve(&mut self, base: &Path) {
        match self {
            ExperimentConfig::ConstraintScaling(p) => p.source.resolve(base),
            ExperimentConfig::PositionBias(p) => p.source.resolve(base),
            ExperimentConfig::DecodingSweep(p) => p.source.resolve(base),
            ExperimentConfig::StrategyComparison(p) => p.source.resolve(base),
            ExperimentConfig::Compound(p) => {
                p.compounds = p.compounds.resolve(base);
                p.controls = p.controls.resolve(base);
                p.lexicon = p.lexicon.take().map(|l| l.resolve(base));
            }
            ExperimentConfig::Downstream(p) => p.data = p.data.take().map(|d| d.resolve(base)),
        }
    }

    pub(crate) fn validate(&self, templates: &TemplateSet) -> Result<(), ConfigError> {
        let exists = |key: &str, r: &DataRef| {
            if r.exists() {
                Ok(())
            } else {
                Err(ConfigError::invalid(key, format!("{r} does not exist")))
            }
        };
        let counts = |key: &str, list: &[usize]| {
            if list.is_empty() || list.contains(&0) {
                Err(ConfigError::invalid(key, "must be a non-empty list of positive counts"))
            } else {
                Ok(())
            }
        };
        match self {
            ExperimentConfig::ConstraintScaling(p) => {
                exists("experiment.source.path", &p.source.path)?;
                counts("experiment.n_list", &p.n_list)
            }
            ExperimentConfig::PositionBias(p) => {
                exists("experiment.source.path", &p.source.path)?;
                counts("experiment.n_list", &p.n_list)?;
                if p.shuffles < 2 {
                    return Err(ConfigError::invalid(
                        "experiment.shuffles",
                        "at least 2 shuffles are needed to separate word identity from position",
                    ));
                }
                Ok(())
            }
            ExperimentConfig::Compound(p) => {
                exists("experiment.compounds", &p.compounds)?;
                exists("experiment.controls", &p.controls)?;
                if let Some(l) = &p.lexicon {
                    exists("experiment.lexicon", l)?;
                }
                if p.group_size == 0 || p.rounds == 0 {
                    return Err(ConfigError::invalid(
                        "experiment.group_size",
                        "group_size and rounds must be positive",
                    ));
                }
                Ok(())
            }
            ExperimentConfig::DecodingSweep(p) => {
                exists("experiment.source.path", &p.source.path)?;
                if p.instances == 0 || p.n_keywords == 0 {
                    return Err(ConfigError::invalid(
                        "experiment.instances",
                        "instances and n_keywords must be positive",
                    ));
                }
                p.grid_params(&DecodingParams::default())
                    .map_err(|e| ConfigError::invalid("experiment", e.to_string()))?;
                Ok(())
            }
            ExperimentConfig::Downstream(p) => {
                exists("experiment.data", &p.data_ref())?;
                counts("experiment.n_list", &p.n_list())?;
                templates
                    .prompt(p.task.template())
                    .map_err(|e| ConfigError::invalid("experiment.task", e.to_string()))?;
                Ok(())
            }
            ExperimentConfig::StrategyComparison(p) => {
                exists("experiment.source.path", &p.source.path)?;
                if p.k_list.is_empty() || p.strategies.is_empty() || p.m == 0 {
                    return Err(ConfigError::invalid(
                        "experiment.k_list",
                        "k_list, strategies and m must be non-empty",
                    ));
                }
                Ok(())
            }
        }
    }

    /// Compound table implied by the experiment, for a synthetic backend
    /// configured without one.
    pub fn compound_table(&self) -> Option<CompoundTable> {
        match self {
            ExperimentConfig::Compound(p) => p.compounds.read().ok().and_then(|t| CompoundTable::parse(&t).ok()),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeywordPosition {
    pub keyword: String,
    pub position: usize,
}

/// One planned trial. Everything that determines the trial's inputs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialSpec {
    pub trial_index: u64,
    pub group: String,
    /// Keywords in prompt order.
    pub keywords: Vec<String>,
    pub strategy: StrategySpec,
    pub template: String,
    pub params: DecodingParams,
    pub extra: BTreeMap<String, Value>,
}

/// One finished trial, self-contained enough to be re-scored offline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub schema_version: u32,
    pub experiment_id: String,
    pub trial_index: u64,
    pub group: String,
    pub spec_hash: String,
    pub keywords: Vec<KeywordPosition>,
    pub policy: MatchPolicy,
    pub strategy: StrategySpec,
    pub template: String,
    pub params: DecodingParams,
    pub backend_id: String,
    pub model_id: String,
    #[serde(default)]
    pub extra: BTreeMap<String, Value>,
    pub outcome: StrategyOutcome,
    pub metrics: TrialMetrics,
    pub wall_time_ms: f64,
}

impl TrialRecord {
    pub fn strategy_id(&self) -> StrategyId {
        self.strategy.id
    }

    /// Keywords in prompt order.
    pub fn keyword_list(&self) -> Vec<String> {
        let mut kws = self.keywords.clone();
        kws.sort_by_key(|k| k.position);
        kws.into_iter().map(|k| k.keyword).collect()
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Stop after this many newly executed trials.
    pub max_trials: Option<usize>,
    /// Checked between trials; in-flight trials finish and are recorded.
    pub cancel: Arc<AtomicBool>,
    /// Plan and render prompts without calling the backend.
    pub dry_run: bool,
}

/// Everything trials of one experiment share.
#[derive(Clone)]
pub struct ExperimentContext {
    pub experiment_id: String,
    pub backend: Arc<dyn Backend>,
    pub model_id: String,
    pub params: DecodingParams,
    pub strategy: StrategySpec,
    pub template: String,
    pub templates: TemplateSet,
    pub policy: MatchPolicy,
    pub output_dir: PathBuf,
    pub parallelism: usize,
    pub seed: u64,
    /// Mixed into every spec hash; changes when the backend definition does.
    pub fingerprint: String,
    pub options: RunOptions,
}

impl ExperimentContext {
    /// A context with built-in templates and default settings.
    pub fn new(experiment_id: impl Into<String>, backend: Arc<dyn Backend>, output_dir: impl Into<PathBuf>) -> Self {
        let fingerprint = backend.id().to_string();
        Self {
            experiment_id: experiment_id.into(),
            backend,
            model_id: "synthetic".into(),
            params: DecodingParams::default(),
            strategy: StrategySpec::vanilla(),
            template: crate::strategies::SENTENCE.into(),
            templates: TemplateSet::builtin(),
            policy: MatchPolicy::default(),
            output_dir: output_dir.into(),
            parallelism: 1,
            seed: 0,
            fingerprint,
            options: RunOptions::default(),
        }
    }

    pub fn from_config(cfg: &RunConfig, options: RunOptions) -> Result<Self, ConfigError> {
        let backend = cfg
            .backend
            .build(cfg.experiment.as_ref().and_then(ExperimentConfig::compound_table))?;
        let mut def = cfg.backend.clone();
        // fields that do not change generated text
        def.cache_dir = None;
        def.retry = Default::default();
        def.max_in_flight = 0;
        def.timeout_secs = 0;
        let fingerprint = serde_json::to_string(&def).expect("backend config serializes");
        Ok(Self {
            experiment_id: cfg.experiment_id(),
            backend,
            model_id: cfg.backend.model_id.clone(),
            params: cfg.backend.params.clone(),
            strategy: cfg.strategy.spec(),
            template: cfg.strategy.template.clone(),
            templates: cfg.templates()?,
            policy: cfg.policy,
            output_dir: cfg.output_dir.clone(),
            parallelism: cfg.parallelism,
            seed: cfg.seed,
            fingerprint,
            options,
        })
    }

    pub fn spec_hash(&self, spec: &TrialSpec) -> String {
        #[derive(Serialize)]
        struct Material<'a> {
            experiment_id: &'a str,
            fingerprint: &'a str,
            model_id: &'a str,
            policy: &'a MatchPolicy,
            spec: &'a TrialSpec,
        }
        let bytes = serde_json::to_vec(&Material {
            experiment_id: &self.experiment_id,
            fingerprint: &self.fingerprint,
            model_id: &self.model_id,
            policy: &self.policy,
            spec,
        })
        .expect("spec serializes");
        hex::encode(&Sha256::digest(&bytes)[..12])
    }
}
