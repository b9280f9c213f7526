//! Generation strategies over any [`Backend`]: a single vanilla call,
//! rejection sampling, and divide-and-conquer generation.
//!
//! Budgets follow one convention: `k` is the number of additional
//! iterations allowed after the first call, so a strategy makes at most
//! `k + 1` generation calls. `k = 0` is plain vanilla prompting for every
//! strategy, and a "DnC-5" configuration is `k = 5`.

mod quality;
mod template;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{Backend, BackendError, CallId, CallPurpose, DecodingParams, GenerationRequest, GenerationResult};
use crate::constraint::{contains_keyword, KeywordSet};
use crate::metrics::Coverage;

pub use quality::{llm_quality_eval, parse_scores, QualityError, QualityScores};
pub use template::{
    render_prompt, substitute, PromptTemplate, TemplateEntry, TemplateError, TemplateSet, DNC_REWRITE, QUALITY_EVAL,
    SENTENCE,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyId {
    Vanilla,
    Rj,
    Dnc,
}

impl StrategyId {
    pub fn as_str(&self) -> &'static str {
        match self {
            StrategyId::Vanilla => "vanilla",
            StrategyId::Rj => "rj",
            StrategyId::Dnc => "dnc",
        }
    }
}

impl std::fmt::Display for StrategyId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for StrategyId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "vanilla" => Ok(StrategyId::Vanilla),
            "rj" => Ok(StrategyId::Rj),
            "dnc" => Ok(StrategyId::Dnc),
            other => Err(format!("unknown strategy {other:?} (expected vanilla, rj or dnc)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeMode {
    #[default]
    Concat,
    LlmRewrite,
}

impl std::str::FromStr for MergeMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "concat" => Ok(MergeMode::Concat),
            "llm_rewrite" => Ok(MergeMode::LlmRewrite),
            other => Err(format!("unknown merge mode {other:?} (expected concat or llm_rewrite)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    AllSatisfied,
    BudgetExhausted,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergeRecord {
    pub mode: MergeMode,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rewrite_response: Option<String>,
    /// The rewrite dropped a satisfied keyword and the concatenation was used.
    pub fell_back: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceStep {
    /// 1-based iteration number.
    pub iteration: u32,
    pub prompt: String,
    pub response: String,
    /// Keywords of the full set found in this response alone.
    pub satisfied_in_response: Vec<String>,
    /// Keywords this step adds to the outcome's satisfied set.
    pub newly_satisfied: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub merge: Option<MergeRecord>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StrategyOutcome {
    pub strategy_id: StrategyId,
    pub final_text: String,
    /// One flag per keyword, in keyword-set order, verified against `final_text`.
    pub satisfied: Vec<bool>,
    pub iterations_used: u32,
    pub trace: Vec<TraceStep>,
    pub terminated_by: Termination,
}

impl StrategyOutcome {
    pub fn all_satisfied(&self) -> bool {
        self.satisfied.iter().all(|&s| s)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StrategyError {
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("{strategy} aborted at iteration {iteration}: {source}")]
    Backend {
        strategy: StrategyId,
        iteration: u32,
        #[source]
        source: BackendError,
        /// Steps completed before the failure.
        trace: Vec<TraceStep>,
    },
}

/// Everything a strategy needs to issue calls for one trial.
#[derive(Clone, Copy)]
pub struct GenContext<'a> {
    pub backend: &'a dyn Backend,
    pub model_id: &'a str,
    pub params: &'a DecodingParams,
    /// Trial identity; keeps calls of different trials on distinct streams.
    pub trial: u64,
}

impl<'a> GenContext<'a> {
    pub fn new(backend: &'a dyn Backend, model_id: &'a str, params: &'a DecodingParams) -> Self {
        Self {
            backend,
            model_id,
            params,
            trial: 0,
        }
    }

    pub fn with_trial(mut self, trial: u64) -> Self {
        self.trial = trial;
        self
    }

    /// Issues one call. A fixed seed is offset by the attempt number so that
    /// repeated attempts of the same prompt are not identical draws.
    pub fn call(
        &self,
        prompt: String,
        keywords: &[&str],
        attempt: u32,
        purpose: CallPurpose,
    ) -> Result<GenerationResult, BackendError> {
        let mut params = self.params.clone();
        params.seed = params.seed.map(|s| s.wrapping_add(attempt as u64));
        let mut req = GenerationRequest::user_prompt(self.model_id, prompt, params);
        req.keywords = keywords.iter().map(|k| k.to_string()).collect();
        req.call = CallId {
            trial: self.trial,
            attempt,
            purpose,
        };
        self.backend.generate(&req)
    }
}

/// Template used by the `llm_rewrite` merge. Receives the keywords to keep
/// as `{keywords}` and the concatenated text as `{text}`.
#[derive(Clone, Copy)]
pub struct Rewriter<'a> {
    pub ctx: GenContext<'a>,
    pub template: &'a PromptTemplate,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MergeOutput {
    pub text: String,
    pub record: MergeRecord,
}

fn concat(s: &str, s_new: &str) -> String {
    match (s.is_empty(), s_new.is_empty()) {
        (true, _) => s_new.to_string(),
        (false, true) => s.to_string(),
        (false, false) => format!("{s} {s_new}"),
    }
}

/// Merges the running text `s` with a new response.
///
/// `concat` joins with one space. `llm_rewrite` asks the rewriter to fuse
/// the concatenation into one paragraph, then checks that every keyword of
/// `must_keep` survived; if one was dropped the concatenation is returned.
pub fn merge(
    s: &str,
    s_new: &str,
    mode: MergeMode,
    rewriter: Option<&Rewriter<'_>>,
    must_keep: &KeywordSet,
    attempt: u32,
) -> Result<MergeOutput, BackendError> {
    let joined = concat(s, s_new);
    let plain = |text: String| MergeOutput {
        text,
        record: MergeRecord {
            mode,
            rewrite_response: None,
            fell_back: false,
        },
    };
    if mode == MergeMode::Concat || s.is_empty() {
        return Ok(plain(joined));
    }
    let rewriter = rewriter.ok_or_else(|| BackendError::Config("llm_rewrite merge needs a backend".into()))?;
    let keep = must_keep.surfaces();
    let prompt = rewriter
        .template
        .render_with(&keep, &[(template::TEXT, joined.as_str())])
        .map_err(|e| BackendError::Config(e.to_string()))?;
    let response = rewriter.ctx.call(prompt, &[], attempt, CallPurpose::Rewrite)?.text;
    let tokens = must_keep.tokenize(&response);
    let kept = must_keep
        .keywords()
        .iter()
        .all(|k| contains_keyword(&tokens, k, must_keep.policy()));
    Ok(MergeOutput {
        text: if kept { response.clone() } else { joined },
        record: MergeRecord {
            mode,
            rewrite_response: Some(response),
            fell_back: !kept,
        },
    })
}

fn empty_outcome(strategy_id: StrategyId) -> StrategyOutcome {
    StrategyOutcome {
        strategy_id,
        final_text: String::new(),
        satisfied: Vec::new(),
        iterations_used: 0,
        trace: Vec::new(),
        terminated_by: Termination::AllSatisfied,
    }
}

fn abort(strategy: StrategyId, iteration: u32, trace: Vec<TraceStep>) -> impl FnOnce(BackendError) -> StrategyError {
    move |source| StrategyError::Backend {
        strategy,
        iteration,
        source,
        trace,
    }
}

fn names(set: &KeywordSet, flags: &[bool]) -> Vec<String> {
    set.keywords()
        .iter()
        .zip(flags)
        .filter(|(_, &f)| f)
        .map(|(k, _)| k.surface.clone())
        .collect()
}

/// One call with the full keyword set.
pub fn vanilla_generate(
    ctx: &GenContext<'_>,
    tpl: &PromptTemplate,
    set: &KeywordSet,
) -> Result<StrategyOutcome, StrategyError> {
    let mut outcome = rejection_sampling(ctx, tpl, set, 0)?;
    outcome.strategy_id = StrategyId::Vanilla;
    Ok(outcome)
}

/// Up to `k + 1` independent full-prompt attempts. Returns the first
/// attempt that satisfies every keyword, otherwise the attempt with the
/// highest coverage (earliest on ties). Only the returned attempt carries
/// `newly_satisfied` entries; discarded attempts contribute nothing.
pub fn rejection_sampling(
    ctx: &GenContext<'_>,
    tpl: &PromptTemplate,
    set: &KeywordSet,
    k: u32,
) -> Result<StrategyOutcome, StrategyError> {
    if set.is_empty() {
        return Ok(empty_outcome(StrategyId::Rj));
    }
    let prompt = render_prompt(tpl, set)?;
    let surfaces = set.surfaces();
    let mut trace: Vec<TraceStep> = Vec::new();
    let mut best: Option<(usize, Vec<bool>, Coverage)> = None;

    for attempt in 0..=k {
        let response = ctx
            .call(prompt.clone(), &surfaces, attempt, CallPurpose::Generate)
            .map_err(|e| abort(StrategyId::Rj, attempt + 1, trace.clone())(e))?
            .text;
        let flags = set.satisfied_flags(&set.tokenize(&response));
        let coverage = Coverage {
            satisfied: flags.iter().filter(|&&f| f).count(),
            total: flags.len(),
        };
        trace.push(TraceStep {
            iteration: attempt + 1,
            prompt: prompt.clone(),
            response,
            satisfied_in_response: names(set, &flags),
            newly_satisfied: Vec::new(),
            merge: None,
        });
        let better = best.as_ref().is_none_or(|(_, _, c)| coverage.satisfied > c.satisfied);
        if better {
            best = Some((trace.len() - 1, flags, coverage));
        }
        if coverage.is_complete() {
            break;
        }
    }

    let (chosen, flags, coverage) = best.expect("at least one attempt");
    trace[chosen].newly_satisfied = trace[chosen].satisfied_in_response.clone();
    Ok(StrategyOutcome {
        strategy_id: StrategyId::Rj,
        final_text: trace[chosen].response.clone(),
        satisfied: flags,
        iterations_used: trace.len() as u32,
        terminated_by: if coverage.is_complete() {
            Termination::AllSatisfied
        } else {
            Termination::BudgetExhausted
        },
        trace,
    })
}

/// Divide-and-conquer generation.
///
/// Each iteration prompts with only the still-missing keywords, checks the
/// new response on its own for newly covered keywords, merges it into the
/// running text and shrinks the missing set. Stops when nothing is missing
/// or after `k + 1` generation calls. Final flags are re-checked against the
/// merged text.
pub fn dnc_generate(
    ctx: &GenContext<'_>,
    tpl: &PromptTemplate,
    set: &KeywordSet,
    k: u32,
    merge_mode: MergeMode,
    rewriter: Option<&Rewriter<'_>>,
) -> Result<StrategyOutcome, StrategyError> {
    if set.is_empty() {
        return Ok(empty_outcome(StrategyId::Dnc));
    }
    let policy = *set.policy();
    let mut missing = set.clone();
    let mut text = String::new();
    let mut trace: Vec<TraceStep> = Vec::new();

    let mut attempt = 0u32;
    while !missing.is_empty() && attempt <= k {
        let iteration = attempt + 1;
        let prompt = render_prompt(tpl, &missing)?;
        let response = ctx
            .call(prompt.clone(), &missing.surfaces(), attempt, CallPurpose::Generate)
            .map_err(|e| abort(StrategyId::Dnc, iteration, trace.clone())(e))?
            .text;
        let tokens = set.tokenize(&response);
        let newly = missing.filter(|kw| contains_keyword(&tokens, kw, &policy));
        let still_missing = missing.filter(|kw| !contains_keyword(&tokens, kw, &policy));
        let kept = set.filter(|kw| !still_missing.keywords().contains(kw));

        let merged = merge(&text, &response, merge_mode, rewriter, &kept, attempt)
            .map_err(|e| abort(StrategyId::Dnc, iteration, trace.clone())(e))?;

        trace.push(TraceStep {
            iteration,
            prompt,
            satisfied_in_response: names(set, &set.satisfied_flags(&tokens)),
            newly_satisfied: newly.surfaces().iter().map(|s| s.to_string()).collect(),
            response,
            merge: (iteration > 1).then_some(merged.record),
        });
        text = merged.text;
        missing = still_missing;
        attempt += 1;
    }

    let satisfied = set.satisfied_flags(&set.tokenize(&text));
    Ok(StrategyOutcome {
        strategy_id: StrategyId::Dnc,
        terminated_by: if satisfied.iter().all(|&s| s) {
            Termination::AllSatisfied
        } else {
            Termination::BudgetExhausted
        },
        final_text: text,
        satisfied,
        iterations_used: trace.len() as u32,
        trace,
    })
}

/// Strategy selection with its budget, as stored in configs and records.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategySpec {
    pub id: StrategyId,
    #[serde(default)]
    pub k: u32,
    #[serde(default)]
    pub merge_mode: MergeMode,
}

impl StrategySpec {
    pub fn vanilla() -> Self {
        Self {
            id: StrategyId::Vanilla,
            k: 0,
            merge_mode: MergeMode::Concat,
        }
    }

    pub fn new(id: StrategyId, k: u32) -> Self {
        Self {
            id,
            k,
            merge_mode: MergeMode::Concat,
        }
    }
}

/// Runs whichever strategy `spec` names.
pub fn run_strategy(
    spec: &StrategySpec,
    ctx: &GenContext<'_>,
    tpl: &PromptTemplate,
    set: &KeywordSet,
    rewriter: Option<&Rewriter<'_>>,
) -> Result<StrategyOutcome, StrategyError> {
    match spec.id {
        StrategyId::Vanilla => vanilla_generate(ctx, tpl, set),
        StrategyId::Rj => rejection_sampling(ctx, tpl, set, spec.k),
        StrategyId::Dnc => dnc_generate(ctx, tpl, set, spec.k, spec.merge_mode, rewriter),
    }
}
