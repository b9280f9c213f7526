//! Group summaries, CSV output and offline re-scoring.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::protocols::{AxisSummary, CompoundSummary, CurvePoint, PositionTrend};
use super::{ExperimentError, RunStats, TrialRecord};
use crate::constraint::KeywordSet;
use crate::metrics::{aggregate, trial_metrics, AggregateSummary, TrialMetrics};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub experiment_id: String,
    pub group: String,
    pub summary: AggregateSummary,
}

/// Aggregates records by `(experiment_id, group)` in order of first appearance.
pub fn summarize(records: &[TrialRecord]) -> Result<Vec<GroupSummary>, ExperimentError> {
    let mut keys: Vec<(&str, &str)> = Vec::new();
    let mut groups: Vec<Vec<TrialMetrics>> = Vec::new();
    for r in records {
        let key = (r.experiment_id.as_str(), r.group.as_str());
        match keys.iter().position(|k| *k == key) {
            Some(i) => groups[i].push(r.metrics.clone()),
            None => {
                keys.push(key);
                groups.push(vec![r.metrics.clone()]);
            }
        }
    }
    keys.into_iter()
        .zip(groups)
        .map(|((experiment_id, group), metrics)| {
            Ok(GroupSummary {
                experiment_id: experiment_id.to_string(),
                group: group.to_string(),
                summary: aggregate(&metrics)?,
            })
        })
        .collect()
}

pub(crate) fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>, ExperimentError> {
    csv::Writer::from_path(path).map_err(|e| ExperimentError::io(path, e))
}

pub(crate) fn csv_row<I, S>(w: &mut csv::Writer<std::fs::File>, path: &Path, row: I) -> Result<(), ExperimentError>
where
    I: IntoIterator<Item = S>,
    S: AsRef<[u8]>,
{
    w.write_record(row).map_err(|e| ExperimentError::io(path, e))
}

/// Writes the summary CSV (header plus one row per group) to any writer.
pub fn write_summary<W: std::io::Write>(out: W, groups: &[GroupSummary]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "experiment_id",
        "group",
        "n_trials",
        "mean_success",
        "mean_coverage",
        "ci_low",
        "ci_high",
    ])?;
    for g in groups {
        let s = &g.summary;
        w.write_record([
            g.experiment_id.clone(),
            g.group.clone(),
            s.n_trials.to_string(),
            format!("{:.6}", s.mean_instance_success),
            format!("{:.6}", s.mean_keyword_coverage),
            format!("{:.6}", s.ci_low),
            format!("{:.6}", s.ci_high),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_summary_csv(path: &Path, groups: &[GroupSummary]) -> Result<(), ExperimentError> {
    let file = std::fs::File::create(path).map_err(|e| ExperimentError::io(path, e))?;
    write_summary(file, groups).map_err(|e| ExperimentError::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RescoreResult {
    pub experiment_id: String,
    pub trial_index: u64,
    pub recomputed: TrialMetrics,
    pub matches: bool,
}

/// Recomputes a record's metrics from its stored final text.
pub fn rescore_record(record: &TrialRecord) -> Result<RescoreResult, ExperimentError> {
    let set = KeywordSet::new(&record.keyword_list(), record.policy)?;
    let recomputed = trial_metrics(&set, &set.tokenize(&record.outcome.final_text))?;
    Ok(RescoreResult {
        experiment_id: record.experiment_id.clone(),
        trial_index: record.trial_index,
        matches: recomputed == record.metrics,
        recomputed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ReportDetails {
    Groups,
    PositionBias { trends: Vec<PositionTrend> },
    Compound(CompoundSummary),
    DecodingSweep { axes: Vec<AxisSummary> },
    StrategyComparison { curve: Vec<CurvePoint> },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentReport {
    pub experiment_id: String,
    pub name: String,
    pub run: RunStats,
    pub groups: Vec<GroupSummary>,
    pub details: ReportDetails,
    pub outputs: Vec<PathBuf>,
    /// Rendered first prompts of a dry run, by trial index.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub dry_run_prompts: Vec<(u64, String)>,
}

impl ExperimentReport {
    pub fn is_complete(&self) -> bool {
        self.run.remaining == 0
    }
}
