//! Trial execution and the append-only JSONL store.

use std::collections::{HashMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::mpsc;
use std::thread;
use std::time::Instant;

use serde::Serialize;
use tracing::{info, warn};

use super::{ExperimentContext, ExperimentError, KeywordPosition, TrialRecord, TrialSpec, SCHEMA_VERSION};
use crate::constraint::KeywordSet;
use crate::metrics::trial_metrics;
use crate::strategies::{run_strategy, GenContext, PromptTemplate, Rewriter, DNC_REWRITE};

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct RunStats {
    pub planned: usize,
    /// Trials found complete on disk before this run.
    pub skipped: usize,
    pub executed: usize,
    /// Planned trials still missing after this run.
    pub remaining: usize,
    pub cancelled: bool,
}

pub fn results_path(ctx: &ExperimentContext) -> PathBuf {
    ctx.output_dir.join(format!("{}.jsonl", ctx.experiment_id))
}

struct Templates {
    prompts: HashMap<String, PromptTemplate>,
    rewrite: PromptTemplate,
}

impl Templates {
    fn for_plan<'a>(
        ctx: &ExperimentContext,
        specs: impl IntoIterator<Item = &'a TrialSpec>,
    ) -> Result<Self, ExperimentError> {
        let mut prompts = HashMap::new();
        for spec in specs {
            if !prompts.contains_key(&spec.template) {
                prompts.insert(spec.template.clone(), ctx.templates.prompt(&spec.template)?);
            }
        }
        Ok(Self {
            prompts,
            rewrite: ctx.templates.prompt(DNC_REWRITE)?,
        })
    }
}

/// Runs one planned trial against the context's backend.
pub fn run_trial(ctx: &ExperimentContext, spec: &TrialSpec) -> Result<TrialRecord, ExperimentError> {
    let templates = Templates::for_plan(ctx, [spec])?;
    trial(ctx, spec, &templates)
}

fn trial(ctx: &ExperimentContext, spec: &TrialSpec, templates: &Templates) -> Result<TrialRecord, ExperimentError> {
    let start = Instant::now();
    let set = KeywordSet::new(&spec.keywords, ctx.policy)?;
    let gen = GenContext::new(&*ctx.backend, &ctx.model_id, &spec.params).with_trial(spec.trial_index);
    let rewriter = Rewriter {
        ctx: gen,
        template: &templates.rewrite,
    };
    let tpl = &templates.prompts[&spec.template];
    let outcome =
        run_strategy(&spec.strategy, &gen, tpl, &set, Some(&rewriter)).map_err(|source| ExperimentError::Strategy {
            trial_index: spec.trial_index,
            source,
        })?;
    let metrics = trial_metrics(&set, &set.tokenize(&outcome.final_text))?;
    Ok(TrialRecord {
        schema_version: SCHEMA_VERSION,
        experiment_id: ctx.experiment_id.clone(),
        trial_index: spec.trial_index,
        group: spec.group.clone(),
        spec_hash: ctx.spec_hash(spec),
        keywords: spec
            .keywords
            .iter()
            .enumerate()
            .map(|(position, k)| KeywordPosition {
                keyword: k.clone(),
                position,
            })
            .collect(),
        policy: ctx.policy,
        strategy: spec.strategy.clone(),
        template: spec.template.clone(),
        params: spec.params.clone(),
        backend_id: ctx.backend.id().to_string(),
        model_id: ctx.model_id.clone(),
        extra: spec.extra.clone(),
        outcome,
        metrics,
        wall_time_ms: start.elapsed().as_secs_f64() * 1000.0,
    })
}

/// Runs `specs` on up to `ctx.parallelism` workers and hands each finished
/// record to `sink` on the calling thread. Stops scheduling new trials on
/// the first error, on cancellation or when the sink fails.
fn drive<F>(ctx: &ExperimentContext, specs: &[&TrialSpec], mut sink: F) -> Result<usize, ExperimentError>
where
    F: FnMut(TrialRecord) -> Result<(), ExperimentError>,
{
    let templates = Templates::for_plan(ctx, specs.iter().copied())?;
    let next = AtomicUsize::new(0);
    let stop = AtomicBool::new(false);
    let workers = ctx.parallelism.max(1).min(specs.len().max(1));
    let mut done = 0usize;
    let mut first_err = None;

    thread::scope(|scope| {
        let (tx, rx) = mpsc::channel();
        for _ in 0..workers {
            let tx = tx.clone();
            let (next, stop, templates) = (&next, &stop, &templates);
            scope.spawn(move || loop {
                if stop.load(Ordering::SeqCst) || ctx.options.cancel.load(Ordering::SeqCst) {
                    break;
                }
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(spec) = specs.get(i) else { break };
                if tx.send(trial(ctx, spec, templates)).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        for result in rx {
            let outcome = result.and_then(&mut sink);
            match outcome {
                Ok(()) => done += 1,
                Err(e) => {
                    stop.store(true, Ordering::SeqCst);
                    first_err.get_or_insert(e);
                }
            }
        }
    });
    match first_err {
        Some(e) => Err(e),
        None => Ok(done),
    }
}

/// Runs trials without touching disk; records come back in plan order.
pub fn run_trials_in_memory(ctx: &ExperimentContext, plan: &[TrialSpec]) -> Result<Vec<TrialRecord>, ExperimentError> {
    let specs: Vec<&TrialSpec> = plan.iter().collect();
    let mut records = Vec::with_capacity(plan.len());
    drive(ctx, &specs, |r| {
        records.push(r);
        Ok(())
    })?;
    records.sort_by_key(|r| r.trial_index);
    Ok(records)
}

/// Cuts a trailing partial line left by an interrupted writer.
fn repair_tail(path: &Path) -> Result<(), ExperimentError> {
    let bytes = fs::read(path).map_err(|e| ExperimentError::io(path, e))?;
    if bytes.is_empty() || bytes.ends_with(b"\n") {
        return Ok(());
    }
    let keep = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
    warn!(path = %path.display(), dropped = bytes.len() - keep, "truncating partial trailing record");
    let file = OpenOptions::new()
        .write(true)
        .open(path)
        .map_err(|e| ExperimentError::io(path, e))?;
    file.set_len(keep as u64).map_err(|e| ExperimentError::io(path, e))
}

/// Reads every record of a results file. A final line without its newline
/// is an interrupted write and is ignored.
pub fn read_records(path: &Path) -> Result<Vec<TrialRecord>, ExperimentError> {
    let file = File::open(path).map_err(|e| ExperimentError::io(path, e))?;
    let mut reader = BufReader::new(file);
    let mut records = Vec::new();
    let mut line = String::new();
    let mut lineno = 0;
    loop {
        line.clear();
        let n = reader.read_line(&mut line).map_err(|e| ExperimentError::io(path, e))?;
        if n == 0 {
            break;
        }
        lineno += 1;
        if !line.ends_with('\n') {
            warn!(path = %path.display(), line = lineno, "ignoring partial trailing record");
            break;
        }
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| ExperimentError::Record {
            path: path.display().to_string(),
            line: lineno,
            message: e.to_string(),
        })?;
        records.push(record);
    }
    Ok(records)
}

/// Executes the trials of `plan` that are not yet on disk, appending each
/// finished record to the experiment's JSONL file.
pub fn execute(ctx: &ExperimentContext, plan: &[TrialSpec]) -> Result<RunStats, ExperimentError> {
    let path = results_path(ctx);
    fs::create_dir_all(&ctx.output_dir).map_err(|e| ExperimentError::io(&ctx.output_dir, e))?;
    let path_str = path.display().to_string();

    let mut done: HashMap<u64, String> = HashMap::new();
    if path.exists() {
        repair_tail(&path)?;
        for r in read_records(&path)? {
            if r.experiment_id != ctx.experiment_id {
                continue;
            }
            if done.insert(r.trial_index, r.spec_hash).is_some() {
                return Err(ExperimentError::Duplicate {
                    path: path_str,
                    trial_index: r.trial_index,
                });
            }
        }
    }

    let planned: HashSet<u64> = plan.iter().map(|s| s.trial_index).collect();
    for spec in plan {
        if let Some(hash) = done.get(&spec.trial_index) {
            if *hash != ctx.spec_hash(spec) {
                return Err(ExperimentError::SpecMismatch {
                    path: path_str,
                    trial_index: spec.trial_index,
                });
            }
        }
    }
    let stale = done.keys().filter(|i| !planned.contains(i)).count();
    if stale > 0 {
        warn!(path = %path_str, stale, "records outside the current plan are ignored");
    }

    let mut pending: Vec<&TrialSpec> = plan.iter().filter(|s| !done.contains_key(&s.trial_index)).collect();
    let skipped = plan.len() - pending.len();
    if let Some(max) = ctx.options.max_trials {
        pending.truncate(max);
    }
    info!(experiment = %ctx.experiment_id, planned = plan.len(), skipped, pending = pending.len(), "running trials");

    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(|e| ExperimentError::io(&path, e))?;
    let result = drive(ctx, &pending, |record| {
        let mut line = serde_json::to_string(&record).map_err(|e| ExperimentError::io(&path, e))?;
        line.push('\n');
        file.write_all(line.as_bytes())
            .map_err(|e| ExperimentError::io(&path, e))
    });
    file.flush().map_err(|e| ExperimentError::io(&path, e))?;
    let executed = result?;
    Ok(RunStats {
        planned: plan.len(),
        skipped,
        executed,
        remaining: plan.len() - skipped - executed,
        cancelled: ctx.options.cancel.load(Ordering::SeqCst),
    })
}
