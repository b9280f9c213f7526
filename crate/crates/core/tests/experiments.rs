use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::atomic::Ordering;
use std::sync::Arc;

use lexcon_core::backend::{with_cache, Backend, DecodingParams, GenerationRequest, ScriptedBackend};
use lexcon_core::config::RunConfig;
use lexcon_core::experiments::{
    read_records, rescore_record, results_path, run_experiment, ExperimentContext, ExperimentError, ReportDetails,
    RunOptions, TrialRecord,
};
use serde_json::{json, Value};

fn config(dir: &Path, experiment: Value, extra: Value) -> RunConfig {
    let mut cfg = json!({
        "id": "exp",
        "backend": {"kind": "synthetic", "synthetic": {"base_coverage": 0.7, "seed": 3}},
        "experiment": experiment,
        "output_dir": dir.join("out"),
        "seed": 17
    });
    for (k, v) in extra.as_object().unwrap() {
        cfg[k] = v.clone();
    }
    RunConfig::from_json(&cfg.to_string(), dir, "test").unwrap()
}

fn scaling() -> Value {
    json!({"name": "constraint_scaling", "n_list": [3, 5], "n_sets": 20})
}

fn run(cfg: &RunConfig, options: RunOptions) -> Result<lexcon_core::experiments::ExperimentReport, ExperimentError> {
    let ctx = ExperimentContext::from_config(cfg, options).unwrap();
    run_experiment(&ctx, cfg.experiment.as_ref().unwrap())
}

/// Record lines with the timing field removed.
fn stripped(path: &Path) -> Vec<Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| {
            let mut v: Value = serde_json::from_str(l).unwrap();
            v.as_object_mut().unwrap().remove("wall_time_ms");
            v
        })
        .collect()
}

fn by_index(records: Vec<TrialRecord>) -> BTreeMap<u64, Value> {
    let mut out = BTreeMap::new();
    for r in records {
        let mut v = serde_json::to_value(&r).unwrap();
        v.as_object_mut().unwrap().remove("wall_time_ms");
        assert!(
            out.insert(r.trial_index, v).is_none(),
            "duplicate trial {}",
            r.trial_index
        );
    }
    out
}

#[test]
fn identical_configs_write_identical_results() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = run(&config(a.path(), scaling(), json!({})), RunOptions::default()).unwrap();
    let rb = run(&config(b.path(), scaling(), json!({})), RunOptions::default()).unwrap();
    assert_eq!(ra.run.executed, 40);
    assert_eq!(ra.groups, rb.groups);
    let pa = a.path().join("out/exp.jsonl");
    let pb = b.path().join("out/exp.jsonl");
    assert_eq!(stripped(&pa), stripped(&pb));
    assert!(a.path().join("out/exp.summary.csv").exists());
}

#[test]
fn resuming_completes_the_same_record_set() {
    let full = tempfile::tempdir().unwrap();
    let cfg = config(full.path(), scaling(), json!({}));
    run(&cfg, RunOptions::default()).unwrap();
    let expected = by_index(read_records(&full.path().join("out/exp.jsonl")).unwrap());

    let part = tempfile::tempdir().unwrap();
    let cfg = config(part.path(), scaling(), json!({}));
    let first = run(
        &cfg,
        RunOptions {
            max_trials: Some(20),
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!((first.run.executed, first.run.remaining), (20, 20));
    assert!(!first.is_complete());

    // a torn write from the interrupted run
    let path = part.path().join("out/exp.jsonl");
    let mut bytes = fs::read(&path).unwrap();
    bytes.extend_from_slice(br#"{"schema_version":1,"experiment_id":"ex"#);
    fs::write(&path, bytes).unwrap();

    let second = run(&cfg, RunOptions::default()).unwrap();
    assert_eq!(
        (second.run.skipped, second.run.executed, second.run.remaining),
        (20, 20, 0)
    );
    assert_eq!(by_index(read_records(&path).unwrap()), expected);

    let third = run(&cfg, RunOptions::default()).unwrap();
    assert_eq!(third.run.executed, 0);
    assert_eq!(fs::read_to_string(&path).unwrap().lines().count(), 40);
}

#[test]
fn parallel_runs_produce_the_same_records() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run(&config(a.path(), scaling(), json!({})), RunOptions::default()).unwrap();
    run(
        &config(b.path(), scaling(), json!({"parallelism": 4})),
        RunOptions::default(),
    )
    .unwrap();
    assert_eq!(
        by_index(read_records(&a.path().join("out/exp.jsonl")).unwrap()),
        by_index(read_records(&b.path().join("out/exp.jsonl")).unwrap())
    );
}

#[test]
fn changed_backend_is_rejected_on_resume() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), scaling(), json!({}));
    run(
        &cfg,
        RunOptions {
            max_trials: Some(5),
            ..Default::default()
        },
    )
    .unwrap();
    let mut changed = cfg.clone();
    changed.backend.synthetic.seed = 4;
    let err = run(&changed, RunOptions::default()).unwrap_err();
    assert!(
        matches!(err, ExperimentError::SpecMismatch { trial_index: 0, .. }),
        "{err}"
    );
}

#[test]
fn duplicate_records_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), scaling(), json!({}));
    run(
        &cfg,
        RunOptions {
            max_trials: Some(2),
            ..Default::default()
        },
    )
    .unwrap();
    let path = dir.path().join("out/exp.jsonl");
    let text = fs::read_to_string(&path).unwrap();
    let first = text.lines().next().unwrap();
    fs::write(&path, format!("{text}{first}\n")).unwrap();
    let err = run(&cfg, RunOptions::default()).unwrap_err();
    assert!(
        matches!(err, ExperimentError::Duplicate { trial_index: 0, .. }),
        "{err}"
    );
}

#[test]
fn cancelled_run_executes_nothing_new() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), scaling(), json!({}));
    let options = RunOptions::default();
    options.cancel.store(true, Ordering::SeqCst);
    let report = run(&cfg, options).unwrap();
    assert_eq!(report.run.executed, 0);
    assert!(report.run.cancelled);
    assert_eq!(report.run.remaining, 40);
}

#[test]
fn dry_run_renders_prompts_without_writing() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), scaling(), json!({}));
    let report = run(
        &cfg,
        RunOptions {
            dry_run: true,
            ..Default::default()
        },
    )
    .unwrap();
    assert!(!report.dry_run_prompts.is_empty());
    assert!(report.dry_run_prompts[0]
        .1
        .starts_with("Generate a sentence with the following keywords:"));
    let ctx = ExperimentContext::from_config(&cfg, RunOptions::default()).unwrap();
    assert!(!results_path(&ctx).exists());
}

#[test]
fn stored_records_rescore_to_their_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(
        dir.path(),
        json!({"name": "strategy_comparison", "m": 6, "k_list": [0, 2], "n_sets": 5}),
        json!({}),
    );
    let report = run(&cfg, RunOptions::default()).unwrap();
    let ReportDetails::StrategyComparison { curve } = &report.details else {
        panic!("wrong details")
    };
    assert_eq!(curve.len(), 4);
    for r in read_records(&dir.path().join("out/exp.jsonl")).unwrap() {
        assert!(rescore_record(&r).unwrap().matches);
    }
}

#[test]
fn every_protocol_runs_on_the_synthetic_backend() {
    let experiments = [
        json!({"name": "position_bias", "n_list": [4], "sets_per_n": 3, "shuffles": 2, "permutations": 99}),
        json!({"name": "compound", "group_size": 5}),
        json!({"name": "decoding_sweep", "instances": 2, "n_keywords": 4, "temperatures": [0.1, 0.9], "top_k": [1, 5], "top_p": [0.5]}),
        json!({"name": "downstream", "task": "recipe", "n_sets": 2}),
        json!({"name": "downstream", "task": "table_to_text", "n_sets": 2}),
        json!({"name": "downstream", "task": "profile", "n_sets": 2}),
    ];
    for e in experiments {
        let dir = tempfile::tempdir().unwrap();
        let report = run(&config(dir.path(), e.clone(), json!({})), RunOptions::default()).unwrap();
        assert!(report.is_complete(), "{e}");
        assert!(report.run.executed > 0, "{e}");
        for out in &report.outputs {
            assert!(out.exists(), "{}", out.display());
        }
    }
}

#[test]
fn cache_serves_repeated_requests() {
    let dir = tempfile::tempdir().unwrap();
    let inner = Arc::new(ScriptedBackend::new(["first", "second"]));
    let cached = with_cache(inner.clone(), dir.path()).unwrap();
    let req = GenerationRequest::user_prompt("m", "p", DecodingParams::greedy());
    let a = cached.generate(&req).unwrap();
    assert!(!a.cached);
    assert!(cached.entry_path(&req).exists());
    let b = cached.generate(&req).unwrap();
    assert_eq!(b.text, "first");
    assert!(b.cached);
    assert_eq!(inner.calls(), 1);

    let mut other = req.clone();
    other.call.attempt = 1;
    assert_eq!(cached.generate(&other).unwrap().text, "second");
    assert_eq!(inner.calls(), 2);

    // a fresh wrapper over the same directory still hits
    let again = with_cache(Arc::new(ScriptedBackend::new(Vec::<String>::new())), dir.path()).unwrap();
    assert_eq!(again.generate(&req).unwrap().text, "first");
}
