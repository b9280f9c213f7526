//! `lexcon`: keyword-constrained generation from the command line.
//!
//! Exit codes: 0 success, 1 constraints not satisfied (or re-scoring
//! mismatch), 2 usage or configuration error, 3 backend error, 130 when an
//! experiment run was interrupted before finishing.

use std::fs::File;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};
use serde_json::json;
use tracing::warn;

use lexcon_core::backend::DecodingParams;
use lexcon_core::config::{BackendConfig, BackendKind, ConfigError, RunConfig, StrategyConfig};
use lexcon_core::constraint::{KeywordSet, MatchPolicy};
use lexcon_core::experiments::{
    read_records, rescore_record, run_experiment, summarize, write_summary, ExperimentContext, ExperimentError,
    ExperimentReport, ReportDetails, RunOptions,
};
use lexcon_core::strategies::{
    render_prompt, run_strategy, GenContext, MergeMode, Rewriter, StrategyError, StrategyId, TemplateSet, DNC_REWRITE,
};

/// `println!` that exits quietly when stdout is a closed pipe.
macro_rules! out {
    ($($arg:tt)*) => {
        emit(format_args!($($arg)*))
    };
}

fn emit(args: std::fmt::Arguments<'_>) {
    let mut stdout = io::stdout().lock();
    if let Err(e) = stdout.write_fmt(args).and_then(|_| stdout.write_all(b"\n")) {
        if e.kind() == io::ErrorKind::BrokenPipe {
            std::process::exit(0);
        }
    }
}

const EXIT_UNSATISFIED: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_BACKEND: u8 = 3;
const EXIT_INTERRUPTED: u8 = 130;

#[derive(Parser)]
#[command(
    name = "lexcon",
    version,
    about = "Keyword-constrained text generation: single runs, batch experiments and scoring"
)]
struct Cli {
    /// More log output on stderr (-v info, -vv debug). LEXCON_LOG overrides.
    #[arg(short, long, action = ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate one text that should contain every keyword; prints the outcome as JSON
    Gen(Box<GenArgs>),
    /// Re-score a results JSONL file from the stored texts
    Eval {
        file: PathBuf,
        /// Write one re-score result per line to this file
        #[arg(long, short)]
        output: Option<PathBuf>,
    },
    /// Batch experiments
    Experiment {
        #[command(subcommand)]
        command: ExperimentCommand,
    },
    /// Summarize results JSONL files as CSV
    Report {
        #[arg(required = true)]
        files: Vec<PathBuf>,
        /// Write the CSV here instead of stdout
        #[arg(long, short)]
        output: Option<PathBuf>,
    },
    /// Prompt templates
    Templates {
        #[command(subcommand)]
        command: TemplatesCommand,
    },
}

#[derive(Subcommand)]
enum ExperimentCommand {
    /// Run (or resume) the experiment described by a config file
    Run(RunArgs),
}

#[derive(Subcommand)]
enum TemplatesCommand {
    /// List built-in and directory templates
    List {
        /// Directory of *.txt templates overriding the built-ins
        #[arg(long)]
        templates_dir: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Http,
    Scripted,
    Synthetic,
}

#[derive(Args)]
struct BackendArgs {
    /// Backend kind [default: scripted with --response, http with --base-url, else synthetic]
    #[arg(long, value_enum)]
    backend: Option<KindArg>,
    /// Model name sent to the server
    #[arg(long)]
    model: Option<String>,
    /// OpenAI-compatible server root, e.g. http://localhost:8000/v1 (API key from LEXCON_API_KEY)
    #[arg(long)]
    base_url: Option<String>,
    /// Scripted response, served in order (repeatable)
    #[arg(long = "response", value_name = "TEXT")]
    responses: Vec<String>,
    /// JSON array of scripted responses
    #[arg(long)]
    responses_file: Option<PathBuf>,
    /// Sampling temperature in (0, 1] [default: 0.05]
    #[arg(long)]
    temperature: Option<f64>,
    /// Top-k cutoff [default: 1]
    #[arg(long)]
    top_k: Option<u32>,
    /// Nucleus sampling mass in (0, 1]
    #[arg(long)]
    top_p: Option<f64>,
    /// Completion token limit [default: 512]
    #[arg(long)]
    max_tokens: Option<u32>,
    /// Sampling seed forwarded to the server
    #[arg(long)]
    seed: Option<u64>,
    /// Cache responses on disk in this directory
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    /// Synthetic model: per-keyword inclusion probability [default: 0.8]
    #[arg(long)]
    base_coverage: Option<f64>,
    /// Synthetic model seed [default: 0]
    #[arg(long)]
    synthetic_seed: Option<u64>,
}

#[derive(Args)]
struct GenArgs {
    /// Keywords, in prompt order
    #[arg(required = true)]
    keywords: Vec<String>,
    /// Take backend, strategy, template and policy settings from a run config; flags override it
    #[arg(long)]
    config: Option<PathBuf>,
    /// vanilla, rj (rejection sampling) or dnc (divide and conquer) [default: vanilla]
    #[arg(long)]
    strategy: Option<StrategyId>,
    /// Extra iterations after the first call, K [default: 5 for rj and dnc]
    #[arg(long)]
    max_iter: Option<u32>,
    /// DnC merge: concat or llm_rewrite [default: concat]
    #[arg(long)]
    merge: Option<MergeMode>,
    /// Prompt template name [default: sentence]
    #[arg(long)]
    template: Option<String>,
    /// Directory of *.txt templates overriding the built-ins
    #[arg(long)]
    templates_dir: Option<PathBuf>,
    /// Accept simple inflections when matching
    #[arg(long)]
    morphological: bool,
    /// Trial index used in call ids and cache keys
    #[arg(long, default_value_t = 0)]
    trial: u64,
    /// Print the rendered prompt without calling the backend
    #[arg(long)]
    dry_run: bool,
    #[command(flatten)]
    backend: BackendArgs,
}

#[derive(Args)]
struct RunArgs {
    config: PathBuf,
    /// Execute at most this many new trials, then stop
    #[arg(long)]
    max_trials: Option<usize>,
    /// Print rendered prompts of the planned trials without calling the backend
    #[arg(long)]
    dry_run: bool,
    /// Override the config's worker count
    #[arg(long)]
    parallelism: Option<usize>,
    /// Override the config's output directory
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Override the config's seed
    #[arg(long)]
    seed: Option<u64>,
    /// Print the full report as JSON instead of a table
    #[arg(long)]
    json: bool,
}

/// A failure with its exit code.
struct Failure {
    code: u8,
    kind: &'static str,
    message: String,
    detail: Option<serde_json::Value>,
}

impl Failure {
    fn config(message: impl ToString) -> Self {
        Self {
            code: EXIT_CONFIG,
            kind: "config",
            message: message.to_string(),
            detail: None,
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::config(e)
    }
}

impl From<ExperimentError> for Failure {
    fn from(e: ExperimentError) -> Self {
        if e.is_backend() {
            Self {
                code: EXIT_BACKEND,
                kind: "backend",
                message: e.to_string(),
                detail: None,
            }
        } else {
            Self {
                code: EXIT_CONFIG,
                kind: "experiment",
                message: e.to_string(),
                detail: None,
            }
        }
    }
}

fn init_logging(verbose: u8) {
    let default = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let filter = tracing_subscriber::EnvFilter::try_from_env("LEXCON_LOG")
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(default));
    tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(io::stderr)
        .with_target(false)
        .init();
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(cli.verbose);
    let result = match cli.command {
        Command::Gen(args) => cmd_gen(*args),
        Command::Eval { file, output } => cmd_eval(&file, output.as_deref()),
        Command::Experiment {
            command: ExperimentCommand::Run(args),
        } => cmd_experiment_run(args),
        Command::Report { files, output } => cmd_report(&files, output.as_deref()),
        Command::Templates {
            command: TemplatesCommand::List { templates_dir },
        } => cmd_templates_list(templates_dir.as_deref()),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            let mut err = json!({"error": f.kind, "message": f.message});
            if let Some(detail) = f.detail {
                err["detail"] = detail;
            }
            eprintln!("{err}");
            ExitCode::from(f.code)
        }
    }
}

fn apply_backend_flags(b: &mut BackendConfig, a: &BackendArgs, from_config: bool) {
    let kind = a.backend.map(|k| match k {
        KindArg::Http => BackendKind::Http,
        KindArg::Scripted => BackendKind::Scripted,
        KindArg::Synthetic => BackendKind::Synthetic,
    });
    b.kind = kind.unwrap_or(if !a.responses.is_empty() || a.responses_file.is_some() {
        BackendKind::Scripted
    } else if a.base_url.is_some() {
        BackendKind::Http
    } else if from_config {
        b.kind
    } else {
        BackendKind::Synthetic
    });
    if let Some(m) = &a.model {
        b.model_id = m.clone();
    }
    if let Some(u) = &a.base_url {
        b.base_url = Some(u.clone());
    }
    if !a.responses.is_empty() {
        b.responses = a.responses.clone();
    }
    if let Some(p) = &a.responses_file {
        b.responses_path = Some(p.clone());
    }
    let p: &mut DecodingParams = &mut b.params;
    p.temperature = a.temperature.or(p.temperature);
    p.top_k = a.top_k.or(p.top_k);
    p.top_p = a.top_p.or(p.top_p);
    p.max_tokens = a.max_tokens.unwrap_or(p.max_tokens);
    p.seed = a.seed.or(p.seed);
    if let Some(dir) = &a.cache_dir {
        b.cache_dir = Some(dir.clone());
    }
    if let Some(c) = a.base_coverage {
        b.synthetic.base_coverage = c;
    }
    if let Some(s) = a.synthetic_seed {
        b.synthetic.seed = s;
    }
}

fn cmd_gen(args: GenArgs) -> Result<u8, Failure> {
    let (mut backend_cfg, mut strategy, mut templates_dir, mut policy) = match &args.config {
        Some(path) => {
            let cfg = RunConfig::load(path)?;
            (cfg.backend, cfg.strategy, cfg.templates_dir, cfg.policy)
        }
        None => (
            BackendConfig::new(BackendKind::Synthetic),
            StrategyConfig::default(),
            None,
            MatchPolicy::default(),
        ),
    };
    apply_backend_flags(&mut backend_cfg, &args.backend, args.config.is_some());
    backend_cfg.validate()?;
    if let Some(id) = args.strategy {
        strategy.id = id;
        if args.max_iter.is_none() && id != StrategyId::Vanilla {
            strategy.k = 5;
        }
    }
    if let Some(k) = args.max_iter {
        strategy.k = k;
    }
    if let Some(m) = args.merge {
        strategy.merge_mode = m;
    }
    if let Some(t) = args.template {
        strategy.template = t;
    }
    if args.templates_dir.is_some() {
        templates_dir = args.templates_dir;
    }
    if args.morphological {
        policy.morphological = true;
    }

    let templates = match &templates_dir {
        Some(dir) => TemplateSet::with_dir(dir).map_err(Failure::config)?,
        None => TemplateSet::builtin(),
    };
    let tpl = templates.prompt(&strategy.template).map_err(Failure::config)?;
    let rewrite = templates.prompt(DNC_REWRITE).map_err(Failure::config)?;
    let set = KeywordSet::new(&args.keywords, policy).map_err(Failure::config)?;

    if args.dry_run {
        out!("{}", render_prompt(&tpl, &set).map_err(Failure::config)?);
        return Ok(0);
    }

    let backend = backend_cfg.build(None)?;
    let ctx = GenContext::new(&*backend, &backend_cfg.model_id, &backend_cfg.params).with_trial(args.trial);
    let rewriter = Rewriter {
        ctx,
        template: &rewrite,
    };
    match run_strategy(&strategy.spec(), &ctx, &tpl, &set, Some(&rewriter)) {
        Ok(outcome) => {
            out!(
                "{}",
                serde_json::to_string_pretty(&outcome).expect("outcome serializes")
            );
            Ok(if outcome.all_satisfied() { 0 } else { EXIT_UNSATISFIED })
        }
        Err(StrategyError::Backend {
            strategy,
            iteration,
            source,
            trace,
        }) => Err(Failure {
            code: EXIT_BACKEND,
            kind: "backend",
            message: format!("{strategy} aborted at iteration {iteration}: {source}"),
            detail: Some(json!({"trace": trace})),
        }),
        Err(e) => Err(Failure::config(e)),
    }
}

fn cmd_experiment_run(args: RunArgs) -> Result<u8, Failure> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(p) = args.parallelism {
        if p == 0 {
            return Err(Failure::config("--parallelism must be at least 1"));
        }
        cfg.parallelism = p;
    }
    if let Some(dir) = args.output_dir {
        cfg.output_dir = dir;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let experiment = cfg.require_experiment()?.clone();

    let cancel = Arc::new(AtomicBool::new(false));
    let flag = cancel.clone();
    if let Err(e) = ctrlc::set_handler(move || {
        if !flag.swap(true, Ordering::SeqCst) {
            eprintln!("interrupt received; finishing in-flight trials");
        }
    }) {
        warn!("cannot install interrupt handler: {e}");
    }
    let options = RunOptions {
        max_trials: args.max_trials,
        cancel: cancel.clone(),
        dry_run: args.dry_run,
    };
    let ctx = ExperimentContext::from_config(&cfg, options)?;
    let report = run_experiment(&ctx, &experiment)?;

    if args.dry_run {
        for (i, prompt) in &report.dry_run_prompts {
            out!("# trial {i}\n{prompt}\n");
        }
        return Ok(0);
    }
    if args.json {
        out!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    } else {
        print_report(&report);
    }
    if cancel.load(Ordering::SeqCst) && !report.is_complete() {
        eprintln!(
            "interrupted with {} trials remaining; rerun the same command to resume",
            report.run.remaining
        );
        return Ok(EXIT_INTERRUPTED);
    }
    Ok(0)
}

fn print_report(report: &ExperimentReport) {
    let run = &report.run;
    out!(
        "{} ({}): {} planned, {} already done, {} executed, {} remaining",
        report.experiment_id,
        report.name,
        run.planned,
        run.skipped,
        run.executed,
        run.remaining
    );
    out!("");
    out!(
        "{:<24} {:>8} {:>9} {:>9} {:>19}",
        "group",
        "trials",
        "success",
        "coverage",
        "95% CI (success)"
    );
    for g in &report.groups {
        let s = &g.summary;
        out!(
            "{:<24} {:>8} {:>9.4} {:>9.4}    [{:.4}, {:.4}]",
            g.group,
            s.n_trials,
            s.mean_instance_success,
            s.mean_keyword_coverage,
            s.ci_low,
            s.ci_high
        );
    }
    match &report.details {
        ReportDetails::Groups => {}
        ReportDetails::PositionBias { trends } => {
            out!("");
            for t in trends {
                let cov: Vec<String> = t.coverage.iter().map(|c| format!("{c:.3}")).collect();
                out!(
                    "{}: slope {:+.5} (p = {:.4}) coverage by position [{}]",
                    t.group,
                    t.slope,
                    t.p_value,
                    cov.join(", ")
                );
            }
        }
        ReportDetails::Compound(s) => {
            out!("");
            out!(
                "compound coverage {:.4} ({} occurrences), control coverage {:.4} ({} occurrences)",
                s.compound.coverage,
                s.compound.occurrences,
                s.control.coverage,
                s.control.occurrences
            );
            out!(
                "split rate {:.4} of all compounds, {:.4} of unsatisfied compounds",
                s.split_rate,
                s.split_rate_among_unsatisfied
            );
        }
        ReportDetails::DecodingSweep { axes } => {
            out!("");
            for a in axes {
                out!(
                    "{}: {} cells, mean coverage {:.4}, spread {:.4}, max |z| {:.2}",
                    a.parameter,
                    a.cells.len(),
                    a.grand_mean,
                    a.spread,
                    a.max_abs_z
                );
            }
        }
        ReportDetails::StrategyComparison { curve } => {
            out!("");
            out!("{:<10} {:>3} {:>8} {:>10}", "strategy", "K", "trials", "error");
            for c in curve {
                out!(
                    "{:<10} {:>3} {:>8} {:>10.4}",
                    c.strategy.to_string(),
                    c.k,
                    c.n_trials,
                    c.error_rate
                );
            }
        }
    }
    out!("");
    for p in &report.outputs {
        out!("wrote {}", p.display());
    }
}

fn cmd_eval(file: &Path, output: Option<&Path>) -> Result<u8, Failure> {
    let records = read_records(file)?;
    let mut out: Option<File> = match output {
        Some(p) => Some(File::create(p).map_err(|e| Failure::config(format!("{}: {e}", p.display())))?),
        None => None,
    };
    let mut mismatches = 0usize;
    for r in &records {
        let res = rescore_record(r)?;
        if !res.matches {
            mismatches += 1;
            eprintln!(
                "mismatch: {} trial {}: stored coverage {:.4}, recomputed {:.4}",
                res.experiment_id, res.trial_index, r.metrics.keyword_coverage, res.recomputed.keyword_coverage
            );
        }
        if let Some(f) = out.as_mut() {
            let line = serde_json::to_string(&res).expect("result serializes");
            writeln!(f, "{line}").map_err(Failure::config)?;
        }
    }
    let groups = summarize(&records)?;
    write_summary(io::stdout().lock(), &groups).map_err(Failure::config)?;
    eprintln!("{} records re-scored, {} mismatches", records.len(), mismatches);
    Ok(if mismatches == 0 { 0 } else { EXIT_UNSATISFIED })
}

fn cmd_report(files: &[PathBuf], output: Option<&Path>) -> Result<u8, Failure> {
    let mut records = Vec::new();
    for f in files {
        records.extend(read_records(f)?);
    }
    let groups = summarize(&records)?;
    match output {
        Some(p) => {
            let f = File::create(p).map_err(|e| Failure::config(format!("{}: {e}", p.display())))?;
            write_summary(f, &groups).map_err(Failure::config)?;
        }
        None => write_summary(io::stdout().lock(), &groups).map_err(Failure::config)?,
    }
    Ok(0)
}

fn cmd_templates_list(dir: Option<&Path>) -> Result<u8, Failure> {
    let set = match dir {
        Some(d) => TemplateSet::with_dir(d).map_err(Failure::config)?,
        None => TemplateSet::builtin(),
    };
    out!(
        "{:<16} {:<8} {:>8}  {:<28} first line",
        "name",
        "joiner",
        "examples",
        "source"
    );
    for e in set.entries() {
        let source = e
            .path
            .as_ref()
            .map(|p| p.display().to_string())
            .unwrap_or_else(|| "builtin".into());
        let first = e.body.lines().find(|l| !l.trim().is_empty()).unwrap_or("");
        let first: String = first.chars().take(60).collect();
        out!(
            "{:<16} {:<8} {:>8}  {:<28} {}",
            e.name,
            format!("{:?}", e.joiner),
            e.examples.len(),
            source,
            first
        );
    }
    Ok(0)
}
