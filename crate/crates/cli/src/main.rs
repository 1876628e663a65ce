use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::Ordering;
use std::time::Duration;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use cocot_core::chat::ResponseCache;
use cocot_core::datasets::{self, MergeMap};
use cocot_core::metrics::{render_report, ReportFormat};
use cocot_core::run::{self, RunConfig, RunControl, RunError};
use serde_json::{Map, Value};

/// Multi-image prompting evaluation harness.
#[derive(Parser)]
#[command(name = "cocot", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run strategies over a dataset and write a run directory.
    Run(Box<RunArgs>),
    /// Aggregate run directories into report.md, report.json and report.csv.
    Report(ReportArgs),
    /// Check manifests and print row counts and error locations.
    Validate(ValidateArgs),
    /// Inspect or prune the response cache.
    #[command(subcommand)]
    Cache(CacheCommand),
}

#[derive(Args)]
struct RunArgs {
    /// JSON file with run settings; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// winoground, raven50 or factify_v.
    #[arg(long)]
    dataset: Option<String>,
    /// JSONL manifest for the dataset.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Comma-separated strategies: standard, cocot, cocot_sim, cocot_diff, ddcot, ccot.
    #[arg(long, value_delimiter = ',')]
    strategy: Vec<String>,
    /// single_call or two_stage, for the contrastive strategies.
    #[arg(long)]
    cocot_mode: Option<String>,
    /// Backend config file (one descriptor or an array).
    #[arg(long)]
    backend: Option<PathBuf>,
    /// logit, choice or auto (Raven only).
    #[arg(long)]
    raven_mode: Option<String>,
    /// Use the choice protocol when a logit run meets a generate-only backend.
    #[arg(long)]
    fallback_choice: bool,
    /// Seed for option-order randomization.
    #[arg(long)]
    seed: Option<u64>,
    /// Trials evaluated in parallel.
    #[arg(long)]
    concurrency: Option<usize>,
    /// Response cache directory (default .cocot-cache).
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    /// Bypass the response cache.
    #[arg(long)]
    no_cache: bool,
    /// Parent directory of run directories.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Evaluate only the first N instances.
    #[arg(long)]
    limit: Option<usize>,
    /// Run directory name; defaults to a hash of the resolved configuration.
    #[arg(long)]
    run_id: Option<String>,
    /// Present options in their natural order.
    #[arg(long)]
    fixed_order: bool,
    /// Continuation scored in the Raven logit protocol.
    #[arg(long)]
    continuation: Option<String>,
    /// Directory of `<strategy>.<stage>.txt` files overriding shipped templates.
    #[arg(long)]
    template_dir: Option<PathBuf>,
    /// JSON map from the five Factify categories to support, refute or excluded.
    #[arg(long)]
    factify_merge_map: Option<PathBuf>,
    /// Sample 100 pairs per category from a full test manifest with this seed.
    #[arg(long)]
    factify_sample: Option<u64>,
    /// Generation preset: default, gemini, openflamingo, mmicl.
    #[arg(long)]
    preset: Option<String>,
    /// Sampling temperature.
    #[arg(long)]
    temperature: Option<f64>,
    /// Nucleus sampling mass.
    #[arg(long)]
    top_p: Option<f64>,
    /// Top-k sampling cutoff.
    #[arg(long)]
    top_k: Option<u32>,
    /// Maximum tokens generated per call.
    #[arg(long)]
    max_tokens: Option<u32>,
    /// Beam width, for backends that support beam search.
    #[arg(long)]
    beam_width: Option<u32>,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Markdown,
    Json,
    Csv,
    All,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directories to include.
    #[arg(required = true)]
    runs: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "all")]
    format: FormatArg,
    /// Where report files are written.
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct ValidateArgs {
    /// Winoground manifest.
    #[arg(long)]
    winoground: Option<PathBuf>,
    /// Raven manifest.
    #[arg(long)]
    raven: Option<PathBuf>,
    /// Factify manifest.
    #[arg(long)]
    factify: Option<PathBuf>,
    /// Merge map applied when checking Factify labels.
    #[arg(long)]
    factify_merge_map: Option<PathBuf>,
}

#[derive(Subcommand)]
enum CacheCommand {
    /// Print entry counts and size.
    Stats {
        /// Response cache directory.
        #[arg(long, default_value = ".cocot-cache")]
        cache_dir: PathBuf,
    },
    /// Remove corrupt entries, leftover temp files and, optionally, old entries.
    Gc {
        /// Response cache directory.
        #[arg(long, default_value = ".cocot-cache")]
        cache_dir: PathBuf,
        /// Also remove entries older than this many days.
        #[arg(long)]
        max_age_days: Option<u64>,
    },
}

/// Error carrying a specific process exit code.
#[derive(Debug)]
struct Exit(i32, String);

impl std::fmt::Display for Exit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.1)
    }
}

impl std::error::Error for Exit {}

fn config_error(msg: impl Into<String>) -> anyhow::Error {
    Exit(2, msg.into()).into()
}

const PATH_KEYS: [&str; 6] = ["manifest", "backend", "cache_dir", "out_dir", "template_dir", "factify_merge_map"];

/// Reads a config file, resolving its relative paths against the file's directory.
fn read_config_file(path: &Path) -> Result<Map<String, Value>> {
    let text = std::fs::read_to_string(path).map_err(|e| config_error(format!("{}: {e}", path.display())))?;
    let Value::Object(mut obj) = serde_json::from_str(&text).map_err(|e| config_error(format!("{}: {e}", path.display())))? else {
        return Err(config_error(format!("{}: expected a JSON object", path.display())));
    };
    let base = path.parent().unwrap_or(Path::new("."));
    for key in PATH_KEYS {
        if let Some(Value::String(s)) = obj.get(key) {
            let p = Path::new(s);
            if p.is_relative() {
                obj.insert(key.into(), Value::String(base.join(p).display().to_string()));
            }
        }
    }
    Ok(obj)
}

/// Layers flags over the config file and deserializes the result.
fn resolve_run_config(args: &RunArgs) -> Result<RunConfig> {
    let mut obj = match &args.config {
        Some(p) => read_config_file(p)?,
        None => Map::new(),
    };
    let mut set = |k: &str, v: Value| {
        obj.insert(k.to_string(), v);
    };
    let path = |p: &PathBuf| Value::String(p.display().to_string());
    if let Some(v) = &args.dataset {
        set("dataset", v.as_str().into());
    }
    if let Some(v) = &args.manifest {
        set("manifest", path(v));
    }
    if !args.strategy.is_empty() {
        set("strategies", args.strategy.iter().map(|s| Value::String(s.trim().to_string())).collect());
    }
    if let Some(v) = &args.cocot_mode {
        set("cocot_mode", v.as_str().into());
    }
    if let Some(v) = &args.backend {
        set("backend", path(v));
    }
    if let Some(v) = &args.raven_mode {
        set("raven_mode", v.as_str().into());
    }
    if args.fallback_choice {
        set("fallback_choice", true.into());
    }
    if let Some(v) = args.seed {
        set("seed", v.into());
    }
    if let Some(v) = args.concurrency {
        set("concurrency", v.into());
    }
    if let Some(v) = &args.cache_dir {
        set("cache_dir", path(v));
    }
    if args.no_cache {
        set("no_cache", true.into());
    }
    if let Some(v) = &args.out_dir {
        set("out_dir", path(v));
    }
    if let Some(v) = args.limit {
        set("limit", v.into());
    }
    if let Some(v) = &args.run_id {
        set("run_id", v.as_str().into());
    }
    if args.fixed_order {
        set("fixed_order", true.into());
    }
    if let Some(v) = &args.continuation {
        set("continuation", v.as_str().into());
    }
    if let Some(v) = &args.template_dir {
        set("template_dir", path(v));
    }
    if let Some(v) = &args.factify_merge_map {
        set("factify_merge_map", path(v));
    }
    if let Some(v) = args.factify_sample {
        set("factify_sample", v.into());
    }
    if let Some(v) = &args.preset {
        set("preset", v.as_str().into());
    }
    let mut params = match obj.remove("params") {
        Some(Value::Object(m)) => m,
        Some(_) => return Err(config_error("params must be an object")),
        None => Map::new(),
    };
    let flags = [
        ("temperature", args.temperature.map(Value::from)),
        ("top_p", args.top_p.map(Value::from)),
        ("top_k", args.top_k.map(Value::from)),
        ("max_tokens", args.max_tokens.map(Value::from)),
        ("beam_width", args.beam_width.map(Value::from)),
    ];
    for (k, v) in flags {
        if let Some(v) = v {
            params.insert(k.into(), v);
        }
    }
    obj.insert("params".into(), Value::Object(params));
    serde_json::from_value(Value::Object(obj)).map_err(|e| config_error(format!("run configuration: {e}")))
}

fn cmd_run(args: &RunArgs) -> Result<i32> {
    let config = resolve_run_config(args)?;
    let control = RunControl::default();
    let flag = control.cancel.clone();
    ctrlc::set_handler(move || {
        if flag.swap(true, Ordering::SeqCst) {
            std::process::exit(130);
        }
        eprintln!("interrupt received; finishing in-flight trials (press again to abort)");
    })
    .context("installing the interrupt handler")?;
    let outcome = run::run(&config, &control).map_err(|e: RunError| anyhow::Error::from(Exit(e.exit_code(), e.to_string())))?;
    if outcome.cancelled {
        eprintln!(
            "run {} interrupted after {} records; re-run the same command to resume",
            outcome.run_id,
            outcome.records.len()
        );
        return Ok(130);
    }
    tracing::info!(
        run_id = %outcome.run_id,
        records = outcome.records.len(),
        resumed = outcome.resumed,
        failed = outcome.failed,
        transport_calls = outcome.transport_calls,
        "run complete"
    );
    print!("{}", render_report(&outcome.summaries, ReportFormat::Markdown));
    println!("\nrun directory: {}", outcome.run_dir.display());
    Ok(0)
}

fn cmd_report(args: &ReportArgs) -> Result<i32> {
    let summaries = run::report_runs(&args.runs).map_err(|e| Exit(e.exit_code(), e.to_string()))?;
    let formats: &[ReportFormat] = match args.format {
        FormatArg::Markdown => &[ReportFormat::Markdown],
        FormatArg::Json => &[ReportFormat::Json],
        FormatArg::Csv => &[ReportFormat::Csv],
        FormatArg::All => &[ReportFormat::Markdown, ReportFormat::Json, ReportFormat::Csv],
    };
    std::fs::create_dir_all(&args.out_dir).with_context(|| format!("creating {}", args.out_dir.display()))?;
    for &f in formats {
        let path = args.out_dir.join(format!("report.{}", f.extension()));
        std::fs::write(&path, render_report(&summaries, f)).with_context(|| format!("writing {}", path.display()))?;
        eprintln!("wrote {}", path.display());
    }
    print!("{}", render_report(&summaries, ReportFormat::Markdown));
    Ok(0)
}

fn print_report<T>(name: &str, path: &Path, report: Result<datasets::LoadReport<T>, datasets::DatasetError>) -> bool {
    match report {
        Ok(r) => {
            println!("{name} {}: {} rows, {} errors", path.display(), r.rows.len(), r.errors.len());
            for e in &r.errors {
                println!("  {e}");
            }
            r.errors.is_empty()
        }
        Err(e) => {
            println!("{name} {}: {e}", path.display());
            false
        }
    }
}

fn cmd_validate(args: &ValidateArgs) -> Result<i32> {
    if args.winoground.is_none() && args.raven.is_none() && args.factify.is_none() {
        return Err(config_error("nothing to validate: pass --winoground, --raven and/or --factify"));
    }
    let mut ok = true;
    if let Some(p) = &args.winoground {
        ok &= print_report("winoground", p, datasets::validate_winoground(p));
    }
    if let Some(p) = &args.raven {
        ok &= print_report("raven", p, datasets::validate_raven(p));
    }
    if let Some(p) = &args.factify {
        let merge = match &args.factify_merge_map {
            Some(m) => MergeMap::load(m).map_err(|e| config_error(e.to_string()))?,
            None => MergeMap::default(),
        };
        ok &= print_report("factify", p, datasets::validate_factify(p, &merge));
    }
    Ok(if ok { 0 } else { 3 })
}

fn open_cache(dir: &Path) -> Result<ResponseCache> {
    ResponseCache::open(dir).map_err(|e| config_error(e.to_string()))
}

fn cmd_cache(cmd: &CacheCommand) -> Result<i32> {
    match cmd {
        CacheCommand::Stats { cache_dir } => {
            let s = open_cache(cache_dir)?.stats();
            println!("cache {}", cache_dir.display());
            println!("entries: {} ({} generate, {} score)", s.entries, s.generate_entries, s.score_entries);
            println!("corrupt: {}", s.corrupt_entries);
            println!("bytes: {}", s.bytes);
        }
        CacheCommand::Gc { cache_dir, max_age_days } => {
            let age = max_age_days.map(|d| Duration::from_secs(d * 86_400));
            let r = open_cache(cache_dir)?.gc(age).map_err(|e| anyhow::anyhow!(e.to_string()))?;
            println!(
                "removed {} corrupt, {} stale, {} temp; kept {}",
                r.removed_corrupt, r.removed_stale, r.removed_temp, r.kept
            );
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info")),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Report(a) => cmd_report(a),
        Command::Validate(a) => cmd_validate(a),
        Command::Cache(c) => cmd_cache(c),
    };
    match result {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            let code = e.downcast_ref::<Exit>().map_or(1, |x| x.0);
            eprintln!("error: {e:#}");
            ExitCode::from(code as u8)
        }
    }
}
