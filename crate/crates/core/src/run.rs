//! End-to-end runs: configuration, planning, the worker pool, resume, and run-directory files.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{mpsc, Arc};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chat::{sha256_hex, BackendDescriptor, Capability, ChatClient, GenerationParams, ParamsOverride, ResponseCache};
use crate::datasets::{self, DatasetError, MergeMap};
use crate::evaluator::{eval_trial, Dataset, Instance, Protocol, RunRecord, Subtrial, TrialKey, TrialOptions, DEFAULT_CONTINUATION};
use crate::metrics::{self, MetricsSummary};
use crate::strategies::{load_strategies, CocotMode, Strategy, StrategyId};

#[derive(Debug, Error)]
pub enum RunError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("backend {backend} unhealthy: {reason}")]
    BackendUnhealthy { backend: String, reason: String },
    #[error("I/O error: {0}")]
    Io(String),
}

impl RunError {
    /// Process exit code for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) | RunError::Io(_) => 2,
            RunError::Manifest(_) => 3,
            RunError::BackendUnhealthy { .. } => 4,
        }
    }
}

fn io(path: &Path, e: impl std::fmt::Display) -> RunError {
    RunError::Io(format!("{}: {e}", path.display()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RavenMode {
    Logit,
    Choice,
    #[default]
    Auto,
}

impl std::str::FromStr for RavenMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "logit" => Ok(RavenMode::Logit),
            "choice" => Ok(RavenMode::Choice),
            "auto" => Ok(RavenMode::Auto),
            _ => Err(format!("unknown raven mode {s:?} (expected logit, choice, auto)")),
        }
    }
}

fn default_concurrency() -> usize {
    4
}

fn default_cache_dir() -> PathBuf {
    PathBuf::from(".cocot-cache")
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs")
}

fn default_continuation() -> String {
    DEFAULT_CONTINUATION.into()
}

/// Fully resolved run settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: Dataset,
    pub manifest: PathBuf,
    pub strategies: Vec<StrategyId>,
    #[serde(default)]
    pub cocot_mode: CocotMode,
    /// Backend config file: one descriptor object or an array of them.
    pub backend: PathBuf,
    #[serde(default)]
    pub raven_mode: RavenMode,
    #[serde(default)]
    pub fallback_choice: bool,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
    #[serde(default = "default_cache_dir")]
    pub cache_dir: PathBuf,
    #[serde(default)]
    pub no_cache: bool,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub limit: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_id: Option<String>,
    #[serde(default)]
    pub fixed_order: bool,
    #[serde(default = "default_continuation")]
    pub continuation: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub factify_merge_map: Option<PathBuf>,
    /// Draw the balanced 500-pair subset from a full test manifest with this seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub factify_sample: Option<u64>,
    /// Generation-parameter preset layered over each backend's own params.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    /// Explicit parameter overrides, applied after the preset.
    #[serde(default)]
    pub params: ParamsOverride,
}

impl RunConfig {
    pub fn new(dataset: Dataset, manifest: impl Into<PathBuf>, strategies: Vec<StrategyId>, backend: impl Into<PathBuf>) -> Self {
        Self {
            dataset,
            manifest: manifest.into(),
            strategies,
            cocot_mode: CocotMode::default(),
            backend: backend.into(),
            raven_mode: RavenMode::default(),
            fallback_choice: false,
            seed: 0,
            concurrency: default_concurrency(),
            cache_dir: default_cache_dir(),
            no_cache: false,
            out_dir: default_out_dir(),
            limit: None,
            run_id: None,
            fixed_order: false,
            continuation: default_continuation(),
            template_dir: None,
            factify_merge_map: None,
            factify_sample: None,
            preset: None,
            params: ParamsOverride::default(),
        }
    }

    pub fn validate(&self) -> Result<(), RunError> {
        let bad = |m: &str| Err(RunError::Config(m.to_string()));
        if self.concurrency == 0 {
            return bad("concurrency must be >= 1");
        }
        if self.strategies.is_empty() {
            return bad("at least one strategy is required");
        }
        if self.limit == Some(0) {
            return bad("limit must be >= 1");
        }
        if self.continuation.trim().is_empty() {
            return bad("continuation must be non-empty");
        }
        if let Some(p) = &self.preset {
            if GenerationParams::preset(p).is_none() {
                return Err(RunError::Config(format!(
                    "unknown preset {p:?} (expected one of {})",
                    GenerationParams::preset_names().join(", ")
                )));
            }
        }
        if self.factify_sample.is_some() && self.dataset != Dataset::FactifyV {
            return bad("factify_sample applies only to factify_v");
        }
        if let Some(id) = &self.run_id {
            if id.is_empty() || id.contains(['/', '\\']) || id.starts_with('.') {
                return bad("run_id must be a plain directory name");
            }
        }
        Ok(())
    }
}

/// Reads a backend file holding one descriptor object or an array of them.
pub fn load_backends(path: &Path) -> Result<Vec<BackendDescriptor>, RunError> {
    let text = fs::read_to_string(path).map_err(|e| RunError::Config(format!("{}: {e}", path.display())))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| RunError::Config(format!("{}: {e}", path.display())))?;
    let list = match value {
        serde_json::Value::Array(items) => items,
        other => vec![other],
    };
    let mut out: Vec<BackendDescriptor> = Vec::with_capacity(list.len());
    for v in list {
        let d: BackendDescriptor =
            serde_json::from_value(v).map_err(|e| RunError::Config(format!("{}: {e}", path.display())))?;
        d.validate().map_err(|e| RunError::Config(e.to_string()))?;
        if out.iter().any(|o| o.id == d.id) {
            return Err(RunError::Config(format!("duplicate backend id {:?}", d.id)));
        }
        out.push(d);
    }
    if out.is_empty() {
        return Err(RunError::Config(format!("{}: no backends defined", path.display())));
    }
    Ok(out)
}

/// Loads the instances a config asks for, applying sampling and the limit.
pub fn load_instances(config: &RunConfig) -> Result<Vec<Instance>, RunError> {
    let manifest_err = |e: DatasetError| RunError::Manifest(e.to_string());
    fn first_errors<T>(r: datasets::LoadReport<T>) -> Result<Vec<T>, RunError> {
        if r.errors.is_empty() {
            return Ok(r.rows);
        }
        let shown: Vec<String> = r.errors.iter().take(5).map(ToString::to_string).collect();
        let more = r.errors.len().saturating_sub(5);
        let tail = if more > 0 { format!(" (and {more} more)") } else { String::new() };
        Err(RunError::Manifest(format!("{}{tail}", shown.join("; "))))
    }
    let path = &config.manifest;
    let mut instances: Vec<Instance> = match config.dataset {
        Dataset::Winoground => first_errors(datasets::validate_winoground(path).map_err(manifest_err)?)?
            .into_iter()
            .map(Instance::Winoground)
            .collect(),
        Dataset::Raven50 => first_errors(datasets::validate_raven(path).map_err(manifest_err)?)?
            .into_iter()
            .map(Instance::Raven)
            .collect(),
        Dataset::FactifyV => {
            let merge = match &config.factify_merge_map {
                Some(p) => MergeMap::load(p).map_err(|e| RunError::Config(e.to_string()))?,
                None => MergeMap::default(),
            };
            let mut pairs = first_errors(datasets::validate_factify(path, &merge).map_err(manifest_err)?)?;
            if let Some(seed) = config.factify_sample {
                pairs = datasets::sample_factify_v(&pairs, seed).map_err(manifest_err)?;
            }
            pairs.into_iter().map(Instance::Factify).collect()
        }
    };
    if let Some(limit) = config.limit {
        if limit > instances.len() {
            return Err(RunError::Config(format!("limit {limit} exceeds dataset size {}", instances.len())));
        }
        instances.truncate(limit);
    }
    Ok(instances)
}

/// Chooses the Raven protocol for one backend.
pub fn raven_protocol(mode: RavenMode, backend: &BackendDescriptor, fallback_choice: bool) -> Result<Protocol, RunError> {
    let can_score = backend.has(Capability::Score);
    match mode {
        RavenMode::Choice => Ok(Protocol::Choice),
        RavenMode::Auto => Ok(if can_score { Protocol::Logit } else { Protocol::Choice }),
        RavenMode::Logit if can_score => Ok(Protocol::Logit),
        RavenMode::Logit if fallback_choice => {
            tracing::warn!(backend = %backend.id, "backend cannot score; falling back to the choice protocol");
            Ok(Protocol::Choice)
        }
        RavenMode::Logit => Err(RunError::Config(format!(
            "raven_mode logit needs a score-capable backend; {} is generate-only (use --fallback-choice)",
            backend.id
        ))),
    }
}

/// Layers preset and explicit overrides over a backend's own parameters.
pub fn resolve_params(config: &RunConfig, backend: &mut BackendDescriptor) -> Result<(), RunError> {
    if let Some(p) = config.preset.as_deref().and_then(GenerationParams::preset) {
        backend.params.apply(&p);
    }
    backend.params.apply(&config.params);
    backend.params.validate().map_err(|e| RunError::Config(format!("backend {}: {e}", backend.id)))
}

/// Stop requests observed by a running [`run`].
#[derive(Debug, Clone, Default)]
pub struct RunControl {
    /// Set to stop dispatching new trials; in-flight trials finish and are recorded.
    pub cancel: Arc<AtomicBool>,
    /// Cancel once this many records have been appended (used to rehearse interruptions).
    pub stop_after: Option<usize>,
}

#[derive(Debug)]
pub struct RunOutcome {
    pub run_id: String,
    pub run_dir: PathBuf,
    /// Final records in canonical order (partial when cancelled).
    pub records: Vec<RunRecord>,
    pub summaries: Vec<MetricsSummary>,
    /// Transport attempts issued by this invocation, cache hits excluded.
    pub transport_calls: u64,
    /// Trials taken from an earlier invocation's records.
    pub resumed: usize,
    pub failed: usize,
    pub cancelled: bool,
}

/// What identifies a run: everything that can change a record.
#[derive(Debug, Serialize)]
struct ResolvedConfig<'a> {
    config: &'a RunConfig,
    manifest_sha256: String,
    backends: &'a [BackendDescriptor],
    protocols: BTreeMap<&'a str, Protocol>,
    template_versions: BTreeMap<&'a str, &'a str>,
}

fn run_id_for(resolved: &ResolvedConfig<'_>) -> String {
    let mut v = serde_json::to_value(resolved).expect("config serializes");
    if let Some(c) = v.get_mut("config").and_then(|c| c.as_object_mut()) {
        for k in ["concurrency", "out_dir", "cache_dir", "no_cache", "run_id"] {
            c.remove(k);
        }
    }
    sha256_hex(v.to_string().as_bytes())[..12].to_string()
}

#[derive(Debug, Clone, Copy)]
struct Job {
    backend: usize,
    strategy: usize,
    instance: usize,
    subtrial: Option<Subtrial>,
}

/// Reads records from a run file, skipping a torn or corrupt line rather than failing.
pub fn read_records(path: &Path) -> Result<(Vec<RunRecord>, usize), RunError> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok((Vec::new(), 0)),
        Err(e) => return Err(io(path, e)),
    };
    let mut out = Vec::new();
    let mut skipped = 0;
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        match serde_json::from_str::<RunRecord>(line) {
            Ok(r) => out.push(r),
            Err(_) => skipped += 1,
        }
    }
    if skipped > 0 {
        tracing::warn!(file = %path.display(), skipped, "skipped unreadable record lines");
    }
    Ok((out, skipped))
}

/// Records of a finished run directory.
pub fn load_run_records(run_dir: &Path) -> Result<Vec<RunRecord>, RunError> {
    let path = run_dir.join("records.jsonl");
    if !path.is_file() {
        return Err(RunError::Config(format!("{} has no records.jsonl", run_dir.display())));
    }
    Ok(read_records(&path)?.0)
}

fn write_json_atomic(path: &Path, value: &impl Serialize) -> Result<(), RunError> {
    let text = serde_json::to_string_pretty(value).expect("serializes") + "\n";
    write_atomic(path, text.as_bytes())
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), RunError> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| io(path, e))?;
    tmp.persist(path).map_err(|e| io(path, e.error))?;
    Ok(())
}

struct Pool<'a> {
    clients: &'a [ChatClient],
    strategies: &'a [Strategy],
    instances: &'a [Instance],
    protocols: &'a [Protocol],
    opts: &'a TrialOptions,
    concurrency: usize,
}

impl Pool<'_> {
    /// Evaluates `jobs` on worker threads, handing each record to `sink` on the calling thread.
    fn execute(&self, jobs: &[(usize, Job)], cancel: &AtomicBool, mut sink: impl FnMut(usize, RunRecord)) {
        let next = AtomicUsize::new(0);
        // Rendezvous handoff: workers cannot run ahead of the appender, so a stop
        // request leaves at most `concurrency` trials in flight.
        let (tx, rx) = mpsc::sync_channel::<(usize, RunRecord)>(0);
        std::thread::scope(|s| {
            for _ in 0..self.concurrency.min(jobs.len().max(1)) {
                let tx = tx.clone();
                let next = &next;
                s.spawn(move || loop {
                    if cancel.load(Ordering::SeqCst) {
                        break;
                    }
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    let Some(&(slot, job)) = jobs.get(i) else { break };
                    let rec = eval_trial(
                        &self.clients[job.backend],
                        &self.strategies[job.strategy],
                        &self.instances[job.instance],
                        job.subtrial,
                        self.protocols[job.backend],
                        self.opts,
                    );
                    if tx.send((slot, rec)).is_err() {
                        break;
                    }
                });
            }
            drop(tx);
            for (slot, rec) in rx {
                sink(slot, rec);
            }
        });
    }
}

/// Executes (or resumes) a run and writes `records.jsonl`, `config.json` and `summary.json`.
pub fn run(config: &RunConfig, control: &RunControl) -> Result<RunOutcome, RunError> {
    config.validate()?;
    let mut backends = load_backends(&config.backend)?;
    for b in &mut backends {
        resolve_params(config, b)?;
    }
    let strategies: Vec<Strategy> = load_strategies(&config.strategies, config.cocot_mode, config.template_dir.as_deref())
        .map_err(|e| RunError::Config(e.to_string()))
        .map(|m| {
            // keep the order the strategies were requested in
            config
                .strategies
                .iter()
                .map(|id| m.values().find(|s| s.id == *id).expect("loaded").clone())
                .collect()
        })?;
    let protocols: Vec<Protocol> = backends
        .iter()
        .map(|b| match config.dataset {
            Dataset::Raven50 => raven_protocol(config.raven_mode, b, config.fallback_choice),
            _ => Ok(Protocol::Choice),
        })
        .collect::<Result<_, _>>()?;
    for (b, p) in backends.iter().zip(&protocols) {
        let need = match p {
            Protocol::Choice => Capability::Generate,
            Protocol::Logit => Capability::Score,
        };
        let needs_generate = strategies.iter().any(|s| s.stages.len() > 1) || *p == Protocol::Choice;
        if !b.has(need) || (needs_generate && !b.has(Capability::Generate)) {
            return Err(RunError::Config(format!("backend {} lacks the capabilities this run needs", b.id)));
        }
    }
    let manifest_bytes = fs::read(&config.manifest).map_err(|e| RunError::Manifest(format!("{}: {e}", config.manifest.display())))?;
    let instances = load_instances(config)?;

    let resolved = ResolvedConfig {
        config,
        manifest_sha256: sha256_hex(&manifest_bytes),
        backends: &backends,
        protocols: backends.iter().map(|b| b.id.as_str()).zip(protocols.iter().copied()).collect(),
        template_versions: strategies.iter().map(|s| (s.id.as_str(), s.template_version.as_str())).collect(),
    };
    let run_id = config.run_id.clone().unwrap_or_else(|| run_id_for(&resolved));

    let cache = if config.no_cache {
        None
    } else {
        Some(ResponseCache::open(&config.cache_dir).map_err(|e| RunError::Config(e.to_string()))?)
    };
    let clients: Vec<ChatClient> = backends
        .iter()
        .map(|b| ChatClient::from_descriptor(b.clone(), cache.clone()).map_err(|e| RunError::Config(e.to_string())))
        .collect::<Result<_, _>>()?;
    for c in &clients {
        c.health().map_err(|e| RunError::BackendUnhealthy { backend: c.id().to_string(), reason: e.to_string() })?;
    }

    let run_dir = config.out_dir.join(&run_id);
    fs::create_dir_all(&run_dir).map_err(|e| io(&run_dir, e))?;
    write_json_atomic(&run_dir.join("config.json"), &resolved)?;

    let mut jobs = Vec::new();
    for (bi, _) in backends.iter().enumerate() {
        for (si, _) in strategies.iter().enumerate() {
            for (ii, inst) in instances.iter().enumerate() {
                for sub in inst.subtrials() {
                    jobs.push(Job { backend: bi, strategy: si, instance: ii, subtrial: sub });
                }
            }
        }
    }
    let key_of = |j: &Job| TrialKey {
        backend: backends[j.backend].id.clone(),
        strategy: strategies[j.strategy].key(),
        instance_id: instances[j.instance].id().to_string(),
        subtrial: j.subtrial,
    };
    let slot_of: HashMap<TrialKey, usize> = jobs.iter().enumerate().map(|(i, j)| (key_of(j), i)).collect();

    let records_path = run_dir.join("records.jsonl");
    let mut results: Vec<Option<RunRecord>> = vec![None; jobs.len()];
    for r in read_records(&records_path)?.0 {
        if let Some(&slot) = slot_of.get(&r.trial_key()) {
            if r.error.is_none() && r.template_version == strategies[jobs[slot].strategy].template_version {
                results[slot] = Some(r);
            }
        }
    }
    let resumed = results.iter().filter(|r| r.is_some()).count();
    if resumed > 0 {
        tracing::info!(run_id = %run_id, resumed, total = jobs.len(), "resuming run");
    }

    let opts = TrialOptions { seed: config.seed, fixed_order: config.fixed_order, continuation: config.continuation.clone() };
    let pool = Pool {
        clients: &clients,
        strategies: &strategies,
        instances: &instances,
        protocols: &protocols,
        opts: &opts,
        concurrency: config.concurrency,
    };

    let file = OpenOptions::new().create(true).append(true).open(&records_path).map_err(|e| io(&records_path, e))?;
    let mut out = BufWriter::new(file);
    // A torn final line from an interrupted run must not swallow the next record.
    if fs::metadata(&records_path).map(|m| m.len() > 0).unwrap_or(false) && !ends_with_newline(&records_path) {
        out.write_all(b"\n").map_err(|e| io(&records_path, e))?;
    }
    let mut appended = 0usize;
    let mut write_err: Option<RunError> = None;
    let cancel = &control.cancel;
    let mut append = |slot: usize, rec: RunRecord, results: &mut Vec<Option<RunRecord>>| {
        let line = serde_json::to_string(&rec).expect("record serializes");
        if let Err(e) = writeln!(out, "{line}").and_then(|_| out.flush()) {
            write_err.get_or_insert(io(&records_path, e));
            cancel.store(true, Ordering::SeqCst);
        }
        results[slot] = Some(rec);
        appended += 1;
        if control.stop_after.is_some_and(|n| appended >= n) {
            cancel.store(true, Ordering::SeqCst);
        }
    };

    let pending: Vec<(usize, Job)> = jobs.iter().enumerate().filter(|(i, _)| results[*i].is_none()).map(|(i, j)| (i, *j)).collect();
    pool.execute(&pending, cancel, |slot, rec| append(slot, rec, &mut results));

    if !cancel.load(Ordering::SeqCst) {
        let failed: Vec<(usize, Job)> = jobs
            .iter()
            .enumerate()
            .filter(|(i, _)| results[*i].as_ref().is_some_and(|r| r.error.is_some()))
            .map(|(i, j)| (i, *j))
            .collect();
        if !failed.is_empty() {
            tracing::info!(count = failed.len(), "retrying failed trials once");
            pool.execute(&failed, cancel, |slot, rec| append(slot, rec, &mut results));
        }
    }
    if let Some(e) = write_err {
        return Err(e);
    }

    let cancelled = cancel.load(Ordering::SeqCst) && results.iter().any(Option::is_none);
    let records: Vec<RunRecord> = results.into_iter().flatten().collect();
    let transport_calls = clients.iter().map(ChatClient::transport_calls).sum();
    let failed = records.iter().filter(|r| r.error.is_some()).count();
    if cancelled {
        return Ok(RunOutcome { run_id, run_dir, records, summaries: Vec::new(), transport_calls, resumed, failed, cancelled });
    }

    let mut body = String::new();
    for r in &records {
        body.push_str(&serde_json::to_string(r).expect("record serializes"));
        body.push('\n');
    }
    write_atomic(&records_path, body.as_bytes())?;
    let summaries = metrics::summarize(&records).map_err(|e| RunError::Io(format!("summarizing records: {e}")))?;
    write_json_atomic(&run_dir.join("summary.json"), &summaries)?;
    Ok(RunOutcome { run_id, run_dir, records, summaries, transport_calls, resumed, failed, cancelled })
}

fn ends_with_newline(path: &Path) -> bool {
    use std::io::{Read, Seek, SeekFrom};
    let Ok(mut f) = File::open(path) else { return true };
    if f.seek(SeekFrom::End(-1)).is_err() {
        return true;
    }
    let mut b = [0u8; 1];
    f.read_exact(&mut b).is_ok() && b[0] == b'\n'
}

/// Summaries for the records of several run directories.
pub fn report_runs(run_dirs: &[PathBuf]) -> Result<Vec<MetricsSummary>, RunError> {
    let mut records = Vec::new();
    for d in run_dirs {
        records.extend(load_run_records(d)?);
    }
    metrics::summarize(&records).map_err(|e| RunError::Config(e.to_string()))
}
