//! `praetor`: compile tool-call telemetry into a behavioral profile, enforce
//! it, and audit what it blocked.
//!
//! Exit codes: 0 success, 1 domain failure (broken audit chain, failed
//! compile), 2 usage error. Machine-readable output goes to stdout as JSON;
//! diagnostics go to stderr.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};
use tracing::info;

use praetor_core::audit::{self, AuditLog, ChainRoot, Verification};
use praetor_core::embedding::{Embedder, ReferenceEmbedder, DEFAULT_DIMENSION};
use praetor_core::gateway::{self, Gateway, GatewayConfig, DEFAULT_SESSION_CAPACITY};
use praetor_core::guards::{SensitivePolicy, DEFAULT_CAT_MAX_CARD, DEFAULT_RESERVOIR_CAP};
use praetor_core::harness::{
    bench_throughput, corpus_calls, generate_benign, generate_context_sequential, graybox, run_campaign,
    splice_exfiltration, CampaignMode, GrayboxConfig, Scenario,
};
use praetor_core::profiler::{compile_profile, Compiled, Pdfa, ProfileParams};
use praetor_core::store::{
    digests_path_for, enumerate_paths, load_digests, load_profile, out_degree_stats, save_digests, save_profile,
    DEFAULT_EXPANSION_BUDGET,
};
use praetor_core::trace::{load_corpus_reader, parse_trace_line, Corpus};
use praetor_core::updates::{incremental_recompile, PendingApproval, ReviewQueue};

#[derive(Parser, Debug)]
#[command(name = "praetor", version, about = "Behavioral firewall for tool-calling agents")]
struct Cli {
    /// Log filter for diagnostics on stderr (e.g. "info", "praetor_core=debug").
    #[arg(long, global = true, env = "PRAETOR_LOG", default_value = "warn")]
    log_level: String,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Compile a benign trace corpus into a profile and digest sidecar.
    Compile(CompileArgs),
    /// Print profile statistics.
    Inspect(InspectArgs),
    /// Count realizable length-k tool sequences.
    EnumeratePaths(EnumerateArgs),
    /// Serve decisions over a Unix socket (newline-delimited JSON).
    Serve(ServeArgs),
    /// Replay a trace file against a profile offline.
    Check(CheckArgs),
    /// Verify an audit log's hash chain.
    VerifyAudit(VerifyArgs),
    /// Write the chain root (length and head hash) of an audit log.
    ExportRoot(ExportRootArgs),
    /// Manage the review queue of blocked sequences.
    Review(ReviewArgs),
    /// Apply approved queue items to a profile.
    Update(UpdateArgs),
    /// Run a synthetic benign or attack campaign.
    Simulate(SimulateArgs),
    /// Measure decision latency on synthetic profiles.
    Bench(BenchArgs),
    /// Write a seeded benign corpus for a scenario as JSONL.
    Generate(GenerateArgs),
}

#[derive(Args, Debug)]
struct ProfileFlags {
    /// Context window length.
    #[arg(long, env = "PRAETOR_W", default_value_t = 3)]
    w: usize,
    /// Minimum support for a state to survive pruning.
    #[arg(long, env = "PRAETOR_THETA", default_value_t = 3)]
    theta: u64,
    #[arg(long, env = "PRAETOR_EPS_NUM", default_value_t = 0.05)]
    eps_num: f64,
    #[arg(long, env = "PRAETOR_EPS_STR", default_value_t = 0.05)]
    eps_str: f64,
    /// Largest distinct-value count that still yields a categorical guard.
    #[arg(long, env = "PRAETOR_CAT_MAX_CARD", default_value_t = DEFAULT_CAT_MAX_CARD)]
    cat_max_card: usize,
    /// Glob file of parameter paths that only accept observed values.
    #[arg(long, env = "PRAETOR_SENSITIVE_POLICY")]
    sensitive_policy: Option<PathBuf>,
    #[arg(long, env = "PRAETOR_RESERVOIR_CAP", default_value_t = DEFAULT_RESERVOIR_CAP)]
    reservoir_cap: usize,
    /// Dimension of the reference text embedder.
    #[arg(long, env = "PRAETOR_EMBEDDING_DIM", default_value_t = DEFAULT_DIMENSION)]
    embedding_dim: usize,
}

impl ProfileFlags {
    fn params(&self, fallback_policy: Option<SensitivePolicy>) -> Result<ProfileParams> {
        let sensitive = match &self.sensitive_policy {
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                SensitivePolicy::parse(&text).with_context(|| format!("parsing {}", p.display()))?
            }
            None => fallback_policy.unwrap_or_default(),
        };
        Ok(ProfileParams {
            w: self.w,
            theta: self.theta,
            eps_num: self.eps_num,
            eps_str: self.eps_str,
            cat_max_card: self.cat_max_card,
            sensitive,
            reservoir_cap: self.reservoir_cap,
            embedding_dim: self.embedding_dim,
        })
    }
}

#[derive(Args, Debug)]
struct CompileArgs {
    /// Benign traces, one JSON tool call per line.
    #[arg(long, env = "PRAETOR_TRACES")]
    traces: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Digest sidecar path. Defaults to `<out>.digests`.
    #[arg(long)]
    digests: Option<PathBuf>,
    #[command(flatten)]
    profile: ProfileFlags,
}

#[derive(Args, Debug)]
struct InspectArgs {
    profile: PathBuf,
    /// Tools whose contexts are reported separately in the out-degree stats.
    #[arg(long, value_delimiter = ',')]
    high_value: Vec<String>,
    /// Also list every transition with its guard kinds.
    #[arg(long)]
    edges: bool,
}

#[derive(Args, Debug)]
struct EnumerateArgs {
    profile: PathBuf,
    #[arg(long, default_value_t = 5)]
    k: usize,
    /// Also count sequences ending in this tool.
    #[arg(long)]
    target: Option<String>,
    /// Search nodes to expand before giving up.
    #[arg(long, default_value_t = DEFAULT_EXPANSION_BUDGET)]
    budget: u64,
}

#[derive(Args, Debug)]
struct ServeArgs {
    #[arg(long, env = "PRAETOR_PROFILE")]
    profile: PathBuf,
    #[arg(long, env = "PRAETOR_SOCKET")]
    socket: PathBuf,
    #[arg(long, env = "PRAETOR_AUDIT")]
    audit: PathBuf,
    #[arg(long, env = "PRAETOR_SESSION_TTL_SECS", default_value_t = 1800)]
    session_ttl_secs: u64,
    #[arg(long, env = "PRAETOR_SESSION_CAPACITY", default_value_t = DEFAULT_SESSION_CAPACITY)]
    session_capacity: usize,
    /// How often idle sessions are swept.
    #[arg(long, default_value_t = 60)]
    sweep_secs: u64,
    /// Chain-root file rewritten every `--root-interval-secs`.
    #[arg(long, env = "PRAETOR_ROOT_FILE")]
    root_file: Option<PathBuf>,
    #[arg(long, env = "PRAETOR_ROOT_INTERVAL_SECS", requires = "root_file")]
    root_interval_secs: Option<u64>,
}

#[derive(Args, Debug)]
struct CheckArgs {
    #[arg(long, env = "PRAETOR_PROFILE")]
    profile: PathBuf,
    #[arg(long)]
    traces: PathBuf,
    /// Append blocked calls to this audit log instead of discarding them.
    #[arg(long, env = "PRAETOR_AUDIT")]
    audit: Option<PathBuf>,
    /// Print only the summary.
    #[arg(long)]
    summary_only: bool,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    log: PathBuf,
    /// Also require the log to extend this previously exported root.
    #[arg(long)]
    root: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ExportRootArgs {
    log: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ReviewArgs {
    #[arg(long, env = "PRAETOR_QUEUE")]
    queue: PathBuf,
    #[command(subcommand)]
    action: ReviewAction,
}

#[derive(Subcommand, Debug)]
enum ReviewAction {
    /// List queue items.
    List {
        /// Show only pending items.
        #[arg(long)]
        pending: bool,
    },
    Approve {
        id: u64,
        #[arg(long, default_value = "")]
        note: String,
    },
    Reject {
        id: u64,
        #[arg(long, default_value = "")]
        note: String,
    },
    /// Add a fragment (JSONL tool calls of one session) for review.
    Enqueue {
        #[arg(long)]
        fragment: PathBuf,
        /// Audit index of the block that prompted this item.
        #[arg(long)]
        blocked_index: Option<u64>,
    },
}

#[derive(Args, Debug)]
struct UpdateArgs {
    #[arg(long, env = "PRAETOR_PROFILE")]
    profile: PathBuf,
    /// Digest sidecar. Defaults to `<profile>.digests`.
    #[arg(long)]
    digests: Option<PathBuf>,
    #[arg(long, env = "PRAETOR_QUEUE")]
    queue: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Mode {
    Benign,
    ContextSeq,
    Splice,
    Graybox,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// Built-in scenario name or path to a scenario JSON file.
    #[arg(long, default_value = "customer-service")]
    scenario: String,
    #[arg(long, value_enum)]
    mode: Mode,
    /// Traces to run (attacks, or held-out benign traces).
    #[arg(long, default_value_t = 200)]
    n: usize,
    #[arg(long, env = "PRAETOR_SEED", default_value_t = 0)]
    seed: u64,
    /// Enforce this profile instead of compiling one from the training
    /// sample. Splice attacks still draw from the generated sample.
    #[arg(long)]
    profile: Option<PathBuf>,
    /// Benign training traces generated for the defender.
    #[arg(long, default_value_t = 400)]
    train: usize,
    /// Corpus fractions known to the gray-box adversary.
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.5,0.9")]
    k: Vec<f64>,
    #[arg(long, default_value_t = 10_000)]
    query_budget: u64,
    #[command(flatten)]
    profile_flags: ProfileFlags,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_value = "10,100,1000,10000")]
    sizes: Vec<usize>,
    #[arg(long, default_value_t = 100_000)]
    calls: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long, default_value = "customer-service")]
    scenario: String,
    #[arg(long, default_value_t = 400)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

/// Bad input the user can fix by changing the invocation.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(tracing_subscriber::EnvFilter::try_new(&cli.log_level).unwrap_or_else(|_| "warn".into()))
        .init();

    if let Err(e) = validate_inputs(&cli.command) {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) if e.is::<UsageError>() => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

/// Input files every subcommand needs, checked before dispatch.
fn validate_inputs(cmd: &Command) -> Result<(), UsageError> {
    let mut inputs: Vec<&Path> = Vec::new();
    let mut policy = None;
    match cmd {
        Command::Compile(a) => {
            inputs.push(&a.traces);
            policy = a.profile.sensitive_policy.as_deref();
        }
        Command::Inspect(a) => inputs.push(&a.profile),
        Command::EnumeratePaths(a) => inputs.push(&a.profile),
        Command::Serve(a) => inputs.push(&a.profile),
        Command::Check(a) => inputs.extend([a.profile.as_path(), a.traces.as_path()]),
        Command::VerifyAudit(a) => {
            inputs.push(&a.log);
            inputs.extend(a.root.as_deref());
        }
        Command::ExportRoot(a) => inputs.push(&a.log),
        Command::Review(a) => {
            if let ReviewAction::Enqueue { fragment, .. } = &a.action {
                inputs.push(fragment);
            }
        }
        Command::Update(a) => {
            inputs.extend([a.profile.as_path(), a.queue.as_path()]);
            inputs.extend(a.digests.as_deref());
        }
        Command::Simulate(a) => {
            inputs.extend(a.profile.as_deref());
            policy = a.profile_flags.sensitive_policy.as_deref();
        }
        Command::Bench(_) | Command::Generate(_) => {}
    }
    inputs.extend(policy);
    for p in inputs {
        if !p.is_file() {
            return Err(UsageError(format!("{} does not exist or is not a file", p.display())));
        }
    }
    Ok(())
}

fn run(cmd: Command) -> Result<u8> {
    match cmd {
        Command::Compile(a) => compile(a),
        Command::Inspect(a) => inspect(a),
        Command::EnumeratePaths(a) => enumerate(a),
        Command::Serve(a) => serve(a),
        Command::Check(a) => check(a),
        Command::VerifyAudit(a) => verify_audit(a),
        Command::ExportRoot(a) => export_root(a),
        Command::Review(a) => review(a),
        Command::Update(a) => update(a),
        Command::Simulate(a) => simulate(a),
        Command::Bench(a) => bench(a),
        Command::Generate(a) => generate(a),
    }
}

fn emit(v: &Value) -> Result<u8> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, v)?;
    writeln!(out)?;
    Ok(0)
}

fn read_corpus(path: &Path) -> Result<Corpus> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    load_corpus_reader(BufReader::new(f)).with_context(|| format!("loading {}", path.display()))
}

fn embedder_for(p: &Pdfa) -> Arc<dyn Embedder> {
    Arc::new(ReferenceEmbedder::new(p.params().embedding_dim))
}

fn load(path: &Path) -> Result<Pdfa> {
    load_profile(path).with_context(|| format!("loading profile {}", path.display()))
}

fn compile(a: CompileArgs) -> Result<u8> {
    let params = a.profile.params(None)?;
    let corpus = read_corpus(&a.traces)?;
    let emb = ReferenceEmbedder::new(params.embedding_dim);
    let compiled = compile_profile(&corpus, &params, &emb)?;
    let digests = a.digests.unwrap_or_else(|| digests_path_for(&a.out));
    save_profile(&a.out, &compiled.pdfa)?;
    save_digests(&digests, &compiled.digests)?;
    info!(states = compiled.report.states, edges = compiled.report.edges, "profile written");
    for w in &compiled.report.warnings {
        tracing::warn!("{w}");
    }
    emit(&json!({
        "profile": a.out,
        "digests": digests,
        "report": compiled.report,
    }))
}

fn inspect(a: InspectArgs) -> Result<u8> {
    let p = load(&a.profile)?;
    let high_value: BTreeSet<String> = a.high_value.into_iter().collect();
    let terminal = (0..p.states().len()).filter(|&s| p.is_terminal(s)).count();
    let string_edges = p.edges().iter().filter(|e| e.schema.has_string_guard()).count();
    let mut v = json!({
        "states": p.states().len(),
        "edges": p.edges().len(),
        "terminal_states": terminal,
        "string_guarded_edges": string_edges,
        "vocabulary": p.vocab(),
        "params": p.params(),
        "out_degree": out_degree_stats(&p, &high_value),
        "digest_ref": p.digest_ref(),
    });
    if a.edges {
        let list: Vec<Value> = p
            .edges()
            .iter()
            .map(|e| {
                let guards: BTreeMap<&str, String> = e
                    .schema
                    .guards
                    .iter()
                    .map(|(path, g)| (path.as_str(), format!("{:?}", g.kind()).to_lowercase()))
                    .collect();
                json!({
                    "src": p.states()[e.src].to_string(),
                    "tool": e.tool,
                    "dst": p.states()[e.dst].to_string(),
                    "count": e.count,
                    "guards": guards,
                    "required": e.schema.required,
                })
            })
            .collect();
        v["transitions"] = Value::Array(list);
    }
    emit(&v)
}

fn enumerate(a: EnumerateArgs) -> Result<u8> {
    let p = load(&a.profile)?;
    if a.k == 0 {
        bail!(UsageError("--k must be at least 1".into()));
    }
    let stats = enumerate_paths(&p, a.k, a.target.as_deref(), a.budget)?;
    emit(&serde_json::to_value(stats)?)
}

fn serve(a: ServeArgs) -> Result<u8> {
    let p = load(&a.profile)?;
    let emb = embedder_for(&p);
    let audit = AuditLog::open(&a.audit).with_context(|| format!("opening audit log {}", a.audit.display()))?;
    let config = GatewayConfig {
        session_capacity: a.session_capacity,
        session_ttl_ms: a.session_ttl_secs.saturating_mul(1000),
    };
    let (states, edges) = (p.states().len(), p.edges().len());
    let gw = Arc::new(Gateway::new(p, emb, audit, config)?);
    let handle = gateway::serve(gw.clone(), &a.socket, Duration::from_secs(a.sweep_secs.max(1)))
        .with_context(|| format!("binding {}", a.socket.display()))?;
    info!(socket = %a.socket.display(), states, edges, "serving");
    emit(&json!({"socket": a.socket, "states": states, "edges": edges}))?;

    if let (Some(root_file), Some(secs)) = (a.root_file, a.root_interval_secs) {
        let log = a.audit.clone();
        std::thread::spawn(move || loop {
            std::thread::sleep(Duration::from_secs(secs.max(1)));
            if let Err(e) = write_root(&log, &root_file) {
                tracing::warn!("root export failed: {e:#}");
            }
        });
    }
    handle.wait();
    Ok(0)
}

fn check(a: CheckArgs) -> Result<u8> {
    let p = load(&a.profile)?;
    let corpus = read_corpus(&a.traces)?;
    let audit = match &a.audit {
        Some(path) => AuditLog::open(path).with_context(|| format!("opening audit log {}", path.display()))?,
        None => AuditLog::discard(),
    };
    let config = GatewayConfig {
        session_capacity: corpus.len() + 1,
        ..GatewayConfig::default()
    };
    let emb = embedder_for(&p);
    let gw = Gateway::new(p, emb, audit, config)?;
    let mut decisions = Vec::new();
    let mut reasons: BTreeMap<&str, u64> = BTreeMap::new();
    let (mut calls, mut blocked, mut traces_blocked) = (0u64, 0u64, 0u64);
    for t in &corpus.traces {
        let mut any = false;
        for (i, c) in t.calls.iter().enumerate() {
            let d = gw.evaluate_at(&t.session_id, &c.tool, &c.flat_params(), c.timestamp);
            calls += 1;
            if !d.allowed() {
                blocked += 1;
                any = true;
                *reasons.entry(d.reason.as_str()).or_default() += 1;
            }
            if !a.summary_only {
                let mut v = json!({
                    "session_id": t.session_id,
                    "index": i,
                    "tool": c.tool,
                    "decision": if d.allowed() { "allow" } else { "block" },
                    "reason": d.reason.as_str(),
                });
                if let Some(detail) = d.sanitized_detail() {
                    v["detail"] = Value::String(detail);
                }
                decisions.push(v);
            }
        }
        traces_blocked += any as u64;
    }
    let mut v = json!({
        "summary": {
            "traces": corpus.len(),
            "traces_blocked": traces_blocked,
            "calls": calls,
            "allowed": calls - blocked,
            "blocked": blocked,
            "reasons": reasons,
        }
    });
    if !a.summary_only {
        v["decisions"] = Value::Array(decisions);
    }
    emit(&v)
}

fn verify_audit(a: VerifyArgs) -> Result<u8> {
    let bytes = fs::read(&a.log).with_context(|| format!("reading {}", a.log.display()))?;
    let result = match &a.root {
        Some(r) => {
            let root: ChainRoot = serde_json::from_slice(&fs::read(r)?)
                .with_context(|| format!("parsing root file {}", r.display()))?;
            audit::verify_against_root(&bytes, &root)
        }
        None => audit::verify(&bytes),
    };
    match result {
        Verification::Ok { length, head } => emit(&json!({
            "ok": true,
            "length": length,
            "head": hex::encode(head),
        })),
        Verification::Broken { index, reason } => {
            emit(&json!({"ok": false, "broken_index": index, "reason": reason}))?;
            Ok(1)
        }
    }
}

fn write_root(log: &Path, out: &Path) -> Result<ChainRoot> {
    let bytes = fs::read(log).with_context(|| format!("reading {}", log.display()))?;
    let root = audit::export_root(&bytes)?;
    let tmp = out.with_extension("tmp");
    fs::write(&tmp, serde_json::to_vec(&root)?)?;
    fs::rename(&tmp, out)?;
    Ok(root)
}

fn export_root(a: ExportRootArgs) -> Result<u8> {
    let root = write_root(&a.log, &a.out)?;
    emit(&serde_json::to_value(root)?)
}

fn item_json(i: &PendingApproval) -> Value {
    json!({
        "id": i.id,
        "status": i.status,
        "blocked_index": i.blocked_index,
        "note": i.note,
        "tools": i.fragment.iter().map(|c| c.tool.as_str()).collect::<Vec<_>>(),
        "session_id": i.fragment.first().map(|c| c.session_id.as_str()),
    })
}

fn review(a: ReviewArgs) -> Result<u8> {
    let mut q = ReviewQueue::open(&a.queue)?;
    let v = match a.action {
        ReviewAction::List { pending } => Value::Array(
            q.items()
                .filter(|i| !pending || i.status == praetor_core::updates::ApprovalStatus::Pending)
                .map(item_json)
                .collect(),
        ),
        ReviewAction::Approve { id, note } => item_json(&q.review(id, true, &note)?),
        ReviewAction::Reject { id, note } => item_json(&q.review(id, false, &note)?),
        ReviewAction::Enqueue {
            fragment,
            blocked_index,
        } => {
            let text = fs::read_to_string(&fragment)?;
            let calls = text
                .lines()
                .enumerate()
                .filter(|(_, l)| !l.trim().is_empty())
                .map(|(i, l)| parse_trace_line(l).with_context(|| format!("{} line {}", fragment.display(), i + 1)))
                .collect::<Result<Vec<_>>>()?;
            item_json(&q.enqueue(blocked_index, calls)?)
        }
    };
    emit(&v)
}

fn update(a: UpdateArgs) -> Result<u8> {
    let p = load(&a.profile)?;
    let digests_path = a.digests.unwrap_or_else(|| digests_path_for(&a.profile));
    let digests = load_digests(&digests_path).with_context(|| format!("loading {}", digests_path.display()))?;
    let q = ReviewQueue::open(&a.queue)?;
    let approved = q.approved();
    let fragments: Vec<(u64, &[_])> = approved.iter().map(|i| (i.id, i.fragment.as_slice())).collect();
    let emb = embedder_for(&p);
    let (next, next_digests, report) = incremental_recompile(&p, &digests, &fragments, emb.as_ref())?;
    let out_digests = digests_path_for(&a.out);
    save_profile(&a.out, &next)?;
    save_digests(&out_digests, &next_digests)?;
    for w in &report.warnings {
        tracing::warn!("{w}");
    }
    emit(&json!({
        "profile": a.out,
        "digests": out_digests,
        "states": next.states().len(),
        "edges": next.edges().len(),
        "report": report,
    }))
}

fn scenario(name_or_path: &str) -> Result<Scenario> {
    let path = Path::new(name_or_path);
    if path.is_file() {
        let text = fs::read_to_string(path)?;
        return Scenario::from_json(&text).with_context(|| format!("loading scenario {}", path.display()));
    }
    Scenario::builtin(name_or_path).map_err(|_| {
        UsageError(format!(
            "{name_or_path} is neither a scenario file nor a built-in scenario ({})",
            Scenario::builtin_names().join(", ")
        ))
        .into()
    })
}

fn simulate(a: SimulateArgs) -> Result<u8> {
    let s = scenario(&a.scenario)?;
    let params = a.profile_flags.params(Some(s.policy()))?;
    let emb: Arc<dyn Embedder> = Arc::new(ReferenceEmbedder::new(params.embedding_dim));
    let sample = generate_benign(&s, a.train, a.seed);

    if let Mode::Graybox = a.mode {
        let defender = compile_profile(&sample.corpus, &params, emb.as_ref())?;
        let mut reports = Vec::new();
        for &k in &a.k {
            let cfg = GrayboxConfig {
                k,
                seed: a.seed,
                query_budget: a.query_budget,
                attacks: a.n,
            };
            reports.push(graybox(&s, &sample, &defender, &params, emb.clone(), cfg)?);
        }
        return emit(&json!({"scenario": s.name, "mode": "graybox", "reports": reports}));
    }

    let (pdfa, emb) = match &a.profile {
        Some(path) => {
            let p = load(path)?;
            let e = embedder_for(&p);
            (p, e)
        }
        None => {
            let Compiled { pdfa, .. } = compile_profile(&sample.corpus, &params, emb.as_ref())?;
            (pdfa, emb)
        }
    };
    let (traces, mode, label) = match a.mode {
        Mode::Benign => {
            let held = generate_benign(&s, a.n, a.seed.wrapping_add(1));
            (corpus_calls(&held.corpus), CampaignMode::Benign, "benign")
        }
        Mode::ContextSeq => (
            generate_context_sequential(&s, a.n, a.seed.wrapping_add(1)),
            CampaignMode::Attack,
            "context-seq",
        ),
        Mode::Splice => {
            let targets: Vec<String> = s.attack.keys().cloned().collect();
            if targets.is_empty() {
                bail!(UsageError(format!("scenario {} defines no attack payloads", s.name)));
            }
            (
                splice_exfiltration(&s, &sample.corpus, &targets, a.n, a.seed.wrapping_add(2)),
                CampaignMode::Attack,
                "splice",
            )
        }
        Mode::Graybox => unreachable!("handled above"),
    };
    let r = run_campaign(&pdfa, emb, &traces, mode);
    emit(&json!({
        "scenario": s.name,
        "mode": label,
        "states": pdfa.states().len(),
        "edges": pdfa.edges().len(),
        "asr": r.asr(),
        "btfr": r.btfr(),
        "report": r,
    }))
}

fn bench(a: BenchArgs) -> Result<u8> {
    if a.sizes.iter().any(|&n| n < 2) {
        bail!(UsageError("every size must be at least 2".into()));
    }
    let rows = bench_throughput(&a.sizes, a.calls, a.seed);
    emit(&serde_json::to_value(rows)?)
}

fn generate(a: GenerateArgs) -> Result<u8> {
    let s = scenario(&a.scenario)?;
    let sample = generate_benign(&s, a.n, a.seed);
    fs::write(&a.out, sample.corpus.to_jsonl()).with_context(|| format!("writing {}", a.out.display()))?;
    emit(&json!({
        "out": a.out,
        "traces": sample.corpus.len(),
        "calls": sample.corpus.call_count(),
        "templates": sample.template_counts(),
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn argument_definitions_are_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn env_overrides_flag_defaults() {
        std::env::set_var("PRAETOR_THETA", "7");
        let cli = Cli::try_parse_from(["praetor", "compile", "--traces", "t", "--out", "o"]).unwrap();
        std::env::remove_var("PRAETOR_THETA");
        let Command::Compile(a) = cli.command else {
            panic!("parsed {:?}", cli.command)
        };
        assert_eq!(a.profile.theta, 7);
        assert_eq!(a.profile.w, 3);
    }

    #[test]
    fn missing_inputs_are_rejected_before_dispatch() {
        let cli = Cli::try_parse_from(["praetor", "verify-audit", "/nonexistent/log"]).unwrap();
        assert!(validate_inputs(&cli.command).is_err());
    }
}
