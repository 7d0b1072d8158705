//! `mmdialog`: run the conversation-synthesis pipeline stage by stage over a
//! workspace directory, drive the refinement loop, or serve it over HTTP.

mod annotate;

use std::collections::BTreeSet;
use std::io::{self, IsTerminal};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::Rng;
use serde_json::json;
use tracing_subscriber::EnvFilter;

use mmdialog_core::config::BackendKind;
use mmdialog_core::pipeline::{self, StageOptions, StageSummary};
use mmdialog_core::workspace::{ErrorKind, PipelineError, Workspace};
use mmdialog_core::PipelineConfig;
use mmdialog_service::{Capability, ServeConfig, ServiceError, Sessions, SESSIONS_FILE};

#[derive(Parser, Debug)]
#[command(name = "mmdialog", version, about = "Synthesise interleaved image-text conversations from caption corpora")]
struct Cli {
    /// Workspace directory.
    #[arg(long, short = 'w', global = true, default_value = ".")]
    workspace: PathBuf,
    /// Run a stage even when its predecessor has not completed (recorded in the manifest).
    #[arg(long, global = true)]
    force: bool,
    /// Seed for stochastic stages, instead of the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Machine-readable progress: one JSON object per line on stdout.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Create a workspace with a config snapshot.
    Init {
        /// Config file to copy in (defaults are used otherwise).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Adopt an edited config.toml, discarding stage completions.
        #[arg(long)]
        reconfigure: bool,
    },
    /// Read a TSV (uri<TAB>caption) corpus.
    Ingest { source: PathBuf },
    /// Embed, score and drop mismatched image-caption pairs.
    Score {
        /// JSONL sidecar of precomputed embeddings keyed by uri.
        #[arg(long)]
        embeddings: Option<PathBuf>,
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// k-means topic clusters with small clusters pruned.
    Cluster {
        #[arg(long)]
        k: Option<usize>,
        #[arg(long = "min-size")]
        min_size: Option<usize>,
    },
    /// Draw image groups from the surviving clusters.
    Sample {
        #[arg(long)]
        count: Option<usize>,
    },
    /// Prompt the backend once per sampled group.
    Generate {
        /// Seed set to draw in-context examples from (default: the workspace loop).
        #[arg(long)]
        seedset: Option<PathBuf>,
        #[arg(long)]
        backend: Option<BackendArg>,
        /// Requests per minute, 0 for unlimited.
        #[arg(long)]
        rpm: Option<u32>,
        #[arg(long = "max-inflight")]
        max_inflight: Option<usize>,
    },
    /// Parse transcripts into conversations.
    Parse,
    /// Apply the quality filters.
    Filter {
        #[arg(long = "drift-threshold")]
        drift_threshold: Option<f64>,
        #[arg(long = "max-turns")]
        max_turns: Option<usize>,
    },
    /// Dataset statistics and CSV tables.
    Stats {
        /// Compute over this JSONL dataset instead of accepted.jsonl.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Write the self-contained dataset export.
    Export {
        #[arg(long, value_enum, default_value_t = ExportFormat::Jsonl)]
        format: ExportFormat,
    },
    /// Every stage from ingest through stats.
    Run {
        source: PathBuf,
        #[arg(long)]
        embeddings: Option<PathBuf>,
    },
    /// Re-hash the inventory and look for unlisted files.
    Verify,
    /// Show stage completion and the refinement-loop position.
    Status,
    /// Generate the next refinement batch and queue it for annotation.
    Iterate {
        #[arg(long)]
        batch: Option<usize>,
    },
    /// Label the open batch in the terminal.
    Annotate {
        #[arg(long)]
        annotator: String,
    },
    /// Promote the fully annotated batch into the seed set.
    Promote,
    /// Serve the JSON API (and the UI bundle, if given).
    Serve(ServeArgs),
    /// Issue a session token for the HTTP API; prints it once.
    Token {
        #[arg(long)]
        annotator: String,
        #[arg(long, value_delimiter = ',', default_value = "annotate")]
        capabilities: Vec<CapabilityArg>,
        /// Defaults to the workspace sessions file.
        #[arg(long)]
        sessions: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct ServeArgs {
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: std::net::IpAddr,
    #[arg(long)]
    sessions: Option<PathBuf>,
    #[arg(long = "ui-dir")]
    ui_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum BackendArg {
    Mock,
    Http,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ExportFormat {
    Jsonl,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum CapabilityArg {
    Annotate,
    Iterate,
    ReadOnly,
}

impl From<CapabilityArg> for Capability {
    fn from(c: CapabilityArg) -> Self {
        match c {
            CapabilityArg::Annotate => Capability::Annotate,
            CapabilityArg::Iterate => Capability::Iterate,
            CapabilityArg::ReadOnly => Capability::ReadOnly,
        }
    }
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Service(#[from] ServiceError),
    #[error("{0}")]
    Usage(String),
    #[error("{context}: {source}")]
    Io { context: String, source: io::Error },
}

impl CliError {
    fn exit_code(&self) -> u8 {
        let code = match self {
            CliError::Pipeline(e) => e.exit_code(),
            CliError::Service(e) => e.exit_code(),
            CliError::Usage(_) => ErrorKind::User.exit_code(),
            CliError::Io { .. } => ErrorKind::Environment.exit_code(),
        };
        code as u8
    }
}

type Result<T> = std::result::Result<T, CliError>;

struct Output {
    json: bool,
}

impl Output {
    fn summary(&self, s: &StageSummary) {
        if self.json {
            println!("{}", serde_json::to_string(s).expect("summaries serialise"));
            return;
        }
        let counts: Vec<String> = s.counts.iter().map(|(k, v)| format!("{k}={v}")).collect();
        println!("{}: {}", s.stage, counts.join(", "));
        for o in &s.outputs {
            println!("  wrote {o}");
        }
    }

    fn value(&self, v: serde_json::Value, human: impl FnOnce() -> String) {
        if self.json {
            println!("{v}");
        } else {
            println!("{}", human());
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(ErrorKind::User.exit_code() as u8) } else { ExitCode::SUCCESS };
        }
    };
    let default_level = if matches!(cli.command, Command::Serve(_)) { "info" } else { "warn" };
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new(default_level)))
        .with_writer(io::stderr)
        .with_ansi(io::stderr().is_terminal())
        .init();
    let out = Output { json: cli.json };
    match run(cli, &out) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if out.json {
                println!("{}", json!({"error": e.to_string(), "exit_code": e.exit_code()}));
            }
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn open(dir: &Path) -> Result<Workspace> {
    Ok(Workspace::open(dir)?)
}

/// Apply stage flags to the workspace config before the stage runs.
fn amend(ws: &mut Workspace, edit: impl FnOnce(&mut PipelineConfig)) -> Result<()> {
    let mut cfg = ws.config().clone();
    edit(&mut cfg);
    ws.amend_config(cfg)?;
    Ok(())
}

fn run(cli: Cli, out: &Output) -> Result<()> {
    let opts = StageOptions { force: cli.force, seed: cli.seed };
    let dir = cli.workspace.as_path();
    match cli.command {
        Command::Init { config, reconfigure } => {
            let ws = if reconfigure {
                if config.is_some() {
                    return Err(CliError::Usage("--reconfigure reads the workspace config.toml; drop --config".into()));
                }
                Workspace::reconfigure(dir)?
            } else {
                let mut cfg = match &config {
                    Some(p) => PipelineConfig::load(p).map_err(PipelineError::from)?,
                    None => PipelineConfig::default(),
                };
                if let Some(s) = cli.seed {
                    cfg.seed = s;
                }
                Workspace::init(dir, cfg)?
            };
            out.value(json!({"workspace": ws.root(), "config_hash": ws.manifest().config_hash}), || {
                format!("initialised {} (config {})", ws.root().display(), &ws.manifest().config_hash[..12])
            });
        }
        Command::Ingest { source } => out.summary(&pipeline::run_ingest(&mut open(dir)?, &source, &opts)?),
        Command::Score { embeddings, threshold } => {
            let mut ws = open(dir)?;
            amend(&mut ws, |c| {
                if let Some(t) = threshold {
                    c.score_threshold = t;
                }
            })?;
            out.summary(&pipeline::run_score(&mut ws, embeddings.as_deref(), &opts)?)
        }
        Command::Cluster { k, min_size } => {
            let mut ws = open(dir)?;
            amend(&mut ws, |c| {
                c.k = k.unwrap_or(c.k);
                c.min_cluster_size = min_size.unwrap_or(c.min_cluster_size);
            })?;
            out.summary(&pipeline::run_cluster(&mut ws, &opts)?)
        }
        Command::Sample { count } => out.summary(&pipeline::run_sample(&mut open(dir)?, count, &opts)?),
        Command::Generate { seedset, backend, rpm, max_inflight } => {
            let mut ws = open(dir)?;
            amend(&mut ws, |c| {
                if let Some(b) = backend {
                    c.backend.kind = match b {
                        BackendArg::Mock => BackendKind::Mock,
                        BackendArg::Http => BackendKind::Http,
                    };
                }
                c.backend.rpm = rpm.unwrap_or(c.backend.rpm);
                c.backend.max_inflight = max_inflight.unwrap_or(c.backend.max_inflight);
            })?;
            out.summary(&pipeline::run_generate(&mut ws, seedset.as_deref(), &opts)?)
        }
        Command::Parse => out.summary(&pipeline::run_parse(&mut open(dir)?, &opts)?),
        Command::Filter { drift_threshold, max_turns } => {
            let mut ws = open(dir)?;
            amend(&mut ws, |c| {
                c.drift_threshold = drift_threshold.unwrap_or(c.drift_threshold);
                c.max_turns = max_turns.unwrap_or(c.max_turns);
            })?;
            out.summary(&pipeline::run_filter(&mut ws, &opts)?)
        }
        Command::Stats { dataset } => out.summary(&pipeline::run_stats(&mut open(dir)?, dataset.as_deref(), &opts)?),
        Command::Export { format: ExportFormat::Jsonl } => out.summary(&pipeline::run_export(&mut open(dir)?, &opts)?),
        Command::Run { source, embeddings } => {
            let mut ws = open(dir)?;
            for s in pipeline::run_all(&mut ws, &source, embeddings.as_deref(), &opts)? {
                out.summary(&s);
            }
        }
        Command::Verify => {
            let ws = open(dir)?;
            ws.verify()?;
            let n = ws.manifest().inventory.len();
            out.value(json!({"verified": n}), || format!("ok: {n} files match the inventory"));
        }
        Command::Status => status(&open(dir)?, out)?,
        Command::Iterate { batch } => {
            let mut ws = open(dir)?;
            amend(&mut ws, |c| c.batch_size = batch.unwrap_or(c.batch_size))?;
            let mut store = pipeline::open_seed_store(&ws)?;
            let (state, report) = pipeline::run_iteration(&ws, &mut store)?;
            out.value(json!({"iteration": state.iteration, "report": report, "batch": state.batch}), || {
                format!(
                    "iteration {}: {} queued for annotation ({} generated, {} rejected{})",
                    state.iteration,
                    report.queued,
                    report.generated_total,
                    report.rejected,
                    if report.bootstrap { ", bootstrap prompt" } else { "" }
                )
            });
        }
        Command::Annotate { annotator } => {
            let ws = open(dir)?;
            let mut store = pipeline::open_seed_store(&ws)?;
            // with --json, stdout carries only the result line
            let session = if out.json {
                annotate::session(&mut store, &annotator, &mut io::stdin().lock(), &mut io::stderr())
            } else {
                annotate::session(&mut store, &annotator, &mut io::stdin().lock(), &mut io::stdout())
            };
            let done = session.map_err(|source| CliError::Io { context: "annotation session".into(), source })?;
            let snap = store.snapshot();
            out.value(json!({"annotated": done, "pending": snap.pending_ids().len()}), || {
                format!("{done} labelled, {} still pending", snap.pending_ids().len())
            });
        }
        Command::Promote => {
            let ws = open(dir)?;
            let mut store = pipeline::open_seed_store(&ws)?;
            let delta = store.promote_and_advance().map_err(PipelineError::from)?;
            out.value(serde_json::to_value(&delta).expect("deltas serialise"), || {
                format!(
                    "iteration {} done: {} promoted, seed set now {}{}",
                    delta.iteration,
                    delta.promoted.len(),
                    delta.seed_set_size,
                    if delta.frozen { "; seed set frozen" } else { "" }
                )
            });
        }
        Command::Serve(args) => {
            let cfg = ServeConfig {
                workspace: dir.to_path_buf(),
                host: args.host,
                port: args.port,
                sessions: args.sessions,
                ui_dir: args.ui_dir,
            };
            let runtime = tokio::runtime::Runtime::new()
                .map_err(|source| CliError::Io { context: "start async runtime".into(), source })?;
            runtime.block_on(async {
                let server = mmdialog_service::bind(&cfg).await?;
                server.run(mmdialog_service::shutdown_signal()).await
            })?;
        }
        Command::Token { annotator, capabilities, sessions } => {
            if annotator.trim().is_empty() {
                return Err(CliError::Usage("--annotator must not be empty".into()));
            }
            let path = sessions.unwrap_or_else(|| dir.join(SESSIONS_FILE));
            let mut all = Sessions::load_or_default(&path)?;
            let token = hex::encode(rand::rng().random::<[u8; 24]>());
            let caps: BTreeSet<Capability> = capabilities.into_iter().map(Capability::from).collect();
            all.add(&annotator, caps, &token);
            all.save(&path).map_err(|source| CliError::Io { context: format!("write {}", path.display()), source })?;
            // the session token is shown once; only its digest is stored
            out.value(json!({"annotator": annotator, "token": token}), || token.clone());
        }
    }
    Ok(())
}

fn status(ws: &Workspace, out: &Output) -> Result<()> {
    let m = ws.manifest();
    let store = pipeline::open_seed_store(ws)?;
    let snap = store.snapshot();
    let stages: Vec<&str> = m.stages.keys().map(|s| s.name()).collect();
    let value = json!({
        "completed_stages": stages,
        "overrides": m.overrides.len(),
        "loop": {
            "completed": snap.iteration,
            "frozen": snap.frozen,
            "open_batch": snap.open_batch.as_ref().map(|b| b.iteration),
            "pending": snap.pending_ids().len(),
            "seed_set_size": snap.seed_set.len(),
        },
    });
    out.value(value, || {
        let mut lines = vec![format!("stages: {}", if stages.is_empty() { "none".into() } else { stages.join(", ") })];
        if !m.overrides.is_empty() {
            lines.push(format!("forced runs: {}", m.overrides.len()));
        }
        lines.push(format!(
            "loop: {} iteration(s) promoted, seed set {}{}",
            snap.iteration,
            snap.seed_set.len(),
            if snap.frozen { " (frozen)" } else { "" }
        ));
        if let Some(b) = &snap.open_batch {
            lines.push(format!("open batch {}: {} pending", b.iteration, snap.pending_ids().len()));
        }
        lines.join("\n")
    });
    Ok(())
}
