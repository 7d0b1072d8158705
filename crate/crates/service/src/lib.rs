//! JSON-over-HTTP front end for the refinement loop: review queues,
//! annotation, iteration control and dataset statistics.
//!
//! Every seed-set mutation goes through one writer lock, so label submission
//! from many annotator sessions is serialised exactly as the store expects.
//! Batch generation runs on a background worker; clients poll its status.

mod api;
mod auth;
mod error;

use std::collections::{HashMap, VecDeque};
use std::future::Future;
use std::net::{IpAddr, Ipv4Addr, SocketAddr};
use std::path::PathBuf;
use std::sync::Arc;

use axum::Router;
use tokio::net::TcpListener;
use tokio::sync::Mutex;
use tracing::{info, warn};

use mmdialog_core::pipeline::open_seed_store;
use mmdialog_core::seedset::{SeedState, SeedStore};
use mmdialog_core::workspace::Workspace;
use mmdialog_core::PipelineConfig;

pub use api::router;
pub use auth::{token_hash, Capability, Session, SessionEntry, Sessions};
pub use error::{ApiError, ServiceError};

/// The published description of every endpoint.
pub const OPENAPI: &str = include_str!("../openapi.json");

/// Default sessions file, relative to the workspace root. Hidden, so it is
/// never taken for a stray artifact.
pub const SESSIONS_FILE: &str = ".sessions.json";

const REPLY_CAPACITY: usize = 4096;

#[derive(Debug, Clone)]
pub struct ServeConfig {
    pub workspace: PathBuf,
    pub host: IpAddr,
    pub port: u16,
    /// Defaults to `<workspace>/.sessions.json`.
    pub sessions: Option<PathBuf>,
    /// Static annotation UI bundle served under `/ui`.
    pub ui_dir: Option<PathBuf>,
}

impl ServeConfig {
    pub fn new(workspace: impl Into<PathBuf>, port: u16) -> Self {
        ServeConfig {
            workspace: workspace.into(),
            host: IpAddr::V4(Ipv4Addr::LOCALHOST),
            port,
            sessions: None,
            ui_dir: None,
        }
    }

    pub fn sessions_path(&self) -> PathBuf {
        self.sessions.clone().unwrap_or_else(|| self.workspace.join(SESSIONS_FILE))
    }
}

/// Scrubs provider credentials out of text that leaves the process.
#[derive(Debug, Clone, Default)]
pub struct Redactor {
    secrets: Vec<String>,
}

impl Redactor {
    /// Picks up the value of the configured credential variable, if set.
    pub fn from_config(cfg: &PipelineConfig) -> Self {
        let secrets = std::env::var(&cfg.backend.credential_env)
            .ok()
            .filter(|v| v.trim().len() >= 8)
            .into_iter()
            .collect();
        Redactor { secrets }
    }

    pub fn redact(&self, text: &str) -> String {
        let mut out = text.to_string();
        for s in &self.secrets {
            out = out.replace(s.as_str(), "[redacted]");
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Generation {
    Idle,
    Running { iteration: u32 },
    Failed { iteration: u32, error: String },
}

pub(crate) struct StoredReply {
    fingerprint: String,
    status: axum::http::StatusCode,
    body: serde_json::Value,
}

/// Everything guarded by the single writer lock.
pub(crate) struct Writer {
    store: SeedStore,
    generation: Generation,
    /// Successful mutation replies by (annotator, idempotency key).
    replies: HashMap<(String, String), StoredReply>,
    reply_order: VecDeque<(String, String)>,
}

pub struct AppState {
    ws: Arc<Workspace>,
    sessions: Sessions,
    redactor: Redactor,
    writer: Mutex<Writer>,
}

impl AppState {
    /// Opens the seed-set store and checks the workspace inventory.
    pub fn new(ws: Workspace, sessions: Sessions) -> Result<Arc<Self>, ServiceError> {
        ws.verify().map_err(ServiceError::workspace)?;
        let store = open_seed_store(&ws).map_err(ServiceError::workspace)?;
        let redactor = Redactor::from_config(ws.config());
        Ok(Arc::new(AppState {
            ws: Arc::new(ws),
            sessions,
            redactor,
            writer: Mutex::new(Writer {
                store,
                generation: Generation::Idle,
                replies: HashMap::new(),
                reply_order: VecDeque::new(),
            }),
        }))
    }

    pub fn workspace(&self) -> &Workspace {
        &self.ws
    }

    pub async fn snapshot(&self) -> Arc<SeedState> {
        self.writer.lock().await.store.snapshot()
    }

    /// True while a batch is being generated.
    pub async fn generating(&self) -> bool {
        matches!(self.writer.lock().await.generation, Generation::Running { .. })
    }
}

pub struct Server {
    listener: TcpListener,
    app: Router,
    state: Arc<AppState>,
}

/// Open the workspace and sessions, then bind. Fails fast on a busy port or
/// a damaged workspace, before any request is accepted.
pub async fn bind(cfg: &ServeConfig) -> Result<Server, ServiceError> {
    let ws = Workspace::open(&cfg.workspace).map_err(ServiceError::workspace)?;
    let sessions = Sessions::load(&cfg.sessions_path())?;
    let state = AppState::new(ws, sessions)?;
    let addr = SocketAddr::new(cfg.host, cfg.port);
    let listener = TcpListener::bind(addr).await.map_err(|source| ServiceError::Bind { addr, source })?;
    let app = router(Arc::clone(&state), cfg.ui_dir.as_deref());
    Ok(Server { listener, app, state })
}

impl Server {
    pub fn local_addr(&self) -> std::io::Result<SocketAddr> {
        self.listener.local_addr()
    }

    pub fn state(&self) -> &Arc<AppState> {
        &self.state
    }

    /// Serve until `shutdown` resolves, then wait for the writer to go idle.
    pub async fn run(self, shutdown: impl Future<Output = ()> + Send + 'static) -> Result<(), ServiceError> {
        let addr = self.local_addr().map_err(ServiceError::Io)?;
        info!(%addr, workspace = %self.state.ws.root().display(), "serving");
        axum::serve(self.listener, self.app).with_graceful_shutdown(shutdown).await.map_err(ServiceError::Io)?;
        // appends are synced as they happen; holding the lock means none is half done
        let w = self.state.writer.lock().await;
        if let Generation::Running { iteration } = w.generation {
            warn!(iteration, "abandoning in-flight generation; start the iteration again after restart");
        }
        info!(next_seq = w.store.snapshot().next_seq, "event log flushed, shut down");
        Ok(())
    }
}

/// Resolves on Ctrl-C or SIGTERM.
pub async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {}
        _ = term => {}
    }
}
