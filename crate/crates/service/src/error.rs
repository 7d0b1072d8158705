use std::net::SocketAddr;

use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde_json::json;
use thiserror::Error;

use mmdialog_core::seedset::SeedError;
use mmdialog_core::workspace::{PipelineError, MANIFEST_FILE};

/// Startup failures; all of them are fatal.
#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("cannot listen on {addr}: {source} (is another server using the port?)")]
    Bind { addr: SocketAddr, source: std::io::Error },
    #[error("{error}. {hint}")]
    Workspace { error: PipelineError, hint: String },
    #[error("sessions file {path}: {reason}")]
    Sessions { path: String, reason: String },
    #[error("server: {0}")]
    Io(std::io::Error),
}

impl ServiceError {
    pub(crate) fn workspace(error: PipelineError) -> Self {
        use PipelineError as P;
        let hint = match &error {
            P::NotInitialized(_) => "Run `mmdialog init` and the corpus stages first".to_string(),
            P::StaleWorkspace => "Run `mmdialog init --reconfigure` to adopt the edited config".to_string(),
            P::Inventory { .. } => {
                "Run `mmdialog verify` to list damaged files, then rerun the stage that wrote them".to_string()
            }
            P::Seed(SeedError::Corrupt { .. }) => "The seed-set event log cannot be replayed".to_string(),
            P::DataQuality(m) if m.contains(MANIFEST_FILE) => {
                format!("Restore {MANIFEST_FILE} from a backup, or re-initialise the workspace")
            }
            _ => "Check the workspace directory".to_string(),
        };
        ServiceError::Workspace { error, hint }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            ServiceError::Bind { .. } | ServiceError::Io(_) => 2,
            ServiceError::Workspace { error, .. } => error.exit_code(),
            ServiceError::Sessions { .. } => 1,
        }
    }
}

/// A non-2xx reply: a stable machine-readable `reason` plus a human `detail`.
#[derive(Debug, Clone, PartialEq)]
pub struct ApiError {
    pub status: StatusCode,
    pub reason: &'static str,
    pub detail: String,
}

impl ApiError {
    pub fn new(status: StatusCode, reason: &'static str, detail: impl Into<String>) -> Self {
        ApiError { status, reason, detail: detail.into() }
    }

    pub fn bad_request(detail: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "invalid request", detail)
    }

    pub fn not_found(detail: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not found", detail)
    }

    pub fn conflict(reason: &'static str, detail: impl Into<String>) -> Self {
        Self::new(StatusCode::CONFLICT, reason, detail)
    }

    pub fn internal(detail: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal error", detail)
    }
}

impl From<SeedError> for ApiError {
    fn from(e: SeedError) -> Self {
        let detail = e.to_string();
        match e {
            SeedError::Frozen => ApiError::conflict("seed set frozen", detail),
            SeedError::PendingAnnotations(_) => ApiError::conflict("pending annotations", detail),
            SeedError::AwaitingPromotion(_) => ApiError::conflict("awaiting promotion", detail),
            SeedError::NoOpenBatch => ApiError::conflict("no open batch", detail),
            SeedError::NotPending(_) => ApiError::conflict("not pending", detail),
            SeedError::NotFiltered(_) => ApiError::conflict("not filtered", detail),
            SeedError::UnknownConversation(_) => ApiError::not_found(detail),
            SeedError::InvalidAnnotation(_) => ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid annotation", detail),
            SeedError::Io(_) | SeedError::Corrupt { .. } => ApiError::internal(detail),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({"reason": self.reason, "detail": self.detail}))).into_response()
    }
}
