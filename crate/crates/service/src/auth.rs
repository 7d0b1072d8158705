//! Bearer-token sessions. The sessions file stores only SHA-256 digests of
//! the tokens, never the tokens themselves.

use std::collections::BTreeSet;
use std::path::Path;
use std::sync::Arc;

use axum::extract::FromRequestParts;
use axum::http::header::AUTHORIZATION;
use axum::http::request::Parts;
use axum::http::StatusCode;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use mmdialog_core::workspace::write_atomic;

use crate::error::{ApiError, ServiceError};
use crate::AppState;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Capability {
    Annotate,
    Iterate,
    ReadOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionEntry {
    pub annotator: String,
    pub token_sha256: String,
    pub capabilities: BTreeSet<Capability>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Sessions {
    pub sessions: Vec<SessionEntry>,
}

pub fn token_hash(token: &str) -> String {
    hex::encode(Sha256::digest(token.as_bytes()))
}

impl Sessions {
    pub fn load(path: &Path) -> Result<Self, ServiceError> {
        let err = |reason: String| ServiceError::Sessions { path: path.display().to_string(), reason };
        let text = std::fs::read_to_string(path)
            .map_err(|e| err(format!("{e} (create one with `mmdialog token --annotator NAME`)")))?;
        let sessions: Sessions = serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
        sessions.validate().map_err(err)?;
        Ok(sessions)
    }

    /// A missing file means no sessions yet.
    pub fn load_or_default(path: &Path) -> Result<Self, ServiceError> {
        if path.exists() {
            Self::load(path)
        } else {
            Ok(Sessions::default())
        }
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let mut text = serde_json::to_string_pretty(self).expect("sessions serialise");
        text.push('\n');
        write_atomic(path, text.as_bytes())
    }

    fn validate(&self) -> Result<(), String> {
        let mut seen = BTreeSet::new();
        for s in &self.sessions {
            if s.annotator.trim().is_empty() {
                return Err("session with an empty annotator id".into());
            }
            if s.token_sha256.len() != 64 || !s.token_sha256.bytes().all(|b| b.is_ascii_hexdigit()) {
                return Err(format!("session {}: token_sha256 is not a SHA-256 hex digest", s.annotator));
            }
            if s.capabilities.is_empty() {
                return Err(format!("session {}: no capabilities", s.annotator));
            }
            if !seen.insert(s.token_sha256.to_ascii_lowercase()) {
                return Err(format!("session {}: token shared with another session", s.annotator));
            }
        }
        Ok(())
    }

    /// Register a session for `token`, replacing any earlier one for the annotator.
    pub fn add(&mut self, annotator: &str, capabilities: BTreeSet<Capability>, token: &str) {
        self.sessions.retain(|s| s.annotator != annotator);
        self.sessions.push(SessionEntry { annotator: annotator.to_string(), token_sha256: token_hash(token), capabilities });
    }

    pub fn find(&self, token: &str) -> Option<&SessionEntry> {
        let digest = token_hash(token);
        self.sessions.iter().find(|s| s.token_sha256.eq_ignore_ascii_case(&digest))
    }
}

/// The caller, resolved from `Authorization: Bearer <token>`.
#[derive(Debug, Clone, PartialEq)]
pub struct Session {
    pub annotator: String,
    pub capabilities: BTreeSet<Capability>,
}

impl Session {
    pub fn require(&self, cap: Capability) -> Result<(), ApiError> {
        if self.capabilities.contains(&cap) {
            Ok(())
        } else {
            let name = serde_json::to_value(cap).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default();
            Err(ApiError::new(StatusCode::FORBIDDEN, "forbidden", format!("this session lacks the {name} capability")))
        }
    }
}

impl FromRequestParts<Arc<AppState>> for Session {
    type Rejection = ApiError;

    async fn from_request_parts(parts: &mut Parts, state: &Arc<AppState>) -> Result<Self, ApiError> {
        let unauthorized = |d: &str| ApiError::new(StatusCode::UNAUTHORIZED, "unauthorized", d);
        let header = parts
            .headers
            .get(AUTHORIZATION)
            .ok_or_else(|| unauthorized("missing bearer token"))?
            .to_str()
            .map_err(|_| unauthorized("malformed authorization header"))?;
        let token = header
            .strip_prefix("Bearer ")
            .or_else(|| header.strip_prefix("bearer "))
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .ok_or_else(|| unauthorized("expected a bearer token"))?;
        let entry = state.sessions.find(token).ok_or_else(|| unauthorized("unknown token"))?;
        Ok(Session { annotator: entry.annotator.clone(), capabilities: entry.capabilities.clone() })
    }
}
