//! Client for an external judge speaking the JSON verdict protocol.
//!
//! Request: `{"prompt": .., "generation": .., "conditions": [..]}`.
//! Response keys: `passed`, `average score` (with the space), `reflection`,
//! `issues`, `must_fix`. A verdict may only pass with `average score > 0.95`.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const PASS_FLOOR: f64 = 0.95;

#[derive(Debug, Error)]
pub enum RemoteError {
    /// Connection or HTTP-level failure; the call may be retried.
    #[error("transport error (retryable): {0}")]
    Transport(String),
    #[error("malformed verdict body: {reason}; raw body: {raw}")]
    Protocol { reason: String, raw: String },
    #[error("verdict rejected: {0}")]
    Rejected(String),
}

impl RemoteError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, RemoteError::Transport(_))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyRequest {
    pub prompt: String,
    pub generation: String,
    pub conditions: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteVerdict {
    pub passed: bool,
    #[serde(rename = "average score")]
    pub average_score: f64,
    pub reflection: String,
    pub issues: String,
    pub must_fix: String,
}

impl RemoteVerdict {
    pub fn check(&self) -> Result<(), RemoteError> {
        if !(0.0..=1.0).contains(&self.average_score) {
            return Err(RemoteError::Rejected(format!("average score {} outside [0, 1]", self.average_score)));
        }
        if self.passed && self.average_score <= PASS_FLOOR {
            return Err(RemoteError::Rejected(format!("passed=true with average score {} (must exceed {PASS_FLOOR})", self.average_score)));
        }
        Ok(())
    }
}

/// Parses and validates a response body.
pub fn parse_verdict(body: &str) -> Result<RemoteVerdict, RemoteError> {
    let verdict: RemoteVerdict =
        serde_json::from_str(body).map_err(|e| RemoteError::Protocol { reason: e.to_string(), raw: body.to_string() })?;
    verdict.check()?;
    Ok(verdict)
}

/// Connection-scoped client; cheap to construct per call.
#[derive(Debug, Clone)]
pub struct RemoteVerifier {
    endpoint: String,
    timeout: Duration,
}

impl RemoteVerifier {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self { endpoint: endpoint.into(), timeout: Duration::from_secs(30) }
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn verify(&self, request: &VerifyRequest) -> Result<RemoteVerdict, RemoteError> {
        let payload = serde_json::to_string(request).map_err(|e| RemoteError::Transport(e.to_string()))?;
        let agent: ureq::Agent =
            ureq::Agent::config_builder().timeout_global(Some(self.timeout)).http_status_as_error(false).build().into();
        let mut response = agent
            .post(&self.endpoint)
            .header("Content-Type", "application/json")
            .send(payload.as_str())
            .map_err(|e| RemoteError::Transport(e.to_string()))?;
        let status = response.status().as_u16();
        let body = response.body_mut().read_to_string().map_err(|e| RemoteError::Transport(e.to_string()))?;
        if !(200..300).contains(&status) {
            return Err(RemoteError::Transport(format!("HTTP {status}: {body}")));
        }
        parse_verdict(&body)
    }
}

/// One-shot convenience wrapper.
pub fn verify_remote(endpoint: &str, prompt: &str, generation: &str, conditions: &[String]) -> Result<RemoteVerdict, RemoteError> {
    RemoteVerifier::new(endpoint).verify(&VerifyRequest {
        prompt: prompt.to_string(),
        generation: generation.to_string(),
        conditions: conditions.to_vec(),
    })
}
