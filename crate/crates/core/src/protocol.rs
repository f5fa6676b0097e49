//! Messages exchanged between the job manager and VM agents, and the
//! transport traits both directions go through.

use std::collections::BTreeMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::kernels::{ExitStatus, Files, KernelResult};
use crate::model::{JobId, JobKind};

/// What the dispatch loop sends to an agent. Carries inputs and metadata
/// only; kernels are preinstalled on the agent.
#[derive(Debug, Clone, PartialEq)]
pub struct ExecutePayload {
    pub job_id: JobId,
    pub kind: JobKind,
    pub params: BTreeMap<String, String>,
    pub inputs: Files,
    pub callback_url: String,
    pub token: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExecuteReply {
    Accepted,
    Busy,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultBundle {
    pub job_id: JobId,
    pub exit_status: ExitStatus,
    pub outputs: Files,
    pub log_text: String,
}

impl ResultBundle {
    pub fn from_kernel(job_id: JobId, r: KernelResult) -> Self {
        ResultBundle {
            job_id,
            exit_status: r.exit_status,
            outputs: r.outputs,
            log_text: r.log_text,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.exit_status == ExitStatus::Error && self.log_text.trim().is_empty() {
            return Err("an error result must carry a log".into());
        }
        Ok(())
    }

    /// Content digest used to recognise a re-delivered bundle.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(self.exit_status.as_str().as_bytes());
        h.update([0]);
        h.update((self.log_text.len() as u64).to_le_bytes());
        h.update(self.log_text.as_bytes());
        for (name, data) in &self.outputs {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            h.update((data.len() as u64).to_le_bytes());
            h.update(data);
        }
        hex::encode(h.finalize())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AgentMode {
    Idle,
    Busy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentStatus {
    pub mode: AgentMode,
    pub job_id: Option<JobId>,
    pub uptime_ms: u64,
    /// Set when the last result could not be delivered.
    pub fault: Option<String>,
    pub jobs_run: u64,
    /// Delivery attempts made for the most recent result.
    pub last_push_attempts: u32,
    /// Recent agent log lines, oldest first.
    #[serde(default)]
    pub log: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AgentCallError {
    #[error("agent unreachable: {0}")]
    Unreachable(String),
    #[error("agent rejected request: {0}")]
    Rejected(String),
}

/// Manager-side view of the agents' HTTP surface.
pub trait AgentClient: Send + Sync {
    fn execute(
        &self,
        endpoint: &str,
        payload: &ExecutePayload,
    ) -> Result<ExecuteReply, AgentCallError>;
    fn status(&self, endpoint: &str) -> Result<AgentStatus, AgentCallError>;
    /// Returns false if the agent was not running that job.
    fn abort(&self, endpoint: &str, job_id: JobId) -> Result<bool, AgentCallError>;
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PushError {
    /// Network failure or server error; worth retrying.
    #[error("transient delivery failure: {0}")]
    Transient(String),
    /// The manager refused the token.
    #[error("token rejected")]
    Auth,
    /// The manager refused the bundle for good (e.g. conflicting results).
    #[error("results rejected: {0}")]
    Rejected(String),
}

/// Agent-side delivery of results back to the manager.
pub trait ResultSink: Send + Sync {
    fn push(&self, callback_url: &str, token: &str, bundle: &ResultBundle)
        -> Result<(), PushError>;
}

/// Exponential backoff for result delivery.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PushPolicy {
    pub initial_backoff: Duration,
    pub factor: f64,
    pub max_backoff: Duration,
    pub max_attempts: u32,
}

impl Default for PushPolicy {
    fn default() -> Self {
        PushPolicy {
            initial_backoff: Duration::from_secs(1),
            factor: 2.0,
            max_backoff: Duration::from_secs(60),
            max_attempts: 10,
        }
    }
}

impl PushPolicy {
    /// Delay before attempt `attempt` (1-based; the first attempt has none).
    pub fn delay_before(&self, attempt: u32) -> Duration {
        if attempt <= 1 {
            return Duration::ZERO;
        }
        let d = self.initial_backoff.as_secs_f64() * self.factor.powi(attempt as i32 - 2);
        Duration::from_secs_f64(d.min(self.max_backoff.as_secs_f64()))
    }
}
