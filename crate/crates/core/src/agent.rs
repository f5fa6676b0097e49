//! Single-job execution service that runs on each VM.
//!
//! The agent accepts at most one job. The kernel runs on its own thread
//! while the HTTP front keeps answering `status`, `abort` and busy
//! rejections. Results are pushed back to the manager's callback URL with
//! exponential backoff; the agent only turns Idle again once delivery is
//! acknowledged or given up.

use std::collections::VecDeque;
use std::fs;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, MutexGuard};

use crate::clock::{CancelToken, Clock, Timestamp};
use crate::kernels::{run_kernel, KernelResult};
use crate::model::JobId;
use crate::protocol::{
    AgentMode, AgentStatus, ExecutePayload, ExecuteReply, PushError, PushPolicy, ResultBundle,
    ResultSink,
};

const LOG_LINES: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AgentError {
    #[error("malformed payload: {0}")]
    MalformedPayload(String),
    #[error("not running job {0}")]
    NotFound(JobId),
}

struct Core {
    mode: Option<JobId>,
    generation: u64,
    cancel: Option<Arc<CancelToken>>,
    fault: Option<String>,
    jobs_run: u64,
    last_push_attempts: u32,
    log: VecDeque<String>,
}

struct Shared {
    core: Mutex<Core>,
    clock: Arc<dyn Clock>,
    sink: Arc<dyn ResultSink>,
    policy: PushPolicy,
    workdir: PathBuf,
    started: Timestamp,
}

impl Shared {
    fn lock(&self) -> MutexGuard<'_, Core> {
        self.core.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn log(&self, core: &mut Core, line: String) {
        tracing::debug!(target: "burstq::agent", "{line}");
        let line = format!("{} {line}", self.clock.now());
        if core.log.len() == LOG_LINES {
            core.log.pop_front();
        }
        core.log.push_back(line);
    }
}

#[derive(Clone)]
pub struct Agent {
    shared: Arc<Shared>,
}

impl Agent {
    pub fn new(
        clock: Arc<dyn Clock>,
        sink: Arc<dyn ResultSink>,
        policy: PushPolicy,
        workdir: impl Into<PathBuf>,
    ) -> Self {
        let started = clock.now();
        Agent {
            shared: Arc::new(Shared {
                core: Mutex::new(Core {
                    mode: None,
                    generation: 0,
                    cancel: None,
                    fault: None,
                    jobs_run: 0,
                    last_push_attempts: 0,
                    log: VecDeque::new(),
                }),
                clock,
                sink,
                policy,
                workdir: workdir.into(),
                started,
            }),
        }
    }

    /// Starts `payload` if idle. A busy agent answers `Busy` and changes
    /// nothing.
    pub fn execute(&self, payload: ExecutePayload) -> Result<ExecuteReply, AgentError> {
        if payload.callback_url.is_empty() {
            return Err(AgentError::MalformedPayload("callback_url is empty".into()));
        }
        if payload.token.is_empty() {
            return Err(AgentError::MalformedPayload("token is empty".into()));
        }
        let shared = &self.shared;
        let (generation, cancel) = {
            let mut core = shared.lock();
            if let Some(running) = core.mode {
                let line = format!("rejected {} while running {running}", payload.job_id);
                shared.log(&mut core, line);
                return Ok(ExecuteReply::Busy);
            }
            core.generation += 1;
            let cancel = Arc::new(CancelToken::new());
            core.mode = Some(payload.job_id);
            core.cancel = Some(cancel.clone());
            core.fault = None;
            core.last_push_attempts = 0;
            let line = format!("accepted {} ({})", payload.job_id, payload.kind);
            shared.log(&mut core, line);
            (core.generation, cancel)
        };
        let job_dir = shared.workdir.join(payload.job_id.to_string());
        if let Err(e) = stage(&job_dir, &payload) {
            let mut core = shared.lock();
            let line = format!("staging inputs for {} failed: {e}", payload.job_id);
            shared.log(&mut core, line);
        }
        let shared = self.shared.clone();
        std::thread::Builder::new()
            .name(format!("agent-{}", payload.job_id))
            .spawn(move || run_job(shared, payload, generation, cancel, job_dir))
            .expect("spawn kernel thread");
        Ok(ExecuteReply::Accepted)
    }

    /// Stops the running job without pushing results.
    pub fn abort(&self, job_id: JobId) -> Result<(), AgentError> {
        let mut core = self.shared.lock();
        if core.mode != Some(job_id) {
            return Err(AgentError::NotFound(job_id));
        }
        if let Some(c) = core.cancel.take() {
            c.cancel();
        }
        core.generation += 1;
        core.mode = None;
        self.shared.log(&mut core, format!("aborted {job_id}"));
        Ok(())
    }

    pub fn status(&self) -> AgentStatus {
        let core = self.shared.lock();
        AgentStatus {
            mode: if core.mode.is_some() {
                AgentMode::Busy
            } else {
                AgentMode::Idle
            },
            job_id: core.mode,
            uptime_ms: self
                .shared
                .clock
                .now()
                .since(self.shared.started)
                .as_millis() as u64,
            fault: core.fault.clone(),
            jobs_run: core.jobs_run,
            last_push_attempts: core.last_push_attempts,
            log: core.log.iter().cloned().collect(),
        }
    }
}

fn stage(dir: &std::path::Path, payload: &ExecutePayload) -> std::io::Result<()> {
    fs::create_dir_all(dir)?;
    for (name, data) in &payload.inputs {
        if crate::workspace::valid_file_name(name) {
            fs::write(dir.join(name), data)?;
        }
    }
    Ok(())
}

fn run_job(
    shared: Arc<Shared>,
    payload: ExecutePayload,
    generation: u64,
    cancel: Arc<CancelToken>,
    job_dir: PathBuf,
) {
    let job_id = payload.job_id;
    let result = run_kernel(
        payload.kind,
        &payload.params,
        &payload.inputs,
        shared.clock.as_ref(),
        &cancel,
    );
    let _ = fs::remove_dir_all(&job_dir);
    let Some(result) = result else {
        return;
    };
    {
        let mut core = shared.lock();
        if core.generation != generation {
            return;
        }
        core.jobs_run += 1;
        let line = format!("{job_id} finished: {}", result.exit_status.as_str());
        shared.log(&mut core, line);
    }
    deliver(&shared, &payload, generation, &cancel, result);
}

fn deliver(
    shared: &Shared,
    payload: &ExecutePayload,
    generation: u64,
    cancel: &CancelToken,
    result: KernelResult,
) {
    let job_id = payload.job_id;
    let bundle = ResultBundle::from_kernel(job_id, result);
    let policy = shared.policy;
    let mut outcome = Err(PushError::Transient("never attempted".into()));
    for attempt in 1..=policy.max_attempts {
        let delay = policy.delay_before(attempt);
        if !delay.is_zero() && cancel.sleep(shared.clock.as_ref(), delay) {
            return;
        }
        {
            let mut core = shared.lock();
            if core.generation != generation {
                return;
            }
            core.last_push_attempts = attempt;
        }
        outcome = shared
            .sink
            .push(&payload.callback_url, &payload.token, &bundle);
        let mut core = shared.lock();
        match &outcome {
            Ok(()) => {
                shared.log(&mut core, format!("pushed {job_id} on attempt {attempt}"));
                break;
            }
            Err(PushError::Transient(e)) => {
                let line = format!("push of {job_id} attempt {attempt} failed: {e}");
                shared.log(&mut core, line);
            }
            Err(e) => {
                let line = format!("push of {job_id} attempt {attempt} refused: {e}");
                shared.log(&mut core, line);
                break;
            }
        }
    }
    let mut core = shared.lock();
    if core.generation != generation {
        return;
    }
    core.fault = match outcome {
        Ok(()) => None,
        Err(PushError::Transient(e)) => Some(format!(
            "gave up delivering {job_id} after {} attempts: {e}",
            core.last_push_attempts
        )),
        Err(e) => Some(format!("delivery of {job_id} refused: {e}")),
    };
    core.mode = None;
    core.cancel = None;
}
