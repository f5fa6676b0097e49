//! The queue manager: a periodic loop that hands queued cloud jobs to idle
//! VMs in submission order.

use std::collections::VecDeque;
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::clock::Timestamp;
use crate::model::{Backend, JobEvent, JobId, JobRecord, JobState, VmId, VmRecord};
use crate::pool::{Demand, LostVm, VmPool};
use crate::protocol::{AgentCallError, ExecutePayload, ExecuteReply};
use crate::store::{Actor, Store, StoreError};
use crate::workspace::Workspace;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DispatchConfig {
    pub poll_interval: Duration,
    pub dispatch_timeout: Duration,
    pub max_dispatch_retries: u32,
    /// Executor losses a job survives before it is failed.
    pub max_attempts: u32,
    pub trace_capacity: usize,
}

impl Default for DispatchConfig {
    fn default() -> Self {
        DispatchConfig {
            poll_interval: Duration::from_secs(1),
            dispatch_timeout: Duration::from_secs(30),
            max_dispatch_retries: 2,
            max_attempts: 2,
            trace_capacity: 10_000,
        }
    }
}

impl DispatchConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.poll_interval.is_zero() {
            return Err("poll_interval must be positive".into());
        }
        if self.max_attempts == 0 {
            return Err("max_attempts must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DispatchOutcome {
    Accepted,
    Busy,
    Unreachable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "kebab-case")]
pub enum DispatchAction {
    Dispatch {
        job: JobId,
        vm: VmId,
        outcome: DispatchOutcome,
    },
    Demand {
        depth: usize,
        oldest_wait_s: f64,
    },
    /// The job could not be staged and was failed without a VM.
    Failed {
        job: JobId,
        reason: String,
    },
    /// The job was cancelled while its dispatch was in flight.
    Aborted {
        job: JobId,
        vm: VmId,
    },
    AgentFailure {
        job: JobId,
        vm: VmId,
        requeued: bool,
        reason: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub at: Timestamp,
    #[serde(flatten)]
    pub action: DispatchAction,
}

pub struct QueueManager {
    store: Arc<Store>,
    pool: Arc<VmPool>,
    workspace: Workspace,
    cfg: DispatchConfig,
    /// Base URL agents push results to; `/jobs/{id}/results` is appended.
    callback_base: String,
    trace: Mutex<VecDeque<TraceEntry>>,
    /// Serializes ticks: never two in flight.
    tick_lock: Mutex<()>,
}

impl QueueManager {
    pub fn new(
        store: Arc<Store>,
        pool: Arc<VmPool>,
        workspace: Workspace,
        cfg: DispatchConfig,
        callback_base: impl Into<String>,
    ) -> Self {
        QueueManager {
            store,
            pool,
            workspace,
            cfg,
            callback_base: callback_base.into().trim_end_matches('/').to_string(),
            trace: Mutex::new(VecDeque::new()),
            tick_lock: Mutex::new(()),
        }
    }

    pub fn config(&self) -> &DispatchConfig {
        &self.cfg
    }

    pub fn pool(&self) -> &Arc<VmPool> {
        &self.pool
    }

    fn trace_lock(&self) -> MutexGuard<'_, VecDeque<TraceEntry>> {
        self.trace.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn push_trace(&self, at: Timestamp, action: DispatchAction) {
        let mut t = self.trace_lock();
        if t.len() == self.cfg.trace_capacity.max(1) {
            t.pop_front();
        }
        t.push_back(TraceEntry { at, action });
    }

    pub fn trace(&self) -> Vec<TraceEntry> {
        self.trace_lock().iter().cloned().collect()
    }

    pub fn callback_url(&self, job: JobId) -> String {
        format!("{}/jobs/{job}/results", self.callback_base)
    }

    /// One pass over the cloud queue. Returns the actions taken.
    pub fn tick(&self, now: Timestamp) -> Vec<DispatchAction> {
        let _serial = self.tick_lock.lock().unwrap_or_else(|p| p.into_inner());
        let mut actions = Vec::new();
        let queue = self.store.queued(Backend::Cloud);
        let mut remaining: VecDeque<JobRecord> = queue.into();
        while let Some(job) = remaining.front().cloned() {
            // The job may have been cancelled since the queue was read.
            if self
                .store
                .job(job.id)
                .is_none_or(|j| j.state != JobState::Queued)
            {
                remaining.pop_front();
                continue;
            }
            let Some(vm) = self.pool.acquire_idle_vm(Some(job.id)) else {
                break;
            };
            let action = self.dispatch(&job, &vm, now);
            let done = match &action {
                DispatchAction::Dispatch { outcome, .. } => *outcome == DispatchOutcome::Accepted,
                _ => true,
            };
            self.push_trace(now, action.clone());
            actions.push(action);
            if done {
                remaining.pop_front();
            }
        }
        let depth = remaining.len();
        let oldest_wait = remaining
            .front()
            .map_or(Duration::ZERO, |j| now.since(j.submitted_at));
        self.pool.note_demand(Demand {
            queue_depth: depth,
            oldest_wait,
        });
        if depth > 0 {
            let action = DispatchAction::Demand {
                depth,
                oldest_wait_s: oldest_wait.as_secs_f64(),
            };
            self.push_trace(now, action.clone());
            actions.push(action);
        }
        actions
    }

    /// Sends one job to one reserved VM. The job is committed as Running on
    /// the VM before the agent is contacted, so a result pushed back before
    /// the reply arrives always finds a Running job.
    pub fn dispatch(&self, job: &JobRecord, vm: &VmRecord, now: Timestamp) -> DispatchAction {
        let inputs = match self.workspace.read_inputs(job.id) {
            Ok(inputs) => inputs,
            Err(e) => {
                let reason = format!("staged inputs unreadable: {e}");
                let _ = self
                    .store
                    .update_job(job.id, Actor::QueueManager, "inputs missing", |j| {
                        j.error = Some(reason.clone());
                        j.apply(JobEvent::Fail, now)?;
                        Ok(())
                    });
                let _ = self.pool.release(vm.id, false);
                return DispatchAction::Failed {
                    job: job.id,
                    reason,
                };
            }
        };
        let committed = self.store.update_job(
            job.id,
            Actor::QueueManager,
            format!("dispatch to {}", vm.id),
            |j| {
                j.apply(JobEvent::Dispatch, now)?;
                j.assigned_vm = Some(vm.id);
                Ok(())
            },
        );
        if committed.is_err() {
            let _ = self.pool.release(vm.id, false);
            return DispatchAction::Aborted {
                job: job.id,
                vm: vm.id,
            };
        }
        let (Some(endpoint), Some(token)) = (vm.endpoint.clone(), vm.token.clone()) else {
            self.revert(job.id, vm.id, now, "vm has no endpoint or token", false);
            let _ = self
                .pool
                .mark_lost(vm.id, "reserved without endpoint or token");
            return DispatchAction::Dispatch {
                job: job.id,
                vm: vm.id,
                outcome: DispatchOutcome::Unreachable,
            };
        };
        let payload = ExecutePayload {
            job_id: job.id,
            kind: job.spec.kind,
            params: job.spec.params.clone(),
            inputs,
            callback_url: self.callback_url(job.id),
            token,
        };

        let agents = self.pool.agents().clone();
        let mut last_err = None;
        let mut reply = None;
        for _ in 0..=self.cfg.max_dispatch_retries {
            match agents.execute(&endpoint, &payload) {
                Ok(r) => {
                    reply = Some(r);
                    break;
                }
                Err(e @ AgentCallError::Rejected(_)) => {
                    last_err = Some(e);
                    break;
                }
                Err(e) => last_err = Some(e),
            }
        }
        let outcome = match reply {
            Some(ExecuteReply::Accepted) => {
                let cancelled = self
                    .store
                    .job(job.id)
                    .is_some_and(|j| j.state == JobState::Cancelled);
                if cancelled {
                    let _ = agents.abort(&endpoint, job.id);
                    let _ = self.pool.release(vm.id, false);
                    return DispatchAction::Aborted {
                        job: job.id,
                        vm: vm.id,
                    };
                }
                DispatchOutcome::Accepted
            }
            Some(ExecuteReply::Busy) => {
                // The agent is occupied by something the pool did not know
                // about; the VM stays Busy until reconcile sees it idle.
                self.revert(job.id, vm.id, now, "agent busy", false);
                let _ =
                    self.store
                        .update_vm(vm.id, Actor::QueueManager, "agent reported busy", |v| {
                            v.current_job = None;
                            Ok(())
                        });
                DispatchOutcome::Busy
            }
            None => {
                let reason = last_err.map_or_else(|| "no reply".to_string(), |e| e.to_string());
                self.revert(job.id, vm.id, now, &reason, true);
                let _ = self.pool.mark_lost(vm.id, &reason);
                DispatchOutcome::Unreachable
            }
        };
        DispatchAction::Dispatch {
            job: job.id,
            vm: vm.id,
            outcome,
        }
    }

    /// Puts a job whose dispatch did not take back in the queue.
    fn revert(&self, job: JobId, vm: VmId, now: Timestamp, reason: &str, count_attempt: bool) {
        let _ = self.store.update_job(
            job,
            Actor::QueueManager,
            format!("dispatch to {vm} failed: {reason}"),
            |j| {
                if j.state != JobState::Running || j.assigned_vm != Some(vm) {
                    return Err(StoreError::Invalid("job moved on".into()));
                }
                if count_attempt {
                    j.attempt_count += 1;
                }
                j.apply(JobEvent::Requeue, now)?;
                Ok(())
            },
        );
    }

    /// A VM died (or its agent dropped the job) while the job ran there.
    pub fn handle_agent_failure(
        &self,
        job: JobId,
        vm: VmId,
        reason: &str,
        now: Timestamp,
    ) -> Result<(), StoreError> {
        let current = self
            .store
            .job(job)
            .ok_or_else(|| StoreError::NotFound(format!("job {job}")))?;
        let _ = self.pool.mark_lost(vm, reason);
        if current.state != JobState::Running || current.assigned_vm != Some(vm) {
            self.store.note(
                Actor::QueueManager,
                format!(
                    "{job}: ignored late failure report from {vm} ({reason}) in state {}",
                    current.state
                ),
            )?;
            return Ok(());
        }
        let max_attempts = self.cfg.max_attempts;
        let updated = self.store.update_job(
            job,
            Actor::QueueManager,
            format!("agent failure on {vm}: {reason}"),
            |j| {
                j.attempt_count += 1;
                if j.attempt_count < max_attempts {
                    j.apply(JobEvent::Requeue, now)?;
                } else {
                    j.error = Some(format!("{reason} (attempt {})", j.attempt_count));
                    j.apply(JobEvent::Fail, now)?;
                }
                Ok(())
            },
        )?;
        let action = DispatchAction::AgentFailure {
            job,
            vm,
            requeued: updated.state == JobState::Queued,
            reason: reason.to_string(),
        };
        self.push_trace(now, action);
        Ok(())
    }

    /// The periodic cloud-side step: reconcile the pool, fail over jobs on
    /// dead VMs, dispatch, then scale on the resulting demand.
    pub fn cloud_step(&self, now: Timestamp) -> Vec<DispatchAction> {
        for LostVm { vm, job, reason } in self.pool.reconcile(now) {
            if let Some(job) = job {
                if let Err(e) = self.handle_agent_failure(job, vm, &reason, now) {
                    tracing::warn!(%job, %vm, error = %e, "failure handling");
                }
            }
        }
        let actions = self.tick(now);
        self.pool.scale(now);
        actions
    }
}
