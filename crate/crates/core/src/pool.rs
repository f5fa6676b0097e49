//! Elastic VM pool: provider interface, billing-period-aware scaling policy,
//! reconciliation against the provider, and cost accounting.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::Duration;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::clock::{Clock, Timestamp};
use crate::model::{Backend, JobId, JobState, VmId, VmRecord, VmState};
use crate::protocol::{AgentClient, AgentMode};
use crate::store::{close_vm, Actor, Store, StoreError};

/// Billed periods for an uptime: every started period counts, and at least
/// one period is always charged.
pub fn billing_periods(uptime: Duration, period: Duration) -> u64 {
    let period_ms = period.as_millis().max(1);
    let up = uptime.as_millis();
    (up.div_ceil(period_ms) as u64).max(1)
}

/// Time left until the end of the period already paid for.
pub fn time_to_boundary(uptime: Duration, period: Duration) -> Duration {
    let paid = period * billing_periods(uptime, period) as u32;
    paid.saturating_sub(uptime)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingConfig {
    pub min_vms: u32,
    pub max_vms: u32,
    pub idle_grace: Duration,
    pub terminate_window: Duration,
    pub billing_period: Duration,
    pub boot_budget: Duration,
    pub unit_price: f64,
    pub image_ref: String,
    pub instance_size: String,
    /// Consecutive failed agent probes before a busy VM is declared lost.
    pub probe_failures_before_lost: u32,
}

impl Default for ScalingConfig {
    fn default() -> Self {
        ScalingConfig {
            min_vms: 0,
            max_vms: 4,
            idle_grace: Duration::from_secs(120),
            terminate_window: Duration::from_secs(300),
            billing_period: Duration::from_secs(3600),
            boot_budget: Duration::from_secs(90),
            unit_price: 1.0,
            image_ref: "burstq-agent".into(),
            instance_size: "standard".into(),
            probe_failures_before_lost: 3,
        }
    }
}

impl ScalingConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.min_vms > self.max_vms {
            return Err("min_vms must not exceed max_vms".into());
        }
        if self.billing_period.is_zero() {
            return Err("billing_period must be positive".into());
        }
        if self.terminate_window >= self.billing_period {
            return Err("terminate_window must be shorter than billing_period".into());
        }
        Ok(())
    }
}

/// Demand reported by the dispatch loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Demand {
    pub queue_depth: usize,
    pub oldest_wait: Duration,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScaleAction {
    Launch,
    Terminate(VmId),
}

/// The scaling policy. Pure: depends only on its arguments.
///
/// Launches while queued demand exceeds idle plus booting supply, up to
/// `max_vms` (and always up to `min_vms`). Terminates an idle VM only if it
/// has idled for `idle_grace`, the queue is empty, the pool stays at or
/// above `min_vms`, and the end of its paid billing period is within
/// `terminate_window`.
pub fn plan_scaling(
    vms: &[VmRecord],
    demand: Demand,
    now: Timestamp,
    cfg: &ScalingConfig,
) -> Vec<ScaleAction> {
    let live = vms.iter().filter(|v| v.state.is_live()).count();
    let supply = vms
        .iter()
        .filter(|v| matches!(v.state, VmState::Idle | VmState::Booting))
        .count();
    let headroom = (cfg.max_vms as usize).saturating_sub(live);
    let wanted = demand
        .queue_depth
        .saturating_sub(supply)
        .max((cfg.min_vms as usize).saturating_sub(live));
    let mut actions = vec![ScaleAction::Launch; wanted.min(headroom)];

    if demand.queue_depth == 0 {
        let mut pool_size = live;
        for vm in vms.iter().filter(|v| v.state == VmState::Idle) {
            if pool_size <= cfg.min_vms as usize {
                break;
            }
            let idle_for = vm.idle_since.map_or(Duration::ZERO, |t| now.since(t));
            let to_boundary = time_to_boundary(now.since(vm.billing_anchor), cfg.billing_period);
            if idle_for >= cfg.idle_grace && to_boundary <= cfg.terminate_window {
                actions.push(ScaleAction::Terminate(vm.id));
                pool_size -= 1;
            }
        }
    }
    actions
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ProviderError {
    #[error("provider request failed: {0}")]
    Failed(String),
    #[error("unknown instance {0}")]
    UnknownInstance(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InstanceStatus {
    Pending,
    Running,
    Terminated,
    Error,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstanceDescription {
    pub status: InstanceStatus,
    /// Agent base URL once the instance is reachable.
    pub endpoint: Option<String>,
}

/// The portable subset of an EC2-style API. Implementations hold no
/// scheduling logic.
pub trait CloudProvider: Send + Sync {
    fn launch(&self, image_ref: &str, size: &str) -> Result<String, ProviderError>;
    /// Idempotent.
    fn terminate(&self, handle: &str) -> Result<(), ProviderError>;
    fn describe(&self, handle: &str) -> InstanceDescription;
}

/// Placeholder for a real provider client: every launch fails and
/// describes report nothing.
#[derive(Debug, Default)]
pub struct ExternalStubProvider;

impl CloudProvider for ExternalStubProvider {
    fn launch(&self, image_ref: &str, size: &str) -> Result<String, ProviderError> {
        Err(ProviderError::Failed(format!(
            "external provider not configured (launch {image_ref}/{size})"
        )))
    }

    fn terminate(&self, _handle: &str) -> Result<(), ProviderError> {
        Ok(())
    }

    fn describe(&self, _handle: &str) -> InstanceDescription {
        InstanceDescription {
            status: InstanceStatus::Terminated,
            endpoint: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingDecision {
    pub at: Timestamp,
    pub action: String,
    pub vm: Option<VmId>,
    pub reason: String,
    pub queue_depth: usize,
    pub oldest_wait_s: f64,
    pub live_vms: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VmBill {
    pub vm_id: VmId,
    pub state: VmState,
    pub launched_at: Timestamp,
    pub terminated_at: Option<Timestamp>,
    pub uptime_s: f64,
    pub busy_s: f64,
    pub jobs_executed: u64,
    pub periods_billed: u64,
    pub unit_price: f64,
    pub cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobAttribution {
    pub job_id: JobId,
    pub owner: String,
    pub vm_id: VmId,
    pub runtime_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostLedger {
    pub billing_period_s: f64,
    pub vms: Vec<VmBill>,
    pub jobs: Vec<JobAttribution>,
    pub total_periods: u64,
    pub total_cost: f64,
}

/// Builds the ledger from store records. Terminated VMs use their frozen
/// bill; live VMs are billed for the periods started so far.
pub fn build_ledger(
    vms: &[VmRecord],
    jobs: &[crate::model::JobRecord],
    now: Timestamp,
    cfg: &ScalingConfig,
) -> CostLedger {
    let bills: Vec<VmBill> = vms
        .iter()
        .map(|v| {
            let end = v.terminated_at.unwrap_or(now);
            let uptime = end.since(v.launched_at);
            let periods = v
                .periods_billed
                .unwrap_or_else(|| billing_periods(uptime, cfg.billing_period));
            let open_busy = match (v.terminated_at, v.busy_since) {
                (None, Some(since)) => now.since(since).as_millis() as u64,
                _ => 0,
            };
            VmBill {
                vm_id: v.id,
                state: v.state,
                launched_at: v.launched_at,
                terminated_at: v.terminated_at,
                uptime_s: uptime.as_secs_f64(),
                busy_s: (v.busy_ms + open_busy) as f64 / 1000.0,
                jobs_executed: v.jobs_executed,
                periods_billed: periods,
                unit_price: cfg.unit_price,
                cost: periods as f64 * cfg.unit_price,
            }
        })
        .collect();
    let attributions = jobs
        .iter()
        .filter(|j| j.backend == Backend::Cloud && j.state.is_terminal())
        .filter_map(|j| {
            let vm = j.assigned_vm?;
            let runtime = j.finished_at?.since(j.started_at?);
            Some(JobAttribution {
                job_id: j.id,
                owner: j.spec.owner.clone(),
                vm_id: vm,
                runtime_s: runtime.as_secs_f64(),
            })
        })
        .collect();
    CostLedger {
        billing_period_s: cfg.billing_period.as_secs_f64(),
        total_periods: bills.iter().map(|b| b.periods_billed).sum(),
        total_cost: bills.iter().fold(0.0, |acc, b| acc + b.cost),
        vms: bills,
        jobs: attributions,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PoolError {
    #[error("not found: {0}")]
    NotFound(VmId),
    #[error("illegal vm transition: {0}")]
    IllegalTransition(String),
    #[error("store: {0}")]
    Store(String),
}

impl From<StoreError> for PoolError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::NotFound(s) => PoolError::Store(format!("not found: {s}")),
            StoreError::Invalid(s) => PoolError::IllegalTransition(s),
            other => PoolError::Store(other.to_string()),
        }
    }
}

/// A busy VM whose agent is gone; its job needs the failure path.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LostVm {
    pub vm: VmId,
    pub job: Option<JobId>,
    pub reason: String,
}

#[derive(Debug, Default)]
struct PoolState {
    demand: Demand,
    consecutive_launch_failures: u32,
    next_launch_at: Timestamp,
    launches: u64,
    launch_failures: u64,
    probe_failures: BTreeMap<VmId, u32>,
    idle_mismatch: BTreeMap<VmId, u32>,
    decisions: Vec<ScalingDecision>,
}

/// The VM manager. Provider and agent calls are never made while the
/// store lock is held.
pub struct VmPool {
    store: Arc<Store>,
    provider: Arc<dyn CloudProvider>,
    agents: Arc<dyn AgentClient>,
    cfg: ScalingConfig,
    clock: Arc<dyn Clock>,
    rng: Mutex<Box<dyn RngCore + Send>>,
    state: Mutex<PoolState>,
}

const MAX_LAUNCH_BACKOFF: Duration = Duration::from_secs(60);

impl VmPool {
    pub fn new(
        store: Arc<Store>,
        provider: Arc<dyn CloudProvider>,
        agents: Arc<dyn AgentClient>,
        cfg: ScalingConfig,
        clock: Arc<dyn Clock>,
        rng: Box<dyn RngCore + Send>,
    ) -> Self {
        VmPool {
            store,
            provider,
            agents,
            cfg,
            clock,
            rng: Mutex::new(rng),
            state: Mutex::new(PoolState::default()),
        }
    }

    pub fn config(&self) -> &ScalingConfig {
        &self.cfg
    }

    pub fn provider(&self) -> &Arc<dyn CloudProvider> {
        &self.provider
    }

    pub fn agents(&self) -> &Arc<dyn AgentClient> {
        &self.agents
    }

    fn state(&self) -> MutexGuard<'_, PoolState> {
        self.state.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn mint_token(&self) -> String {
        let mut bytes = [0u8; 32];
        self.rng
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .fill_bytes(&mut bytes);
        hex::encode(bytes)
    }

    /// Reserves an idle VM for the caller by marking it Busy. Two callers
    /// never receive the same VM.
    pub fn acquire_idle_vm(&self, job: Option<JobId>) -> Option<VmRecord> {
        let now = self.clock.now();
        self.store
            .claim_vm(
                Actor::QueueManager,
                "reserve",
                |v| v.state == VmState::Idle && v.endpoint.is_some(),
                |v| {
                    v.state = VmState::Busy;
                    v.current_job = job;
                    v.idle_since = None;
                    v.busy_since = Some(now);
                },
            )
            .unwrap_or_else(|e| {
                tracing::warn!(error = %e, "could not reserve vm");
                None
            })
    }

    /// Returns a Busy VM to Idle.
    pub fn release(&self, vm: VmId, completed_job: bool) -> Result<VmRecord, PoolError> {
        let now = self.clock.now();
        self.state().idle_mismatch.remove(&vm);
        let res = self.store.update_vm(vm, Actor::JobManager, "release", |v| {
            if v.state != VmState::Busy {
                return Err(StoreError::Invalid(format!(
                    "release of {} in state {}",
                    v.id, v.state
                )));
            }
            v.state = VmState::Idle;
            if completed_job {
                v.jobs_executed += 1;
            }
            v.idle_since = Some(now);
            v.current_job = None;
            if let Some(since) = v.busy_since.take() {
                v.busy_ms += now.since(since).as_millis() as u64;
            }
            Ok(())
        });
        match res {
            Err(StoreError::NotFound(_)) => Err(PoolError::NotFound(vm)),
            other => other.map_err(PoolError::from),
        }
    }

    /// Declares a VM lost and revokes its token.
    pub fn mark_lost(&self, vm: VmId, reason: &str) -> Result<VmRecord, PoolError> {
        let now = self.clock.now();
        let res = self
            .store
            .update_vm(vm, Actor::VmManager, format!("lost: {reason}"), |v| {
                if !v.state.is_live() {
                    return Err(StoreError::Invalid(format!("{} already terminated", v.id)));
                }
                if let Some(since) = v.busy_since.take() {
                    v.busy_ms += now.since(since).as_millis() as u64;
                }
                v.state = VmState::Lost;
                v.token = None;
                Ok(())
            });
        match res {
            Err(StoreError::NotFound(_)) => Err(PoolError::NotFound(vm)),
            other => other.map_err(PoolError::from),
        }
    }

    pub fn note_demand(&self, demand: Demand) {
        self.state().demand = demand;
    }

    pub fn demand(&self) -> Demand {
        self.state().demand
    }

    fn record(&self, decision: ScalingDecision) {
        tracing::info!(
            target: "burstq::scaling",
            action = %decision.action,
            vm = ?decision.vm,
            queue_depth = decision.queue_depth,
            reason = %decision.reason,
            "scaling decision"
        );
        self.state().decisions.push(decision);
    }

    /// Plans with the latest demand and carries the plan out.
    pub fn scale(&self, now: Timestamp) -> Vec<ScaleAction> {
        let demand = self.demand();
        let vms = self.store.vm_list(None);
        let live = vms.iter().filter(|v| v.state.is_live()).count();
        let mut plan = plan_scaling(&vms, demand, now, &self.cfg);
        let mut done = Vec::with_capacity(plan.len());
        let decision = |action: &str, vm: Option<VmId>, reason: String| ScalingDecision {
            at: now,
            action: action.into(),
            vm,
            reason,
            queue_depth: demand.queue_depth,
            oldest_wait_s: demand.oldest_wait.as_secs_f64(),
            live_vms: live,
        };
        plan.sort_by_key(|a| matches!(a, ScaleAction::Launch));
        for action in plan {
            match action {
                ScaleAction::Launch => {
                    if now < self.state().next_launch_at {
                        break;
                    }
                    match self.launch(now) {
                        Ok(vm) => {
                            self.record(decision(
                                "launch",
                                Some(vm.id),
                                format!(
                                    "queue_depth={} exceeds idle+booting supply (max_vms={})",
                                    demand.queue_depth, self.cfg.max_vms
                                ),
                            ));
                            done.push(action);
                        }
                        Err(e) => {
                            let backoff = self.launch_failed(now);
                            self.record(decision(
                                "launch-failed",
                                None,
                                format!("{e}; retry in {}s", backoff.as_secs()),
                            ));
                            break;
                        }
                    }
                }
                ScaleAction::Terminate(id) => {
                    let Some(vm) = vms.iter().find(|v| v.id == id) else {
                        continue;
                    };
                    let idle = vm.idle_since.map_or(Duration::ZERO, |t| now.since(t));
                    let left =
                        time_to_boundary(now.since(vm.billing_anchor), self.cfg.billing_period);
                    if self.terminate(id, now) {
                        self.record(decision(
                            "terminate",
                            Some(id),
                            format!(
                                "idle {}s >= grace {}s, {}s to billing boundary <= window {}s, queue empty",
                                idle.as_secs(),
                                self.cfg.idle_grace.as_secs(),
                                left.as_secs(),
                                self.cfg.terminate_window.as_secs()
                            ),
                        ));
                        done.push(action);
                    }
                }
            }
        }
        done
    }

    fn launch(&self, now: Timestamp) -> Result<VmRecord, String> {
        let handle = self
            .provider
            .launch(&self.cfg.image_ref, &self.cfg.instance_size)
            .map_err(|e| e.to_string())?;
        let token = self.mint_token();
        let vm = self
            .store
            .insert_vm(VmRecord::new(handle.clone(), token, now))
            .map_err(|e| {
                let _ = self.provider.terminate(&handle);
                e.to_string()
            })?;
        let mut st = self.state();
        st.launches += 1;
        st.consecutive_launch_failures = 0;
        Ok(vm)
    }

    /// Records a failed launch and returns the backoff before the next one.
    fn launch_failed(&self, now: Timestamp) -> Duration {
        let mut st = self.state();
        st.launch_failures += 1;
        st.consecutive_launch_failures += 1;
        let exp = st.consecutive_launch_failures.saturating_sub(1).min(16);
        let backoff = Duration::from_secs(1u64 << exp).min(MAX_LAUNCH_BACKOFF);
        st.next_launch_at = now.plus(backoff);
        backoff
    }

    /// Moves an Idle VM to Terminating and asks the provider to stop it.
    /// Returns false if the VM was no longer Idle.
    fn terminate(&self, id: VmId, now: Timestamp) -> bool {
        let claimed = self
            .store
            .update_vm(id, Actor::VmManager, "terminate idle", |v| {
                if v.state != VmState::Idle {
                    return Err(StoreError::Invalid("no longer idle".into()));
                }
                v.state = VmState::Terminating;
                v.token = None;
                Ok(())
            });
        let Ok(vm) = claimed else { return false };
        self.finish_termination(&vm, now);
        true
    }

    fn finish_termination(&self, vm: &VmRecord, now: Timestamp) {
        match self.provider.terminate(&vm.provider_handle) {
            Ok(()) | Err(ProviderError::UnknownInstance(_)) => {
                let period = self.cfg.billing_period;
                let _ = self
                    .store
                    .update_vm(vm.id, Actor::VmManager, "terminated", |v| {
                        close_vm(v, now, period);
                        Ok(())
                    });
                let mut st = self.state();
                st.probe_failures.remove(&vm.id);
                st.idle_mismatch.remove(&vm.id);
            }
            Err(e) => tracing::warn!(vm = %vm.id, error = %e, "terminate failed; will retry"),
        }
    }

    /// Brings store records in line with the provider and the agents.
    /// Returns busy VMs found dead, for the dispatch loop's failure path.
    pub fn reconcile(&self, now: Timestamp) -> Vec<LostVm> {
        let mut lost = Vec::new();
        for vm in self.store.vm_list(None) {
            match vm.state {
                VmState::Booting => self.reconcile_booting(&vm, now),
                VmState::Idle => {
                    let desc = self.provider.describe(&vm.provider_handle);
                    if matches!(
                        desc.status,
                        InstanceStatus::Terminated | InstanceStatus::Error
                    ) && self.mark_lost(vm.id, "instance gone").is_ok()
                    {
                        lost.push(LostVm {
                            vm: vm.id,
                            job: None,
                            reason: "instance gone".into(),
                        });
                    }
                }
                VmState::Busy => {
                    if let Some(l) = self.probe_busy(&vm) {
                        lost.push(l);
                    }
                }
                VmState::Lost | VmState::Terminating => self.finish_termination(&vm, now),
                VmState::Terminated => {}
            }
        }
        lost
    }

    fn reconcile_booting(&self, vm: &VmRecord, now: Timestamp) {
        let desc = self.provider.describe(&vm.provider_handle);
        let failed = match desc.status {
            InstanceStatus::Running => {
                if let Some(endpoint) = desc.endpoint {
                    if self.agents.status(&endpoint).is_ok() {
                        let _ = self
                            .store
                            .update_vm(vm.id, Actor::VmManager, "agent up", |v| {
                                if v.state != VmState::Booting {
                                    return Err(StoreError::Invalid("not booting".into()));
                                }
                                v.state = VmState::Idle;
                                v.endpoint = Some(endpoint);
                                v.idle_since = Some(now);
                                Ok(())
                            });
                        return;
                    }
                }
                None
            }
            InstanceStatus::Pending => None,
            InstanceStatus::Error => Some("instance failed to boot"),
            InstanceStatus::Terminated => Some("instance vanished while booting"),
        };
        let reason = failed.or_else(|| {
            (now.since(vm.launched_at) > self.cfg.boot_budget).then_some("boot budget exceeded")
        });
        if let Some(reason) = reason {
            let _ = self.provider.terminate(&vm.provider_handle);
            let period = self.cfg.billing_period;
            let _ = self.store.update_vm(vm.id, Actor::VmManager, reason, |v| {
                close_vm(v, now, period);
                Ok(())
            });
            self.launch_failed(now);
            self.record(ScalingDecision {
                at: now,
                action: "boot-failed".into(),
                vm: Some(vm.id),
                reason: reason.into(),
                queue_depth: self.demand().queue_depth,
                oldest_wait_s: self.demand().oldest_wait.as_secs_f64(),
                live_vms: 0,
            });
        }
    }

    fn probe_busy(&self, vm: &VmRecord) -> Option<LostVm> {
        let endpoint = vm.endpoint.clone()?;
        let Some(job) = vm.current_job else {
            // Busy with no job of ours: an agent that rejected a dispatch as
            // busy. Hand it back once it is idle.
            if let Ok(s) = self.agents.status(&endpoint) {
                if s.mode == AgentMode::Idle {
                    let _ =
                        self.store
                            .update_vm(vm.id, Actor::VmManager, "agent idle again", |v| {
                                if v.state != VmState::Busy || v.current_job.is_some() {
                                    return Err(StoreError::Invalid("changed".into()));
                                }
                                v.state = VmState::Idle;
                                v.idle_since = Some(self.clock.now());
                                if let Some(since) = v.busy_since.take() {
                                    v.busy_ms += self.clock.now().since(since).as_millis() as u64;
                                }
                                Ok(())
                            });
                }
            }
            return None;
        };
        let desc = self.provider.describe(&vm.provider_handle);
        let verdict = if matches!(
            desc.status,
            InstanceStatus::Terminated | InstanceStatus::Error
        ) {
            Some("instance gone".to_string())
        } else {
            match self.agents.status(&endpoint) {
                Err(e) => {
                    let mut st = self.state();
                    let n = st.probe_failures.entry(vm.id).or_default();
                    *n += 1;
                    (*n >= self.cfg.probe_failures_before_lost)
                        .then(|| format!("agent unreachable: {e}"))
                }
                Ok(status) => {
                    self.state().probe_failures.remove(&vm.id);
                    let holds_job = status.mode == AgentMode::Busy && status.job_id == Some(job);
                    if holds_job {
                        self.state().idle_mismatch.remove(&vm.id);
                        None
                    } else {
                        // The agent may have pushed and gone idle after we read
                        // the store; only act if the job is still running here.
                        let still_running = self.store.job(job).is_some_and(|j| {
                            j.state == JobState::Running && j.assigned_vm == Some(vm.id)
                        }) && self
                            .store
                            .vm(vm.id)
                            .is_some_and(|v| v.current_job == Some(job));
                        if !still_running {
                            None
                        } else {
                            let mut st = self.state();
                            let n = st.idle_mismatch.entry(vm.id).or_default();
                            *n += 1;
                            (*n >= self.cfg.probe_failures_before_lost).then(|| {
                                match status.fault {
                                    Some(f) => format!("agent dropped job: {f}"),
                                    None => "agent no longer running the job".to_string(),
                                }
                            })
                        }
                    }
                }
            }
        };
        let reason = verdict?;
        self.mark_lost(vm.id, &reason).ok()?;
        Some(LostVm {
            vm: vm.id,
            job: Some(job),
            reason,
        })
    }

    pub fn accounting_report(&self) -> CostLedger {
        let now = self.clock.now();
        let snap = self.store.snapshot();
        let vms: Vec<_> = snap.vms.into_values().collect();
        let jobs: Vec<_> = snap.jobs.into_values().collect();
        build_ledger(&vms, &jobs, now, &self.cfg)
    }

    pub fn decisions(&self) -> Vec<ScalingDecision> {
        self.state().decisions.clone()
    }

    pub fn launches(&self) -> u64 {
        self.state().launches
    }

    pub fn launch_failures(&self) -> u64 {
        self.state().launch_failures
    }

    /// Terminates every live VM (service shutdown, end of a simulation).
    pub fn drain(&self, now: Timestamp) {
        for vm in self.store.vm_list(None) {
            if vm.state.is_live() {
                let _ = self.provider.terminate(&vm.provider_handle);
                let period = self.cfg.billing_period;
                let _ = self.store.update_vm(vm.id, Actor::VmManager, "drain", |v| {
                    close_vm(v, now, period);
                    Ok(())
                });
            }
        }
    }
}
