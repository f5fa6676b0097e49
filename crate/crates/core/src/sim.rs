//! Discrete-time simulation of the whole service on a virtual clock.
//!
//! The real job service, queue manager, VM pool and local scheduler run
//! unchanged; only the edges are simulated (SimCloud with virtual agents,
//! SimGrid, virtual task pools). Time advances in fixed steps, and fully
//! quiescent stretches (no jobs, no VMs, nothing pending) are skipped
//! because stepping through them cannot change any state.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clock::{Clock, ManualClock, Timestamp};
use crate::config::Config;
use crate::dispatch::{DispatchAction, DispatchConfig, DispatchOutcome, QueueManager, TraceEntry};
use crate::grid::{
    max_local_concurrency, ExecEvent, LocalScheduler, LocalSchedulerConfig, SimGrid, SimGridConfig,
    VirtualPool,
};
use crate::manager::{JobService, ServiceConfig};
use crate::model::{Backend, JobRecord, JobState, VmState};
use crate::pool::{build_ledger, CostLedger, ScalingConfig, ScalingDecision, VmPool};
use crate::simcloud::{SimCloud, SimCloudConfig, VirtualAgents};
use crate::store::Store;
use crate::workload::Arrival;
use crate::workspace::Workspace;

pub const METRICS_SCHEMA_VERSION: u32 = 1;

/// Violations kept verbatim; further ones are only counted.
const MAX_RECORDED_VIOLATIONS: usize = 50;

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub service: ServiceConfig,
    pub dispatch: DispatchConfig,
    pub scaling: ScalingConfig,
    pub simcloud: SimCloudConfig,
    pub local: LocalSchedulerConfig,
    pub simgrid: SimGridConfig,
    /// Delay between a cloud kernel finishing and its result arriving.
    pub push_latency: Duration,
    pub step: Duration,
    /// How long to keep running after the last arrival for work to finish
    /// and the pool to wind down.
    pub drain_limit: Duration,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            service: ServiceConfig::default(),
            dispatch: DispatchConfig::default(),
            scaling: ScalingConfig::default(),
            simcloud: SimCloudConfig::default(),
            local: LocalSchedulerConfig::default(),
            simgrid: SimGridConfig::default(),
            push_latency: Duration::ZERO,
            step: Duration::from_secs(1),
            drain_limit: Duration::from_secs(2 * 86_400),
        }
    }
}

impl SimConfig {
    pub fn from_config(cfg: &Config) -> Self {
        SimConfig {
            service: cfg.service.clone(),
            dispatch: cfg.dispatch.clone(),
            scaling: cfg.scaling.clone(),
            simcloud: cfg.simcloud.clone(),
            local: cfg.local.clone(),
            simgrid: cfg.simgrid.clone(),
            ..SimConfig::default()
        }
    }

    /// Reseeds every random component from one seed.
    pub fn seeded(mut self, seed: u64) -> Self {
        self.simcloud.seed = seed ^ 0x5157_c10d;
        self.simgrid.seed = seed ^ 0x9e1d;
        self.local.seed = seed ^ 0x10ca1;
        self
    }

    pub fn validate(&self) -> Result<(), String> {
        self.service.routing.validate()?;
        self.dispatch.validate()?;
        self.scaling.validate()?;
        self.local.validate()?;
        if self.step.is_zero() {
            return Err("step must be positive".into());
        }
        Ok(())
    }
}

/// Wall-clock pacing. Results never depend on it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Acceleration {
    /// Run as fast as possible.
    Max,
    /// Virtual seconds per wall second.
    Factor(f64),
}

impl std::str::FromStr for Acceleration {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "max" {
            return Ok(Acceleration::Max);
        }
        let x: f64 = s.parse().map_err(|_| format!("bad acceleration {s:?}"))?;
        Ok(Acceleration::Factor(x))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BackendMetrics {
    pub submitted: u64,
    pub completed: u64,
    pub failed: u64,
    pub cancelled: u64,
    pub unfinished: u64,
    pub mean_wait_s: f64,
    pub p95_wait_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimMetrics {
    pub start: Timestamp,
    pub end: Timestamp,
    pub virtual_seconds: f64,
    pub jobs_submitted: u64,
    pub jobs_rejected: u64,
    pub jobs_completed: u64,
    pub jobs_failed: u64,
    pub jobs_cancelled: u64,
    pub jobs_unfinished: u64,
    /// Time from submission to first start. Jobs that never started count
    /// with their wait up to the end of the run.
    pub mean_wait_s: f64,
    pub p95_wait_s: f64,
    pub per_backend: BTreeMap<Backend, BackendMetrics>,
    pub vms_launched: u64,
    pub launch_failures: u64,
    pub vm_busy_fraction: f64,
    pub billed_periods: u64,
    pub total_cost: f64,
    /// Highest number of jobs ever running at once on a single VM.
    pub max_jobs_per_vm: usize,
    pub max_local_concurrency: usize,
    pub busy_rejections: u64,
    pub unreachable_dispatches: u64,
    pub push_errors: u64,
    pub invariant_violation_count: u64,
    pub invariant_violations: Vec<String>,
}

/// The metrics file: one JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsFile {
    pub schema_version: u32,
    pub metrics: SimMetrics,
    pub scaling_log: Vec<ScalingDecision>,
}

#[derive(Debug, Clone)]
pub struct SimReport {
    pub metrics: SimMetrics,
    pub scaling_log: Vec<ScalingDecision>,
    pub dispatch_trace: Vec<TraceEntry>,
    pub exec_trace: Vec<ExecEvent>,
    pub ledger: CostLedger,
    pub jobs: Vec<JobRecord>,
}

impl SimReport {
    pub fn metrics_file(&self) -> MetricsFile {
        MetricsFile {
            schema_version: METRICS_SCHEMA_VERSION,
            metrics: self.metrics.clone(),
            scaling_log: self.scaling_log.clone(),
        }
    }

    pub fn metrics_json(&self) -> String {
        serde_json::to_string_pretty(&self.metrics_file()).expect("metrics serialize")
    }
}

struct Checker {
    max_vms: usize,
    max_local: usize,
    last_revision: Option<u64>,
    max_jobs_per_vm: usize,
    count: u64,
    recorded: Vec<String>,
}

impl Checker {
    fn violation(&mut self, at: Timestamp, msg: String) {
        self.count += 1;
        if self.recorded.len() < MAX_RECORDED_VIOLATIONS {
            self.recorded.push(format!("{at}: {msg}"));
        }
    }

    fn check(&mut self, store: &Store, agents: &VirtualAgents, submitted: u64, now: Timestamp) {
        let rev = store.revision();
        if self.last_revision == Some(rev) {
            return;
        }
        self.last_revision = Some(rev);
        let jobs = store.jobs_where(|_| true);
        let vms = store.vm_list(None);
        let mut per_vm: BTreeMap<_, usize> = BTreeMap::new();
        let mut terminal = 0u64;
        let mut local_running = 0usize;
        for j in &jobs {
            if let Err(e) = j.check_invariants() {
                self.violation(now, e);
            }
            if j.state.is_terminal() {
                terminal += 1;
            }
            if j.state == JobState::Running {
                match j.backend {
                    Backend::Cloud => *per_vm.entry(j.assigned_vm).or_default() += 1,
                    Backend::Local => local_running += 1,
                    Backend::Grid => {}
                }
            }
        }
        let worst = per_vm.values().copied().max().unwrap_or(0);
        self.max_jobs_per_vm = self.max_jobs_per_vm.max(worst);
        if worst > 1 {
            self.violation(now, format!("{worst} jobs running on one VM"));
        }
        if local_running > self.max_local {
            self.violation(now, format!("{local_running} local jobs running"));
        }
        if terminal > submitted {
            self.violation(
                now,
                format!("{terminal} terminal jobs but {submitted} submitted"),
            );
        }
        let live = vms.iter().filter(|v| v.state.is_live()).count();
        if live > self.max_vms {
            self.violation(now, format!("{live} live VMs above max {}", self.max_vms));
        }
        for v in vms.iter().filter(|v| v.state == VmState::Busy) {
            if let Some(job) = v.current_job {
                let other = jobs.iter().any(|j| {
                    j.id != job && j.state == JobState::Running && j.assigned_vm == Some(v.id)
                });
                if other {
                    self.violation(now, format!("{} runs a job other than {job}", v.id));
                }
            }
        }
        let busy_vms = vms.iter().filter(|v| v.state == VmState::Busy).count();
        if agents.running() > busy_vms {
            self.violation(
                now,
                format!(
                    "{} agents executing but only {busy_vms} VMs busy",
                    agents.running()
                ),
            );
        }
    }
}

fn aligned(now: Timestamp, start: Timestamp, every: Duration) -> bool {
    let every = every.as_millis() as u64;
    every == 0 || (now.0 - start.0).is_multiple_of(every)
}

fn wait_stats(mut waits: Vec<f64>) -> (f64, f64) {
    if waits.is_empty() {
        return (0.0, 0.0);
    }
    waits.sort_by(f64::total_cmp);
    let mean = waits.iter().sum::<f64>() / waits.len() as f64;
    let rank = ((0.95 * waits.len() as f64).ceil() as usize).clamp(1, waits.len());
    (mean, waits[rank - 1])
}

/// Runs `schedule` (sorted by time) from `start`. Identical inputs give
/// identical reports whatever `accel` is.
pub fn run_simulation(
    schedule: &[Arrival],
    start: Timestamp,
    cfg: &SimConfig,
    accel: Acceleration,
) -> Result<SimReport, String> {
    cfg.validate()?;
    if let Acceleration::Factor(x) = accel {
        if !(x >= 1.0) {
            return Err("acceleration must be at least 1".into());
        }
    }
    if schedule.windows(2).any(|w| w[0].at > w[1].at) {
        return Err("schedule must be sorted by arrival time".into());
    }

    let clock = Arc::new(ManualClock::new(start));
    let dyn_clock: Arc<dyn Clock> = clock.clone();
    let dir = tempfile::tempdir().map_err(|e| format!("sim workspace: {e}"))?;
    let workspace = Workspace::new(dir.path()).map_err(|e| format!("sim workspace: {e}"))?;
    let store = Arc::new(Store::in_memory(dyn_clock.clone()));

    let agents = Arc::new(VirtualAgents::new(dyn_clock.clone(), cfg.push_latency));
    let cloud = Arc::new(SimCloud::new(
        dyn_clock.clone(),
        cfg.simcloud.clone(),
        agents.clone(),
    ));
    let pool = Arc::new(VmPool::new(
        store.clone(),
        cloud.clone(),
        agents.clone(),
        cfg.scaling.clone(),
        dyn_clock.clone(),
        Box::new(ChaCha8Rng::seed_from_u64(cfg.simcloud.seed.wrapping_add(1))),
    ));
    let queue = QueueManager::new(
        store.clone(),
        pool.clone(),
        workspace.clone(),
        cfg.dispatch.clone(),
        "sim://manager",
    );
    let local_pool = Arc::new(VirtualPool::new(dyn_clock.clone()));
    let prepare_pool = Arc::new(VirtualPool::new(dyn_clock.clone()));
    let grid = Arc::new(SimGrid::new(cfg.simgrid.clone()));
    let scheduler = Arc::new(LocalScheduler::new(
        store.clone(),
        workspace.clone(),
        cfg.local.clone(),
        dyn_clock.clone(),
        local_pool.clone(),
        prepare_pool.clone(),
        grid,
    ));
    let service = JobService::new(
        store.clone(),
        workspace,
        cfg.service.clone(),
        dyn_clock.clone(),
        Some(pool.clone()),
        Some(scheduler.clone()),
    );

    let mut checker = Checker {
        max_vms: cfg.scaling.max_vms as usize,
        max_local: cfg.local.max_local_jobs,
        last_revision: None,
        max_jobs_per_vm: 0,
        count: 0,
        recorded: Vec::new(),
    };
    let step_ms = cfg.step.as_millis() as u64;
    let last_arrival = schedule.last().map_or(start, |a| a.at);
    let deadline = last_arrival.plus(cfg.drain_limit);
    let wall_start = Instant::now();
    let mut next = 0usize;
    let mut submitted = 0u64;
    let mut rejected = 0u64;
    let mut push_errors = 0u64;
    let mut now = start;

    loop {
        clock.set(now);
        if let Acceleration::Factor(x) = accel {
            let target = Duration::from_secs_f64(now.since(start).as_secs_f64() / x);
            if let Some(ahead) = target.checked_sub(wall_start.elapsed()) {
                std::thread::sleep(ahead);
            }
        }

        while next < schedule.len() && schedule[next].at <= now {
            match service.submit(schedule[next].submission()) {
                Ok(_) => submitted += 1,
                Err(e) => {
                    rejected += 1;
                    tracing::debug!(error = %e, "simulated submission rejected");
                }
            }
            next += 1;
        }
        local_pool.run_due(now);
        prepare_pool.run_due(now);
        for d in agents.due_deliveries(now) {
            if service
                .receive_results(d.bundle.job_id, &d.token, d.bundle)
                .is_err()
            {
                push_errors += 1;
            }
        }
        if aligned(now, start, cfg.dispatch.poll_interval) {
            queue.cloud_step(now);
        }
        scheduler.tick(now);
        if aligned(now, start, cfg.local.remote_poll_interval) {
            scheduler.remote_poll_tick(now);
        }
        checker.check(&store, &agents, submitted, now);

        let all_arrived = next == schedule.len();
        let open_jobs = !store.jobs_where(|j| !j.state.is_terminal()).is_empty();
        let vms = store.vm_list(None);
        let live: Vec<_> = vms.iter().filter(|v| v.state.is_live()).collect();
        let pending = local_pool.next_due().is_some()
            || prepare_pool.next_due().is_some()
            || agents.next_due().is_some();
        let settled = !open_jobs
            && !pending
            && live.len() <= cfg.scaling.min_vms as usize
            && live.iter().all(|v| v.state == VmState::Idle);
        if all_arrived && settled {
            break;
        }
        if now >= deadline {
            break;
        }
        let mut following = now.0 + step_ms;
        if !open_jobs && !pending && live.is_empty() {
            if let Some(a) = schedule.get(next) {
                // Jump to the first step at or after the next arrival.
                let k = (a.at.0.saturating_sub(start.0)).div_ceil(step_ms);
                following = following.max(start.0 + k * step_ms);
            }
        }
        now = Timestamp(following);
    }

    pool.drain(now);
    let jobs = store.jobs_where(|_| true);
    let vms = store.vm_list(None);
    let ledger = build_ledger(&vms, &jobs, now, &cfg.scaling);
    let trace = queue.trace();
    let exec_trace = scheduler.trace();

    let mut per_backend: BTreeMap<Backend, (BackendMetrics, Vec<f64>)> = BTreeMap::new();
    let mut all_waits = Vec::new();
    for j in &jobs {
        let (m, waits) = per_backend.entry(j.backend).or_default();
        m.submitted += 1;
        match j.state {
            JobState::Completed => m.completed += 1,
            JobState::Failed => m.failed += 1,
            JobState::Cancelled => m.cancelled += 1,
            _ => m.unfinished += 1,
        }
        let started = j.first_started_at.unwrap_or(now);
        let w = started.since(j.submitted_at).as_secs_f64();
        waits.push(w);
        all_waits.push(w);
    }
    let per_backend: BTreeMap<Backend, BackendMetrics> = per_backend
        .into_iter()
        .map(|(b, (mut m, waits))| {
            (m.mean_wait_s, m.p95_wait_s) = wait_stats(waits);
            (b, m)
        })
        .collect();
    let (mean_wait_s, p95_wait_s) = wait_stats(all_waits);
    let sum = |f: fn(&BackendMetrics) -> u64| per_backend.values().map(f).sum::<u64>();
    let uptime = ledger.vms.iter().fold(0.0, |acc, b| acc + b.uptime_s);
    let busy = ledger.vms.iter().fold(0.0, |acc, b| acc + b.busy_s);
    let count_outcome = |o: DispatchOutcome| {
        trace
            .iter()
            .filter(
                |t| matches!(t.action, DispatchAction::Dispatch { outcome, .. } if outcome == o),
            )
            .count() as u64
    };

    let metrics = SimMetrics {
        start,
        end: now,
        virtual_seconds: now.since(start).as_secs_f64(),
        jobs_submitted: submitted,
        jobs_rejected: rejected,
        jobs_completed: sum(|m| m.completed),
        jobs_failed: sum(|m| m.failed),
        jobs_cancelled: sum(|m| m.cancelled),
        jobs_unfinished: sum(|m| m.unfinished),
        mean_wait_s,
        p95_wait_s,
        per_backend,
        vms_launched: pool.launches(),
        launch_failures: pool.launch_failures(),
        vm_busy_fraction: if uptime > 0.0 {
            (busy / uptime).min(1.0)
        } else {
            0.0
        },
        billed_periods: ledger.total_periods,
        total_cost: ledger.total_cost,
        max_jobs_per_vm: checker.max_jobs_per_vm,
        max_local_concurrency: max_local_concurrency(&exec_trace),
        busy_rejections: count_outcome(DispatchOutcome::Busy),
        unreachable_dispatches: count_outcome(DispatchOutcome::Unreachable),
        push_errors,
        invariant_violation_count: checker.count,
        invariant_violations: checker.recorded,
    };
    Ok(SimReport {
        metrics,
        scaling_log: pool.decisions(),
        dispatch_trace: trace,
        exec_trace,
        ledger,
        jobs,
    })
}
