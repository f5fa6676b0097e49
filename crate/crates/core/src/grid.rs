//! The local/grid tier: a bounded local run pool, a bounded remote
//! preparation pool, and a polling loop over a simulated grid.
//!
//! Work handed to a `TaskPool` runs in two phases. The work function does
//! the (possibly slow) part against a clock and returns a completion that
//! commits the effects. `WorkerPool` runs both back to back on worker
//! threads; `VirtualPool` runs the work at once against a recording clock
//! and holds the completion until the virtual time it represents has
//! passed. The scheduler code is the same in both cases.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::mpsc;
use std::sync::{Arc, Mutex, MutexGuard};
use std::thread;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use crate::clock::{CancelToken, Clock, RecordingClock, Timestamp};
use crate::kernels::{run_kernel, ExitStatus, Files, KernelResult};
use crate::model::{Backend, JobEvent, JobId, JobKind, JobRecord, JobState};
use crate::protocol::ResultBundle;
use crate::store::{Actor, Store, StoreError};
use crate::workspace::Workspace;

pub type Completion = Box<dyn FnOnce() + Send>;
pub type Work = Box<dyn FnOnce(&dyn Clock) -> Completion + Send>;

pub trait TaskPool: Send + Sync {
    fn spawn(&self, work: Work);
    /// Tasks spawned and not yet completed.
    fn in_flight(&self) -> usize;
}

/// Fixed set of worker threads fed from a channel.
pub struct WorkerPool {
    tx: Mutex<Option<mpsc::Sender<Work>>>,
    in_flight: Arc<AtomicUsize>,
    workers: Mutex<Vec<thread::JoinHandle<()>>>,
}

impl WorkerPool {
    pub fn new(name: &str, size: usize, clock: Arc<dyn Clock>) -> Self {
        let (tx, rx) = mpsc::channel::<Work>();
        let rx = Arc::new(Mutex::new(rx));
        let in_flight = Arc::new(AtomicUsize::new(0));
        let workers = (0..size.max(1))
            .map(|i| {
                let rx = rx.clone();
                let clock = clock.clone();
                let in_flight = in_flight.clone();
                thread::Builder::new()
                    .name(format!("{name}-{i}"))
                    .spawn(move || loop {
                        let next = rx.lock().unwrap_or_else(|p| p.into_inner()).recv();
                        let Ok(work) = next else { break };
                        let completion = work(&*clock);
                        completion();
                        in_flight.fetch_sub(1, Ordering::SeqCst);
                    })
                    .expect("spawn worker thread")
            })
            .collect();
        WorkerPool {
            tx: Mutex::new(Some(tx)),
            in_flight,
            workers: Mutex::new(workers),
        }
    }

    /// Stops accepting work and waits for queued work to finish.
    pub fn shutdown(&self) {
        self.tx.lock().unwrap_or_else(|p| p.into_inner()).take();
        for w in self
            .workers
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .drain(..)
        {
            let _ = w.join();
        }
    }
}

impl Drop for WorkerPool {
    fn drop(&mut self) {
        self.tx.lock().unwrap_or_else(|p| p.into_inner()).take();
    }
}

impl TaskPool for WorkerPool {
    fn spawn(&self, work: Work) {
        let tx = self.tx.lock().unwrap_or_else(|p| p.into_inner());
        if let Some(tx) = tx.as_ref() {
            self.in_flight.fetch_add(1, Ordering::SeqCst);
            if tx.send(work).is_err() {
                self.in_flight.fetch_sub(1, Ordering::SeqCst);
            }
        }
    }

    fn in_flight(&self) -> usize {
        self.in_flight.load(Ordering::SeqCst)
    }
}

struct Pending {
    due: Timestamp,
    seq: u64,
    completion: Completion,
}

/// Deterministic pool for virtual time.
pub struct VirtualPool {
    clock: Arc<dyn Clock>,
    seq: AtomicU64,
    pending: Mutex<Vec<Pending>>,
}

impl VirtualPool {
    pub fn new(clock: Arc<dyn Clock>) -> Self {
        VirtualPool {
            clock,
            seq: AtomicU64::new(0),
            pending: Mutex::new(Vec::new()),
        }
    }

    fn pending(&self) -> MutexGuard<'_, Vec<Pending>> {
        self.pending.lock().unwrap_or_else(|p| p.into_inner())
    }

    /// Runs every completion due at or before `now`, in due order.
    pub fn run_due(&self, now: Timestamp) -> usize {
        let mut due = {
            let mut pending = self.pending();
            let (due, rest): (Vec<_>, Vec<_>) = pending.drain(..).partition(|p| p.due <= now);
            *pending = rest;
            due
        };
        due.sort_by_key(|p| (p.due, p.seq));
        let n = due.len();
        for p in due {
            (p.completion)();
        }
        n
    }

    pub fn next_due(&self) -> Option<Timestamp> {
        self.pending().iter().map(|p| p.due).min()
    }
}

impl TaskPool for VirtualPool {
    fn spawn(&self, work: Work) {
        let rc = RecordingClock::new(self.clock.now());
        let completion = work(&rc);
        let due = rc.now();
        let seq = self.seq.fetch_add(1, Ordering::SeqCst);
        self.pending().push(Pending {
            due,
            seq,
            completion,
        });
    }

    fn in_flight(&self) -> usize {
        self.pending().len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyModel {
    pub small: Duration,
    pub large: Duration,
    /// Inputs at or above this size take the large latency.
    pub size_cutoff_bytes: u64,
}

impl LatencyModel {
    pub fn for_size(&self, input_bytes: u64) -> Duration {
        if input_bytes >= self.size_cutoff_bytes {
            self.large
        } else {
            self.small
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalSchedulerConfig {
    pub max_local_jobs: usize,
    pub prepare_pool_size: usize,
    pub remote_poll_interval: Duration,
    pub submit_latency: LatencyModel,
    /// Probability that a grid submission times out.
    pub submit_timeout_prob: f64,
    pub max_attempts: u32,
    pub seed: u64,
}

impl Default for LocalSchedulerConfig {
    fn default() -> Self {
        LocalSchedulerConfig {
            max_local_jobs: 1,
            prepare_pool_size: 1,
            remote_poll_interval: Duration::from_secs(30),
            submit_latency: LatencyModel {
                small: Duration::from_secs(1),
                large: Duration::from_secs(10),
                size_cutoff_bytes: 1 << 20,
            },
            submit_timeout_prob: 0.0,
            max_attempts: 2,
            seed: 1,
        }
    }
}

impl LocalSchedulerConfig {
    /// Clamps `max_local_jobs` to `1..=cores-1`.
    pub fn clamped(mut self, cores: usize) -> Self {
        self.max_local_jobs = self.max_local_jobs.clamp(1, cores.saturating_sub(1).max(1));
        self.prepare_pool_size = self.prepare_pool_size.max(1);
        self
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.remote_poll_interval.is_zero() {
            return Err("remote_poll_interval must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.submit_timeout_prob) {
            return Err("submit_timeout_prob must be in [0, 1]".into());
        }
        Ok(())
    }
}

pub fn available_cores() -> usize {
    thread::available_parallelism().map_or(2, |n| n.get())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GridStatus {
    Queued,
    Running,
    Finished,
    Cancelled,
    Failed,
}

impl GridStatus {
    pub fn is_terminal(self) -> bool {
        matches!(
            self,
            GridStatus::Finished | GridStatus::Cancelled | GridStatus::Failed
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridJobHandle {
    pub remote_id: String,
    pub submitted_at: Timestamp,
    pub status: GridStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum GridDuration {
    /// Run time is whatever the kernel takes on the clock.
    Kernel,
    /// Log-normal run time, for capacity studies.
    Synthetic { median: Duration, sigma: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimGridConfig {
    pub queue_wait_min: Duration,
    pub queue_wait_max: Duration,
    pub duration: GridDuration,
    pub seed: u64,
}

impl Default for SimGridConfig {
    fn default() -> Self {
        SimGridConfig {
            queue_wait_min: Duration::from_secs(5),
            queue_wait_max: Duration::from_secs(5),
            duration: GridDuration::Kernel,
            seed: 1,
        }
    }
}

impl SimGridConfig {
    pub fn synthetic() -> GridDuration {
        GridDuration::Synthetic {
            median: Duration::from_secs(600),
            sigma: 1.0,
        }
    }
}

struct GridJob {
    submitted_at: Timestamp,
    start_at: Timestamp,
    end_at: Timestamp,
    cancelled_at: Option<Timestamp>,
    result: KernelResult,
}

impl GridJob {
    fn status(&self, now: Timestamp) -> GridStatus {
        if let Some(c) = self.cancelled_at {
            if c <= now && c < self.end_at {
                return GridStatus::Cancelled;
            }
        }
        if now < self.start_at {
            GridStatus::Queued
        } else if now < self.end_at {
            GridStatus::Running
        } else if self.result.exit_status == ExitStatus::Ok {
            GridStatus::Finished
        } else {
            GridStatus::Failed
        }
    }
}

/// Stand-in for a remote batch grid. Job progress is a function of the
/// clock, so it works the same under real and virtual time.
pub struct SimGrid {
    cfg: SimGridConfig,
    rng: Mutex<ChaCha8Rng>,
    jobs: Mutex<BTreeMap<String, GridJob>>,
    next: AtomicU64,
}

impl SimGrid {
    pub fn new(cfg: SimGridConfig) -> Self {
        SimGrid {
            rng: Mutex::new(ChaCha8Rng::seed_from_u64(cfg.seed)),
            cfg,
            jobs: Mutex::new(BTreeMap::new()),
            next: AtomicU64::new(1),
        }
    }

    fn jobs(&self) -> MutexGuard<'_, BTreeMap<String, GridJob>> {
        self.jobs.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn submit(
        &self,
        kind: JobKind,
        params: &BTreeMap<String, String>,
        inputs: &Files,
        now: Timestamp,
    ) -> GridJobHandle {
        let rc = RecordingClock::new(now);
        let result = run_kernel(kind, params, inputs, &rc, &CancelToken::new())
            .expect("uncancelled kernel finishes");
        let (wait, run) = {
            let mut rng = self.rng.lock().unwrap_or_else(|p| p.into_inner());
            let lo = self.cfg.queue_wait_min.as_millis() as u64;
            let hi = (self.cfg.queue_wait_max.as_millis() as u64).max(lo);
            let wait = Duration::from_millis(rng.random_range(lo..=hi));
            let run = match &self.cfg.duration {
                GridDuration::Kernel => rc.elapsed(),
                GridDuration::Synthetic { median, sigma } => {
                    let d = LogNormal::new(median.as_secs_f64().ln(), *sigma)
                        .expect("valid log-normal parameters");
                    Duration::from_secs_f64(d.sample(&mut *rng))
                }
            };
            (wait, run)
        };
        let remote_id = format!("grid-{}", self.next.fetch_add(1, Ordering::SeqCst));
        let start_at = now.plus(wait);
        self.jobs().insert(
            remote_id.clone(),
            GridJob {
                submitted_at: now,
                start_at,
                end_at: start_at.plus(run),
                cancelled_at: None,
                result,
            },
        );
        GridJobHandle {
            remote_id,
            submitted_at: now,
            status: GridStatus::Queued,
        }
    }

    pub fn handle(&self, remote_id: &str, now: Timestamp) -> Option<GridJobHandle> {
        self.jobs().get(remote_id).map(|j| GridJobHandle {
            remote_id: remote_id.to_string(),
            submitted_at: j.submitted_at,
            status: j.status(now),
        })
    }

    /// When the job reached a terminal status, if it has.
    pub fn terminal_at(&self, remote_id: &str, now: Timestamp) -> Option<Timestamp> {
        let jobs = self.jobs();
        let j = jobs.get(remote_id)?;
        match j.status(now) {
            GridStatus::Cancelled => j.cancelled_at,
            GridStatus::Finished | GridStatus::Failed => Some(j.end_at),
            _ => None,
        }
    }

    /// Returns false if the job was already terminal.
    pub fn cancel(&self, remote_id: &str, now: Timestamp) -> bool {
        let mut jobs = self.jobs();
        let Some(j) = jobs.get_mut(remote_id) else {
            return false;
        };
        if j.status(now).is_terminal() {
            return false;
        }
        j.cancelled_at = Some(now);
        true
    }

    pub fn download(&self, remote_id: &str) -> Option<KernelResult> {
        self.jobs().get(remote_id).map(|j| j.result.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "kebab-case")]
pub enum GridAction {
    LocalStart { job: JobId },
    Prepare { job: JobId, latency_s: f64 },
    Finalized { job: JobId, state: JobState },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExecPhase {
    LocalStart,
    LocalEnd,
    PrepareStart,
    PrepareEnd,
    GridSubmitted,
    SubmitTimeout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecEvent {
    pub at: Timestamp,
    pub job: JobId,
    pub phase: ExecPhase,
}

/// Highest number of simultaneously running local kernels in a trace.
pub fn max_local_concurrency(trace: &[ExecEvent]) -> usize {
    let mut events: Vec<(Timestamp, i32)> = trace
        .iter()
        .filter_map(|e| match e.phase {
            ExecPhase::LocalStart => Some((e.at, 1)),
            ExecPhase::LocalEnd => Some((e.at, -1)),
            _ => None,
        })
        .collect();
    // Ends sort before starts at the same instant.
    events.sort();
    let (mut cur, mut max) = (0i32, 0i32);
    for (_, d) in events {
        cur += d;
        max = max.max(cur);
    }
    max as usize
}

type Trace = Arc<Mutex<Vec<ExecEvent>>>;

fn record(trace: &Trace, at: Timestamp, job: JobId, phase: ExecPhase) {
    trace
        .lock()
        .unwrap_or_else(|p| p.into_inner())
        .push(ExecEvent { at, job, phase });
}

/// Writes a kernel result into the workspace and finishes the job.
/// Returns the new state, or None if the job had moved on (cancelled).
pub(crate) fn commit_result(
    store: &Store,
    workspace: &Workspace,
    actor: Actor,
    job: JobId,
    result: KernelResult,
    now: Timestamp,
) -> Option<JobState> {
    if store.job(job).is_none_or(|j| j.state != JobState::Running) {
        return None;
    }
    let bundle = ResultBundle::from_kernel(job, result);
    let digest = bundle.digest();
    let stored = workspace
        .write_outputs(job, &bundle.outputs)
        .and_then(|r| workspace.write_log(job, &bundle.log_text).map(|_| r));
    let res = store.update_job(job, actor, "results stored", |j| {
        if j.state != JobState::Running {
            return Err(StoreError::Invalid("no longer running".into()));
        }
        match (&stored, bundle.exit_status) {
            (Ok(r), ExitStatus::Ok) => {
                j.result_ref = Some(r.clone());
                j.result_digest = Some(digest.clone());
                j.apply(JobEvent::ResultsReceived, now)?;
            }
            (Ok(r), ExitStatus::Error) => {
                j.result_ref = Some(r.clone());
                j.result_digest = Some(digest.clone());
                j.error = Some(bundle.log_text.clone());
                j.apply(JobEvent::Fail, now)?;
            }
            (Err(e), _) => {
                j.error = Some(format!("could not store results: {e}"));
                j.apply(JobEvent::Fail, now)?;
            }
        }
        Ok(())
    });
    res.ok().map(|j| j.state)
}

/// The local scheduler: local runs, grid preparation and grid polling.
pub struct LocalScheduler {
    store: Arc<Store>,
    workspace: Workspace,
    cfg: LocalSchedulerConfig,
    clock: Arc<dyn Clock>,
    local: Arc<dyn TaskPool>,
    prepare: Arc<dyn TaskPool>,
    grid: Arc<SimGrid>,
    rng: Mutex<ChaCha8Rng>,
    trace: Trace,
    cancels: Arc<Mutex<BTreeMap<JobId, Arc<CancelToken>>>>,
    admit_lock: Mutex<()>,
    poll_lock: Mutex<()>,
}

impl LocalScheduler {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: Arc<Store>,
        workspace: Workspace,
        cfg: LocalSchedulerConfig,
        clock: Arc<dyn Clock>,
        local: Arc<dyn TaskPool>,
        prepare: Arc<dyn TaskPool>,
        grid: Arc<SimGrid>,
    ) -> Self {
        LocalScheduler {
            rng: Mutex::new(ChaCha8Rng::seed_from_u64(cfg.seed)),
            store,
            workspace,
            cfg,
            clock,
            local,
            prepare,
            grid,
            trace: Arc::new(Mutex::new(Vec::new())),
            cancels: Arc::new(Mutex::new(BTreeMap::new())),
            admit_lock: Mutex::new(()),
            poll_lock: Mutex::new(()),
        }
    }

    pub fn config(&self) -> &LocalSchedulerConfig {
        &self.cfg
    }

    pub fn grid(&self) -> &Arc<SimGrid> {
        &self.grid
    }

    pub fn trace(&self) -> Vec<ExecEvent> {
        self.trace.lock().unwrap_or_else(|p| p.into_inner()).clone()
    }

    /// Admits queued Local and Grid jobs up to each pool's size.
    pub fn tick(&self, now: Timestamp) -> Vec<GridAction> {
        let _serial = self.admit_lock.lock().unwrap_or_else(|p| p.into_inner());
        let mut actions = Vec::new();
        while self.local.in_flight() < self.cfg.max_local_jobs {
            let Some(job) = self.store.next_queued(Some(Backend::Local)) else {
                break;
            };
            if self.start_local(&job, now) {
                actions.push(GridAction::LocalStart { job: job.id });
            }
        }
        while self.prepare.in_flight() < self.cfg.prepare_pool_size {
            let Some(job) = self.store.next_queued(Some(Backend::Grid)) else {
                break;
            };
            if let Some(latency) = self.start_prepare(&job, now) {
                actions.push(GridAction::Prepare {
                    job: job.id,
                    latency_s: latency.as_secs_f64(),
                });
            }
        }
        actions
    }

    fn start_local(&self, job: &JobRecord, now: Timestamp) -> bool {
        let inputs = match self.workspace.read_inputs(job.id) {
            Ok(i) => i,
            Err(e) => {
                let _ = self
                    .store
                    .update_job(job.id, Actor::Scheduler, "inputs missing", |j| {
                        j.error = Some(format!("staged inputs unreadable: {e}"));
                        j.apply(JobEvent::Fail, now)?;
                        Ok(())
                    });
                return false;
            }
        };
        if self
            .store
            .apply_event(job.id, Actor::Scheduler, JobEvent::Dispatch, now)
            .is_err()
        {
            return false;
        }
        let cancel = Arc::new(CancelToken::new());
        self.cancels
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .insert(job.id, cancel.clone());
        let (store, workspace, trace, cancels) = (
            self.store.clone(),
            self.workspace.clone(),
            self.trace.clone(),
            self.cancels.clone(),
        );
        let (id, kind, params) = (job.id, job.spec.kind, job.spec.params.clone());
        self.local.spawn(Box::new(move |clock: &dyn Clock| {
            record(&trace, clock.now(), id, ExecPhase::LocalStart);
            let result = run_kernel(kind, &params, &inputs, clock, &cancel);
            let end = clock.now();
            Box::new(move || {
                cancels
                    .lock()
                    .unwrap_or_else(|p| p.into_inner())
                    .remove(&id);
                if let Some(result) = result {
                    commit_result(&store, &workspace, Actor::Scheduler, id, result, end);
                }
                record(&trace, end, id, ExecPhase::LocalEnd);
            })
        }));
        true
    }

    fn start_prepare(&self, job: &JobRecord, now: Timestamp) -> Option<Duration> {
        if self
            .store
            .apply_event(job.id, Actor::Scheduler, JobEvent::PrepareRemote, now)
            .is_err()
        {
            return None;
        }
        let latency = self
            .cfg
            .submit_latency
            .for_size(job.spec.profile.input_bytes);
        let times_out = self.cfg.submit_timeout_prob > 0.0
            && self
                .rng
                .lock()
                .unwrap_or_else(|p| p.into_inner())
                .random_bool(self.cfg.submit_timeout_prob);
        let (store, workspace, trace, grid) = (
            self.store.clone(),
            self.workspace.clone(),
            self.trace.clone(),
            self.grid.clone(),
        );
        let max_attempts = self.cfg.max_attempts;
        let (id, kind, params) = (job.id, job.spec.kind, job.spec.params.clone());
        self.prepare.spawn(Box::new(move |clock: &dyn Clock| {
            record(&trace, clock.now(), id, ExecPhase::PrepareStart);
            let inputs = workspace.read_inputs(id);
            clock.sleep(latency);
            let end = clock.now();
            Box::new(move || {
                record(&trace, end, id, ExecPhase::PrepareEnd);
                if store.job(id).is_none_or(|j| j.state != JobState::Preparing) {
                    return;
                }
                let inputs = match inputs {
                    Ok(i) if !times_out => i,
                    other => {
                        let reason = match other {
                            Err(e) => format!("staged inputs unreadable: {e}"),
                            Ok(_) => "grid submission timed out".to_string(),
                        };
                        record(&trace, end, id, ExecPhase::SubmitTimeout);
                        let _ = store.update_job(id, Actor::Scheduler, reason.clone(), |j| {
                            j.attempt_count += 1;
                            if j.attempt_count <= max_attempts {
                                j.apply(JobEvent::Requeue, end)?;
                            } else {
                                j.error =
                                    Some(format!("{reason} after {} attempts", j.attempt_count));
                                j.apply(JobEvent::Fail, end)?;
                            }
                            Ok(())
                        });
                        return;
                    }
                };
                let handle = grid.submit(kind, &params, &inputs, end);
                let placed = store.update_job(
                    id,
                    Actor::Scheduler,
                    format!("on grid as {}", handle.remote_id),
                    |j| {
                        j.apply(JobEvent::Dispatch, end)?;
                        j.grid_handle = Some(handle.remote_id.clone());
                        Ok(())
                    },
                );
                if placed.is_err() {
                    grid.cancel(&handle.remote_id, end);
                }
                record(&trace, end, id, ExecPhase::GridSubmitted);
            })
        }));
        Some(latency)
    }

    /// Refreshes every grid job and finalizes those that ended.
    pub fn remote_poll_tick(&self, now: Timestamp) -> Vec<GridAction> {
        let _serial = self.poll_lock.lock().unwrap_or_else(|p| p.into_inner());
        let mut actions = Vec::new();
        let remote = self.store.jobs_where(|j| {
            j.backend == Backend::Grid && j.state == JobState::Running && j.grid_handle.is_some()
        });
        for job in remote {
            let remote_id = job.grid_handle.clone().expect("filtered");
            let Some(handle) = self.grid.handle(&remote_id, now) else {
                let _ = self
                    .store
                    .update_job(job.id, Actor::Scheduler, "grid lost the job", |j| {
                        j.error = Some(format!("grid has no job {remote_id}"));
                        j.apply(JobEvent::Fail, now)?;
                        Ok(())
                    });
                continue;
            };
            let state = match handle.status {
                GridStatus::Queued | GridStatus::Running => continue,
                GridStatus::Finished | GridStatus::Failed => {
                    let Some(result) = self.grid.download(&remote_id) else {
                        continue;
                    };
                    commit_result(
                        &self.store,
                        &self.workspace,
                        Actor::Scheduler,
                        job.id,
                        result,
                        now,
                    )
                }
                GridStatus::Cancelled => self
                    .store
                    .apply_event(job.id, Actor::Scheduler, JobEvent::Cancel, now)
                    .ok()
                    .map(|j| j.state),
            };
            if let Some(state) = state {
                actions.push(GridAction::Finalized { job: job.id, state });
            }
        }
        actions
    }

    /// Best-effort abort of a local or grid execution.
    pub fn abort(&self, job: &JobRecord) {
        let now = self.clock.now();
        if let Some(c) = self
            .cancels
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .get(&job.id)
        {
            c.cancel();
        }
        if let Some(remote_id) = &job.grid_handle {
            self.grid.cancel(remote_id, now);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::ManualClock;

    #[test]
    fn latency_model_picks_by_size() {
        let m = LocalSchedulerConfig::default().submit_latency;
        assert_eq!(m.for_size(10), Duration::from_secs(1));
        assert_eq!(m.for_size(1 << 20), Duration::from_secs(10));
    }

    #[test]
    fn clamps_local_jobs() {
        let c = LocalSchedulerConfig {
            max_local_jobs: 50,
            ..Default::default()
        };
        assert_eq!(c.clone().clamped(8).max_local_jobs, 7);
        assert_eq!(c.clamped(1).max_local_jobs, 1);
        let c = LocalSchedulerConfig {
            max_local_jobs: 0,
            ..Default::default()
        };
        assert_eq!(c.clamped(8).max_local_jobs, 1);
    }

    #[test]
    fn concurrency_from_trace() {
        let ev = |s, job, phase| ExecEvent {
            at: Timestamp::from_secs(s),
            job: JobId(job),
            phase,
        };
        let t = vec![
            ev(0, 1, ExecPhase::LocalStart),
            ev(10, 1, ExecPhase::LocalEnd),
            ev(10, 2, ExecPhase::LocalStart),
            ev(5, 3, ExecPhase::LocalStart),
            ev(12, 3, ExecPhase::LocalEnd),
            ev(20, 2, ExecPhase::LocalEnd),
        ];
        assert_eq!(max_local_concurrency(&t), 2);
    }

    #[test]
    fn virtual_pool_defers_by_slept_time() {
        let clock = Arc::new(ManualClock::new(Timestamp(0)));
        let pool = VirtualPool::new(clock.clone());
        let hits = Arc::new(Mutex::new(Vec::new()));
        for (i, secs) in [(1u64, 30u64), (2, 10)] {
            let hits = hits.clone();
            pool.spawn(Box::new(move |c: &dyn Clock| {
                c.sleep(Duration::from_secs(secs));
                let at = c.now();
                Box::new(move || hits.lock().unwrap().push((i, at)))
            }));
        }
        assert_eq!(pool.in_flight(), 2);
        assert_eq!(pool.next_due(), Some(Timestamp::from_secs(10)));
        assert_eq!(pool.run_due(Timestamp::from_secs(9)), 0);
        assert_eq!(pool.run_due(Timestamp::from_secs(40)), 2);
        assert_eq!(
            *hits.lock().unwrap(),
            vec![(2, Timestamp::from_secs(10)), (1, Timestamp::from_secs(30))]
        );
    }

    #[test]
    fn worker_pool_runs_work() {
        let clock: Arc<dyn Clock> = Arc::new(crate::clock::SystemClock);
        let pool = WorkerPool::new("t", 2, clock);
        let n = Arc::new(AtomicUsize::new(0));
        for _ in 0..5 {
            let n = n.clone();
            pool.spawn(Box::new(move |_c: &dyn Clock| {
                Box::new(move || {
                    n.fetch_add(1, Ordering::SeqCst);
                })
            }));
        }
        pool.shutdown();
        assert_eq!(n.load(Ordering::SeqCst), 5);
        assert_eq!(pool.in_flight(), 0);
    }

    #[test]
    fn grid_job_progresses_with_time() {
        let grid = SimGrid::new(SimGridConfig::default());
        let params = [("duration_ms".to_string(), "60000".to_string())].into();
        let h = grid.submit(JobKind::Sleep, &params, &Files::new(), Timestamp(0));
        let at = |s| {
            grid.handle(&h.remote_id, Timestamp::from_secs(s))
                .unwrap()
                .status
        };
        assert_eq!(at(1), GridStatus::Queued);
        assert_eq!(at(5), GridStatus::Running);
        assert_eq!(at(65), GridStatus::Finished);
        assert_eq!(
            grid.terminal_at(&h.remote_id, Timestamp::from_secs(100)),
            Some(Timestamp::from_secs(65))
        );
        assert!(!grid.cancel(&h.remote_id, Timestamp::from_secs(70)));
        assert!(grid
            .download(&h.remote_id)
            .unwrap()
            .outputs
            .contains_key("done.txt"));
    }

    #[test]
    fn grid_cancel_is_absorbing() {
        let grid = SimGrid::new(SimGridConfig::default());
        let params = [("duration_ms".to_string(), "60000".to_string())].into();
        let h = grid.submit(JobKind::Sleep, &params, &Files::new(), Timestamp(0));
        assert!(grid.cancel(&h.remote_id, Timestamp::from_secs(20)));
        let s = grid
            .handle(&h.remote_id, Timestamp::from_secs(100))
            .unwrap()
            .status;
        assert_eq!(s, GridStatus::Cancelled);
    }

    #[test]
    fn failing_kernel_fails_on_grid() {
        let grid = SimGrid::new(SimGridConfig::default());
        let params = [("fail".to_string(), "true".to_string())].into();
        let h = grid.submit(JobKind::Sleep, &params, &Files::new(), Timestamp(0));
        let s = grid
            .handle(&h.remote_id, Timestamp::from_secs(6))
            .unwrap()
            .status;
        assert_eq!(s, GridStatus::Failed);
    }

    #[test]
    fn synthetic_durations_are_seeded() {
        let cfg = SimGridConfig {
            duration: SimGridConfig::synthetic(),
            ..Default::default()
        };
        let ends = || {
            let g = SimGrid::new(cfg.clone());
            (0..5)
                .map(|_| {
                    let h = g.submit(
                        JobKind::Sleep,
                        &BTreeMap::new(),
                        &Files::new(),
                        Timestamp(0),
                    );
                    g.terminal_at(&h.remote_id, Timestamp(u64::MAX / 2))
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(ends(), ends());
    }
}
