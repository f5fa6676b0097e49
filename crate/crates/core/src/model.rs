//! Domain types shared by every component: job and VM records, the job
//! lifecycle state machine, size-based routing and the memory model.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::clock::Timestamp;

macro_rules! string_id {
    ($name:ident, $prefix:literal) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
        pub struct $name(pub u64);

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, concat!($prefix, "{}"), self.0)
            }
        }

        impl FromStr for $name {
            type Err = String;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                let digits = s.strip_prefix($prefix).unwrap_or(s);
                digits
                    .parse::<u64>()
                    .map($name)
                    .map_err(|_| format!("malformed id {s:?}"))
            }
        }

        impl Serialize for $name {
            fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                s.collect_str(self)
            }
        }

        impl<'de> Deserialize<'de> for $name {
            fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                let s = String::deserialize(d)?;
                s.parse().map_err(serde::de::Error::custom)
            }
        }
    };
}

string_id!(JobId, "j");
string_id!(VmId, "vm");

/// Execution tier a job is routed to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Backend {
    Local,
    Grid,
    Cloud,
}

impl Backend {
    pub const ALL: [Backend; 3] = [Backend::Local, Backend::Grid, Backend::Cloud];

    pub fn as_str(self) -> &'static str {
        match self {
            Backend::Local => "Local",
            Backend::Grid => "Grid",
            Backend::Cloud => "Cloud",
        }
    }
}

impl fmt::Display for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Backend {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "local" => Ok(Backend::Local),
            "grid" => Ok(Backend::Grid),
            "cloud" => Ok(Backend::Cloud),
            _ => Err(format!(
                "unknown backend {s:?} (expected Local, Grid or Cloud)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum JobKind {
    #[serde(rename = "sleep")]
    Sleep,
    #[serde(rename = "regression-scan")]
    RegressionScan,
}

impl JobKind {
    pub fn as_str(self) -> &'static str {
        match self {
            JobKind::Sleep => "sleep",
            JobKind::RegressionScan => "regression-scan",
        }
    }

    /// Input files that must be present before the kernel can run.
    pub fn required_inputs(self) -> &'static [&'static str] {
        match self {
            JobKind::Sleep => &[],
            JobKind::RegressionScan => &["geno.csv", "pheno.csv"],
        }
    }

    /// Output files a successful run always produces.
    pub fn required_outputs(self) -> &'static [&'static str] {
        match self {
            JobKind::Sleep => &["done.txt"],
            JobKind::RegressionScan => &["fprofile.tsv", "peak.json"],
        }
    }
}

impl fmt::Display for JobKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for JobKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sleep" => Ok(JobKind::Sleep),
            "regression-scan" => Ok(JobKind::RegressionScan),
            _ => Err(format!("unknown job type {s:?}")),
        }
    }
}

/// Size descriptors of a job's data set. `max_markers` (markers on the
/// largest chromosome) drives routing and the memory estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetProfile {
    pub max_markers: u32,
    pub sample_size: u32,
    pub input_bytes: u64,
}

impl DatasetProfile {
    pub fn new(max_markers: u32, sample_size: u32, input_bytes: u64) -> Result<Self, String> {
        let profile = DatasetProfile {
            max_markers,
            sample_size,
            input_bytes,
        };
        profile.validate()?;
        Ok(profile)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.max_markers < 1 {
            return Err("max_markers must be at least 1".into());
        }
        if self.sample_size < 1 {
            return Err("sample_size must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobSpec {
    pub kind: JobKind,
    #[serde(default)]
    pub params: BTreeMap<String, String>,
    /// Names of the staged input files.
    #[serde(default)]
    pub inputs: Vec<String>,
    pub profile: DatasetProfile,
    #[serde(default)]
    pub backend_override: Option<Backend>,
    #[serde(default)]
    pub derive_from: Option<JobId>,
    #[serde(default)]
    pub owner: String,
}

impl JobSpec {
    pub fn param(&self, key: &str) -> Option<&str> {
        self.params.get(key).map(String::as_str)
    }

    /// Checks that every input the kind needs is listed.
    pub fn check_inputs(&self) -> Result<(), String> {
        for needed in self.kind.required_inputs() {
            if !self.inputs.iter().any(|n| n == needed) {
                return Err(format!("{} job requires input file {needed}", self.kind));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum JobState {
    Queued,
    Preparing,
    Running,
    Completed,
    Failed,
    Cancelled,
}

impl JobState {
    pub const ALL: [JobState; 6] = [
        JobState::Queued,
        JobState::Preparing,
        JobState::Running,
        JobState::Completed,
        JobState::Failed,
        JobState::Cancelled,
    ];

    pub fn is_terminal(self) -> bool {
        matches!(
            self,
            JobState::Completed | JobState::Failed | JobState::Cancelled
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            JobState::Queued => "Queued",
            JobState::Preparing => "Preparing",
            JobState::Running => "Running",
            JobState::Completed => "Completed",
            JobState::Failed => "Failed",
            JobState::Cancelled => "Cancelled",
        }
    }
}

impl fmt::Display for JobState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for JobState {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        JobState::ALL
            .into_iter()
            .find(|st| st.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown job state {s:?}"))
    }
}

/// Inputs to the lifecycle state machine.
///
/// `Requeue` returns a job that lost its executor (dead VM, failed grid
/// submission, crash recovery) to the queue.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum JobEvent {
    PrepareRemote,
    Dispatch,
    ResultsReceived,
    Fail,
    Cancel,
    Requeue,
}

impl JobEvent {
    pub const ALL: [JobEvent; 6] = [
        JobEvent::PrepareRemote,
        JobEvent::Dispatch,
        JobEvent::ResultsReceived,
        JobEvent::Fail,
        JobEvent::Cancel,
        JobEvent::Requeue,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("illegal transition: {event:?} in state {state}")]
pub struct IllegalTransition {
    pub state: JobState,
    pub event: JobEvent,
}

/// The legal-transition table. Terminal states have no successors.
pub fn transition(state: JobState, event: JobEvent) -> Result<JobState, IllegalTransition> {
    use JobEvent as E;
    use JobState as S;
    let next = match (state, event) {
        (S::Queued, E::PrepareRemote) => S::Preparing,
        (S::Queued, E::Dispatch) => S::Running,
        (S::Queued, E::Fail) => S::Failed,
        (S::Queued, E::Cancel) => S::Cancelled,
        (S::Preparing, E::Dispatch) => S::Running,
        (S::Preparing, E::Fail) => S::Failed,
        (S::Preparing, E::Cancel) => S::Cancelled,
        (S::Preparing, E::Requeue) => S::Queued,
        (S::Running, E::ResultsReceived) => S::Completed,
        (S::Running, E::Fail) => S::Failed,
        (S::Running, E::Cancel) => S::Cancelled,
        (S::Running, E::Requeue) => S::Queued,
        _ => return Err(IllegalTransition { state, event }),
    };
    Ok(next)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoutingDecision {
    pub backend: Backend,
    pub est_memory_gb: f64,
    pub core_group: u32,
    pub oversize: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoutingConfig {
    pub local_marker_threshold: u32,
    pub big_memory_marker_threshold: u32,
    pub max_marker_capacity: u32,
    pub gb_per_core: f64,
    pub gb_at_threshold: f64,
    pub cloud_enabled: bool,
}

impl Default for RoutingConfig {
    fn default() -> Self {
        RoutingConfig {
            local_marker_threshold: 100,
            big_memory_marker_threshold: 1200,
            max_marker_capacity: 5000,
            gb_per_core: 4.0,
            gb_at_threshold: 4.0,
            cloud_enabled: true,
        }
    }
}

impl RoutingConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.local_marker_threshold < self.big_memory_marker_threshold
            && self.big_memory_marker_threshold < self.max_marker_capacity)
        {
            return Err("routing thresholds must satisfy local < big_memory < max_capacity".into());
        }
        if !(self.gb_per_core > 0.0) {
            return Err("gb_per_core must be positive".into());
        }
        if !(self.gb_at_threshold >= 0.0) {
            return Err("gb_at_threshold must be non-negative".into());
        }
        Ok(())
    }

    /// Tier for jobs above the local threshold.
    pub fn remote_tier(&self) -> Backend {
        if self.cloud_enabled {
            Backend::Cloud
        } else {
            Backend::Grid
        }
    }
}

/// Memory grows with the square of the marker count, anchored so that
/// `big_memory_marker_threshold` markers need `gb_at_threshold` GB.
pub fn estimate_memory_gb(max_markers: u32, cfg: &RoutingConfig) -> f64 {
    let ratio = f64::from(max_markers) / f64::from(cfg.big_memory_marker_threshold);
    cfg.gb_at_threshold * ratio * ratio
}

pub fn core_group_size(est_memory_gb: f64, cfg: &RoutingConfig) -> u32 {
    let cores = (est_memory_gb / cfg.gb_per_core).ceil();
    if cores.is_nan() || cores < 1.0 {
        1
    } else if cores >= f64::from(u32::MAX) {
        u32::MAX
    } else {
        cores as u32
    }
}

pub fn route(
    profile: &DatasetProfile,
    backend_override: Option<Backend>,
    cfg: &RoutingConfig,
) -> RoutingDecision {
    let est_memory_gb = estimate_memory_gb(profile.max_markers, cfg);
    let core_group = core_group_size(est_memory_gb, cfg);
    let oversize = profile.max_markers > cfg.max_marker_capacity;
    let sized = if profile.max_markers <= cfg.local_marker_threshold {
        Backend::Local
    } else {
        cfg.remote_tier()
    };
    RoutingDecision {
        backend: backend_override.unwrap_or(sized),
        est_memory_gb,
        core_group,
        oversize,
    }
}

/// Legend color for a job in the status view.
pub fn display_color(state: JobState, backend: Backend) -> &'static str {
    match (state, backend) {
        (JobState::Queued | JobState::Preparing, _) => "pink",
        (JobState::Running, _) => "orange",
        (JobState::Completed, Backend::Local) => "blue",
        (JobState::Completed, Backend::Grid) => "green",
        (JobState::Completed, Backend::Cloud) => "teal",
        (JobState::Failed, _) => "red",
        (JobState::Cancelled, _) => "gray",
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateStamp {
    pub state: JobState,
    pub at: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub id: JobId,
    pub spec: JobSpec,
    pub state: JobState,
    pub backend: Backend,
    pub routing: RoutingDecision,
    /// Executing VM. Kept after completion so late pushes can be matched.
    pub assigned_vm: Option<VmId>,
    /// Remote id on the grid tier while the job is on the remote list.
    #[serde(default)]
    pub grid_handle: Option<String>,
    pub submitted_at: Timestamp,
    pub started_at: Option<Timestamp>,
    pub finished_at: Option<Timestamp>,
    pub result_ref: Option<String>,
    /// Digest of the accepted result bundle, for idempotent re-pushes.
    #[serde(default)]
    pub result_digest: Option<String>,
    pub error: Option<String>,
    pub attempt_count: u32,
    /// Time of first dispatch; queue wait is measured up to here.
    #[serde(default)]
    pub first_started_at: Option<Timestamp>,
    #[serde(default)]
    pub history: Vec<StateStamp>,
}

impl JobRecord {
    /// A fresh Queued record. The store assigns the id on enqueue.
    pub fn new(spec: JobSpec, routing: RoutingDecision, now: Timestamp) -> Self {
        JobRecord {
            id: JobId::default(),
            backend: routing.backend,
            spec,
            state: JobState::Queued,
            routing,
            assigned_vm: None,
            grid_handle: None,
            submitted_at: now,
            started_at: None,
            finished_at: None,
            result_ref: None,
            result_digest: None,
            error: None,
            attempt_count: 0,
            first_started_at: None,
            history: vec![StateStamp {
                state: JobState::Queued,
                at: now,
            }],
        }
    }

    /// Applies a lifecycle event and maintains the timestamp invariants.
    pub fn apply(
        &mut self,
        event: JobEvent,
        now: Timestamp,
    ) -> Result<JobState, IllegalTransition> {
        let next = transition(self.state, event)?;
        match next {
            JobState::Running => {
                self.started_at = Some(now);
                self.first_started_at.get_or_insert(now);
            }
            JobState::Queued => {
                self.started_at = None;
                self.assigned_vm = None;
                self.grid_handle = None;
            }
            _ => {}
        }
        if next.is_terminal() {
            self.finished_at = Some(now);
        }
        self.state = next;
        self.history.push(StateStamp {
            state: next,
            at: now,
        });
        Ok(next)
    }

    pub fn color(&self) -> &'static str {
        display_color(self.state, self.backend)
    }

    /// Checks the record-level invariants.
    pub fn check_invariants(&self) -> Result<(), String> {
        if self.state == JobState::Running && self.started_at.is_none() {
            return Err(format!("{}: Running without started_at", self.id));
        }
        if self.state.is_terminal() && self.finished_at.is_none() {
            return Err(format!("{}: terminal without finished_at", self.id));
        }
        if self.backend == Backend::Cloud
            && self.state == JobState::Running
            && self.assigned_vm.is_none()
        {
            return Err(format!("{}: Running on Cloud without a VM", self.id));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum VmState {
    Booting,
    Idle,
    Busy,
    Lost,
    Terminating,
    Terminated,
}

impl VmState {
    pub fn is_live(self) -> bool {
        !matches!(self, VmState::Terminated)
    }
}

impl fmt::Display for VmState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl FromStr for VmState {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [
            VmState::Booting,
            VmState::Idle,
            VmState::Busy,
            VmState::Lost,
            VmState::Terminating,
            VmState::Terminated,
        ]
        .into_iter()
        .find(|st| st.to_string().eq_ignore_ascii_case(s))
        .ok_or_else(|| format!("unknown vm state {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VmRecord {
    pub id: VmId,
    pub provider_handle: String,
    /// Agent base URL, known once the instance is running.
    pub endpoint: Option<String>,
    pub state: VmState,
    pub launched_at: Timestamp,
    pub billing_anchor: Timestamp,
    pub jobs_executed: u64,
    /// Bearer secret the agent presents when pushing results. Cleared when
    /// the VM is lost or terminated, which revokes it.
    pub token: Option<String>,
    pub idle_since: Option<Timestamp>,
    /// Job reserved for or running on this VM while Busy.
    pub current_job: Option<JobId>,
    pub terminated_at: Option<Timestamp>,
    pub periods_billed: Option<u64>,
    #[serde(default)]
    pub busy_ms: u64,
    #[serde(default)]
    pub busy_since: Option<Timestamp>,
}

impl VmRecord {
    pub fn new(provider_handle: String, token: String, now: Timestamp) -> Self {
        VmRecord {
            id: VmId::default(),
            provider_handle,
            endpoint: None,
            state: VmState::Booting,
            launched_at: now,
            billing_anchor: now,
            jobs_executed: 0,
            token: Some(token),
            idle_since: None,
            current_job: None,
            terminated_at: None,
            periods_billed: None,
            busy_ms: 0,
            busy_since: None,
        }
    }
}
