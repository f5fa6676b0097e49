//! The job manager: submission, status, result push-back, result download
//! and cancellation. Handlers touch only the store, the workspace and
//! short best-effort calls to executors.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::clock::{Clock, Timestamp};
use crate::grid::LocalScheduler;
use crate::kernels::{Files, ScanInput};
use crate::model::{
    display_color, route, Backend, DatasetProfile, JobEvent, JobId, JobKind, JobRecord, JobSpec,
    JobState, RoutingConfig, RoutingDecision, VmId, VmRecord, VmState,
};
use crate::pool::{build_ledger, CostLedger, ScalingConfig, VmPool};
use crate::protocol::ResultBundle;
use crate::store::{Actor, Store, StoreError};
use crate::workspace::{valid_file_name, Workspace};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ApiError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    OversizeRejected(String),
    #[error("{0}")]
    DeriveSourceNotReady(String),
    #[error("{0}")]
    NotFound(String),
    #[error("token does not match the VM assigned to this job")]
    AuthFailure,
    #[error("{0}")]
    ConflictingResults(String),
    #[error("{0}")]
    NotReady(String),
    #[error("{0}")]
    NoResults(String),
    #[error("{0}")]
    Forbidden(String),
    #[error("{0}")]
    Storage(String),
}

impl ApiError {
    pub fn code(&self) -> &'static str {
        match self {
            ApiError::Validation(_) => "ValidationError",
            ApiError::OversizeRejected(_) => "OversizeRejected",
            ApiError::DeriveSourceNotReady(_) => "DeriveSourceNotReady",
            ApiError::NotFound(_) => "NotFound",
            ApiError::AuthFailure => "AuthFailure",
            ApiError::ConflictingResults(_) => "ConflictingResults",
            ApiError::NotReady(_) => "NotReady",
            ApiError::NoResults(_) => "NoResults",
            ApiError::Forbidden(_) => "Forbidden",
            ApiError::Storage(_) => "StorageFailure",
        }
    }

    pub fn http_status(&self) -> u16 {
        match self {
            ApiError::Validation(_) | ApiError::OversizeRejected(_) => 400,
            ApiError::AuthFailure | ApiError::Forbidden(_) => 403,
            ApiError::NotFound(_) | ApiError::NoResults(_) => 404,
            ApiError::DeriveSourceNotReady(_)
            | ApiError::ConflictingResults(_)
            | ApiError::NotReady(_) => 409,
            ApiError::Storage(_) => 503,
        }
    }

    pub fn body(&self) -> serde_json::Value {
        serde_json::json!({ "error": self.code(), "message": self.to_string() })
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::NotFound(s) => ApiError::NotFound(s),
            StoreError::IllegalTransition(t) => ApiError::ConflictingResults(t.to_string()),
            StoreError::Invalid(s) => ApiError::Validation(s),
            other => ApiError::Storage(other.to_string()),
        }
    }
}

/// A decoded submission, independent of the wire format.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Submission {
    pub kind: Option<String>,
    pub params: BTreeMap<String, String>,
    pub files: Files,
    pub backend: Option<String>,
    pub derive_from: Option<String>,
    pub owner: Option<String>,
    pub markers: Option<u32>,
    pub samples: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub state: JobState,
    pub color: String,
    pub at: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatusDoc {
    pub id: JobId,
    pub kind: JobKind,
    pub state: JobState,
    pub backend: Backend,
    pub color: String,
    pub owner: String,
    pub submitted_at: Timestamp,
    pub started_at: Option<Timestamp>,
    pub finished_at: Option<Timestamp>,
    pub error: Option<String>,
    pub attempt_count: u32,
    pub assigned_vm: Option<VmId>,
    pub derive_from: Option<JobId>,
    pub routing: RoutingDecision,
    pub max_markers: u32,
    pub sample_size: u32,
    pub history: Vec<HistoryEntry>,
    pub log: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VmView {
    pub id: VmId,
    pub provider_handle: String,
    pub endpoint: Option<String>,
    pub state: VmState,
    pub launched_at: Timestamp,
    pub billing_anchor: Timestamp,
    pub jobs_executed: u64,
    pub current_job: Option<JobId>,
    pub idle_since: Option<Timestamp>,
    pub terminated_at: Option<Timestamp>,
    pub periods_billed: Option<u64>,
}

impl From<&VmRecord> for VmView {
    fn from(v: &VmRecord) -> Self {
        VmView {
            id: v.id,
            provider_handle: v.provider_handle.clone(),
            endpoint: v.endpoint.clone(),
            state: v.state,
            launched_at: v.launched_at,
            billing_anchor: v.billing_anchor,
            jobs_executed: v.jobs_executed,
            current_job: v.current_job,
            idle_since: v.idle_since,
            terminated_at: v.terminated_at,
            periods_billed: v.periods_billed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ack {
    pub id: JobId,
    pub state: JobState,
    pub duplicate: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct JobFilter {
    pub state: Option<JobState>,
    pub backend: Option<Backend>,
    pub owner: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceConfig {
    pub max_upload_bytes: u64,
    pub routing: RoutingConfig,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            max_upload_bytes: 256 << 20,
            routing: RoutingConfig::default(),
        }
    }
}

const MAX_LOG_IN_STATUS: usize = 64 * 1024;

pub struct JobService {
    store: Arc<Store>,
    workspace: Workspace,
    cfg: ServiceConfig,
    clock: Arc<dyn Clock>,
    pool: Option<Arc<VmPool>>,
    scheduler: Option<Arc<LocalScheduler>>,
}

impl JobService {
    pub fn new(
        store: Arc<Store>,
        workspace: Workspace,
        cfg: ServiceConfig,
        clock: Arc<dyn Clock>,
        pool: Option<Arc<VmPool>>,
        scheduler: Option<Arc<LocalScheduler>>,
    ) -> Self {
        JobService {
            store,
            workspace,
            cfg,
            clock,
            pool,
            scheduler,
        }
    }

    pub fn store(&self) -> &Arc<Store> {
        &self.store
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.cfg
    }

    pub fn submit(&self, sub: Submission) -> Result<JobId, ApiError> {
        let kind_str = sub
            .kind
            .as_deref()
            .map(str::trim)
            .filter(|k| !k.is_empty())
            .ok_or_else(|| ApiError::Validation("missing \"type\" field".into()))?;
        let kind: JobKind = kind_str.parse().map_err(ApiError::Validation)?;
        let backend_override = match sub.backend.as_deref().map(str::trim) {
            None | Some("") | Some("auto") => None,
            Some(b) => Some(b.parse::<Backend>().map_err(ApiError::Validation)?),
        };
        for name in sub.files.keys() {
            if !valid_file_name(name) {
                return Err(ApiError::Validation(format!(
                    "invalid input file name {name:?}"
                )));
            }
        }
        let mut files = Files::new();
        let derive_from = match sub.derive_from.as_deref().map(str::trim) {
            None | Some("") => None,
            Some(s) => {
                let src: JobId = s
                    .parse()
                    .map_err(|e: String| ApiError::Validation(format!("derive_from: {e}")))?;
                let job = self
                    .store
                    .job(src)
                    .ok_or_else(|| ApiError::Validation(format!("derive_from: no job {src}")))?;
                if job.state != JobState::Completed {
                    return Err(ApiError::DeriveSourceNotReady(format!(
                        "derive_from job {src} is {}; only Completed results can be reused",
                        job.state
                    )));
                }
                files = self
                    .workspace
                    .read_outputs(src)
                    .map_err(|e| ApiError::Storage(format!("reading outputs of {src}: {e}")))?;
                Some(src)
            }
        };
        files.extend(sub.files);
        let input_bytes: u64 = files.values().map(|d| d.len() as u64).sum();
        if input_bytes > self.cfg.max_upload_bytes {
            return Err(ApiError::Validation(format!(
                "inputs total {input_bytes} bytes, over the {} byte limit",
                self.cfg.max_upload_bytes
            )));
        }

        let (markers, samples) = match (kind, sub.markers, sub.samples) {
            (_, Some(m), Some(n)) => (m, n),
            (JobKind::RegressionScan, m, n) => {
                let data = ScanInput::from_files(&files).map_err(ApiError::Validation)?;
                (
                    m.unwrap_or(data.markers() as u32),
                    n.unwrap_or(data.individuals() as u32),
                )
            }
            (JobKind::Sleep, m, n) => (m.unwrap_or(1), n.unwrap_or(1)),
        };
        if kind == JobKind::RegressionScan {
            ScanInput::from_files(&files).map_err(ApiError::Validation)?;
        }
        let profile =
            DatasetProfile::new(markers, samples, input_bytes).map_err(ApiError::Validation)?;
        let spec = JobSpec {
            kind,
            params: sub.params,
            inputs: files.keys().cloned().collect(),
            profile,
            backend_override,
            derive_from,
            owner: sub.owner.unwrap_or_default(),
        };
        spec.check_inputs().map_err(ApiError::Validation)?;
        let routing = route(&spec.profile, backend_override, &self.cfg.routing);
        if routing.oversize {
            return Err(ApiError::OversizeRejected(format!(
                "{markers} markers exceeds the {} marker capacity of the largest \
                 available memory (estimated {:.1} GB, {} cores)",
                self.cfg.routing.max_marker_capacity, routing.est_memory_gb, routing.core_group
            )));
        }

        let id = self.store.reserve_job_id();
        let staged = self
            .workspace
            .remove(id)
            .and_then(|_| self.workspace.write_inputs(id, &files));
        if let Err(e) = staged {
            let _ = self.workspace.remove(id);
            return Err(ApiError::Storage(format!("staging inputs: {e}")));
        }
        let mut record = JobRecord::new(spec, routing, self.clock.now());
        record.id = id;
        if let Err(e) = self.store.enqueue(record) {
            let _ = self.workspace.remove(id);
            return Err(e.into());
        }
        Ok(id)
    }

    fn job(&self, id: JobId) -> Result<JobRecord, ApiError> {
        self.store
            .job(id)
            .ok_or_else(|| ApiError::NotFound(format!("no job {id}")))
    }

    fn status_doc(&self, j: &JobRecord, with_log: bool) -> StatusDoc {
        let log = if with_log && j.state.is_terminal() {
            self.workspace.read_log(j.id).map(|mut l| {
                if l.len() > MAX_LOG_IN_STATUS {
                    let mut cut = MAX_LOG_IN_STATUS;
                    while !l.is_char_boundary(cut) {
                        cut -= 1;
                    }
                    l.truncate(cut);
                }
                l
            })
        } else {
            None
        };
        StatusDoc {
            id: j.id,
            kind: j.spec.kind,
            state: j.state,
            backend: j.backend,
            color: j.color().to_string(),
            owner: j.spec.owner.clone(),
            submitted_at: j.submitted_at,
            started_at: j.started_at,
            finished_at: j.finished_at,
            error: j.error.clone(),
            attempt_count: j.attempt_count,
            assigned_vm: j.assigned_vm,
            derive_from: j.spec.derive_from,
            routing: j.routing,
            max_markers: j.spec.profile.max_markers,
            sample_size: j.spec.profile.sample_size,
            history: j
                .history
                .iter()
                .map(|h| HistoryEntry {
                    state: h.state,
                    color: display_color(h.state, j.backend).to_string(),
                    at: h.at,
                })
                .collect(),
            log,
        }
    }

    pub fn get_status(&self, id: JobId) -> Result<StatusDoc, ApiError> {
        Ok(self.status_doc(&self.job(id)?, true))
    }

    pub fn list_jobs(&self, filter: &JobFilter) -> Vec<StatusDoc> {
        self.store
            .jobs_where(|j| {
                filter.state.is_none_or(|s| j.state == s)
                    && filter.backend.is_none_or(|b| j.backend == b)
                    && filter.owner.as_ref().is_none_or(|o| &j.spec.owner == o)
            })
            .iter()
            .map(|j| self.status_doc(j, false))
            .collect()
    }

    pub fn list_vms(&self) -> Vec<VmView> {
        self.store.vm_list(None).iter().map(VmView::from).collect()
    }

    pub fn accounting(&self) -> CostLedger {
        match &self.pool {
            Some(p) => p.accounting_report(),
            None => {
                let snap = self.store.snapshot();
                let vms: Vec<_> = snap.vms.into_values().collect();
                let jobs: Vec<_> = snap.jobs.into_values().collect();
                build_ledger(&vms, &jobs, self.clock.now(), &ScalingConfig::default())
            }
        }
    }

    /// Accepts a result bundle pushed by an agent.
    pub fn receive_results(
        &self,
        id: JobId,
        token: &str,
        bundle: ResultBundle,
    ) -> Result<Ack, ApiError> {
        let job = self.job(id)?;
        if bundle.job_id != id {
            return Err(ApiError::Validation(format!(
                "bundle is for {}, posted to {id}",
                bundle.job_id
            )));
        }
        bundle.validate().map_err(ApiError::Validation)?;
        let digest = bundle.digest();
        let vm = job.assigned_vm.and_then(|v| self.store.vm(v));
        let authorized = vm
            .as_ref()
            .and_then(|v| v.token.as_deref())
            .is_some_and(|t| constant_time_eq(t.as_bytes(), token.as_bytes()));
        if !authorized {
            // A re-delivery after the VM was retired carries a revoked token;
            // identical bytes for a finished job are still acknowledged.
            let revoked = vm.as_ref().is_some_and(|v| v.token.is_none());
            if revoked && job.state.is_terminal() && job.result_digest.as_deref() == Some(&digest) {
                return self.duplicate(&job);
            }
            return Err(ApiError::AuthFailure);
        }
        if job.state != JobState::Running {
            return self.settled(&job, &digest);
        }
        let vm_id = job.assigned_vm.expect("authorized implies assigned");

        let result_ref = self
            .workspace
            .write_outputs(id, &bundle.outputs)
            .and_then(|r| self.workspace.write_log(id, &bundle.log_text).map(|_| r))
            .map_err(|e| ApiError::Storage(format!("storing results: {e}")))?;
        let now = self.clock.now();
        let committed = self.store.update_job(
            id,
            Actor::JobManager,
            format!("results from {vm_id}"),
            |j| {
                if j.state != JobState::Running || j.assigned_vm != Some(vm_id) {
                    return Err(StoreError::Invalid("not running".into()));
                }
                j.result_ref = Some(result_ref.clone());
                j.result_digest = Some(digest.clone());
                match bundle.exit_status {
                    crate::kernels::ExitStatus::Ok => j.apply(JobEvent::ResultsReceived, now)?,
                    crate::kernels::ExitStatus::Error => {
                        j.error = Some(bundle.log_text.clone());
                        j.apply(JobEvent::Fail, now)?
                    }
                };
                Ok(())
            },
        );
        match committed {
            Ok(j) => {
                if let Some(pool) = &self.pool {
                    if let Err(e) = pool.release(vm_id, true) {
                        tracing::warn!(vm = %vm_id, error = %e, "release after results");
                    }
                }
                Ok(Ack {
                    id,
                    state: j.state,
                    duplicate: false,
                })
            }
            Err(StoreError::Invalid(_)) => self.settled(&self.job(id)?, &digest),
            Err(e) => Err(e.into()),
        }
    }

    /// Push for a job that is no longer Running.
    fn settled(&self, job: &JobRecord, digest: &str) -> Result<Ack, ApiError> {
        if job.state.is_terminal() && job.result_digest.as_deref() == Some(digest) {
            return self.duplicate(job);
        }
        Err(ApiError::ConflictingResults(format!(
            "job {} is {} and does not accept these results",
            job.id, job.state
        )))
    }

    fn duplicate(&self, job: &JobRecord) -> Result<Ack, ApiError> {
        self.store.note(
            Actor::JobManager,
            format!("{}: duplicate result push acknowledged", job.id),
        )?;
        Ok(Ack {
            id: job.id,
            state: job.state,
            duplicate: true,
        })
    }

    /// The results archive of a Completed job.
    pub fn fetch_results(&self, id: JobId) -> Result<Vec<u8>, ApiError> {
        let job = self.job(id)?;
        match job.state {
            JobState::Completed => self
                .workspace
                .archive(id)
                .map_err(|e| ApiError::Storage(format!("archiving results: {e}"))),
            JobState::Failed | JobState::Cancelled => Err(ApiError::NoResults(format!(
                "job {id} is {} and has no results",
                job.state
            ))),
            s => Err(ApiError::NotReady(format!("job {id} is {s}"))),
        }
    }

    pub fn cancel(&self, id: JobId) -> Result<StatusDoc, ApiError> {
        let job = self.job(id)?;
        if job.state.is_terminal() {
            return Ok(self.status_doc(&job, true));
        }
        let now = self.clock.now();
        let cancelled = match self
            .store
            .apply_event(id, Actor::JobManager, JobEvent::Cancel, now)
        {
            Ok(j) => j,
            // Finished while we looked.
            Err(StoreError::IllegalTransition(_)) => return self.get_status(id),
            Err(e) => return Err(e.into()),
        };
        if job.state == JobState::Running {
            match job.backend {
                Backend::Cloud => self.abort_cloud(&job),
                Backend::Local | Backend::Grid => {
                    if let Some(s) = &self.scheduler {
                        s.abort(&job);
                    }
                }
            }
        }
        if job.state == JobState::Preparing {
            if let Some(s) = &self.scheduler {
                s.abort(&job);
            }
        }
        Ok(self.status_doc(&cancelled, true))
    }

    fn abort_cloud(&self, job: &JobRecord) {
        let (Some(pool), Some(vm_id)) = (&self.pool, job.assigned_vm) else {
            return;
        };
        let Some(vm) = self.store.vm(vm_id) else {
            return;
        };
        if let Some(ep) = &vm.endpoint {
            if let Err(e) = pool.agents().abort(ep, job.id) {
                tracing::warn!(job = %job.id, vm = %vm_id, error = %e, "abort not delivered");
            }
        }
        if vm.state == VmState::Busy && vm.current_job == Some(job.id) {
            let _ = pool.release(vm_id, false);
        }
    }
}

fn constant_time_eq(a: &[u8], b: &[u8]) -> bool {
    if a.len() != b.len() {
        return false;
    }
    a.iter().zip(b).fold(0u8, |acc, (x, y)| acc | (x ^ y)) == 0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::ManualClock;

    fn service() -> (tempfile::TempDir, JobService) {
        let dir = tempfile::tempdir().unwrap();
        let clock = Arc::new(ManualClock::new(Timestamp::from_secs(100)));
        let store = Arc::new(Store::in_memory(clock.clone()));
        let ws = Workspace::new(dir.path()).unwrap();
        let svc = JobService::new(store, ws, ServiceConfig::default(), clock, None, None);
        (dir, svc)
    }

    fn scan_files() -> Files {
        let mut f = Files::new();
        f.insert("geno.csv".into(), b"0,1\n1,2\n2,0\n1,1\n".to_vec());
        f.insert("pheno.csv".into(), b"1.0\n2.5\n0.5\n1.7\n".to_vec());
        f
    }

    fn sleep_sub() -> Submission {
        Submission {
            kind: Some("sleep".into()),
            ..Default::default()
        }
    }

    #[test]
    fn submit_scan_infers_profile() {
        let (_d, svc) = service();
        let id = svc
            .submit(Submission {
                kind: Some("regression-scan".into()),
                files: scan_files(),
                ..Default::default()
            })
            .unwrap();
        let s = svc.get_status(id).unwrap();
        assert_eq!((s.state, s.color.as_str()), (JobState::Queued, "pink"));
        assert_eq!((s.max_markers, s.sample_size), (2, 4));
        assert_eq!(s.backend, Backend::Local);
    }

    #[test]
    fn missing_type_is_validation_error() {
        let (_d, svc) = service();
        let e = svc.submit(Submission::default()).unwrap_err();
        assert_eq!(e.code(), "ValidationError");
        assert_eq!(e.http_status(), 400);
        assert!(svc.list_jobs(&JobFilter::default()).is_empty());
    }

    #[test]
    fn oversize_explains_capacity() {
        let (_d, svc) = service();
        let e = svc
            .submit(Submission {
                markers: Some(5001),
                samples: Some(10),
                ..sleep_sub()
            })
            .unwrap_err();
        assert_eq!(e.code(), "OversizeRejected");
        assert!(e.to_string().contains("5000"));
    }

    #[test]
    fn derive_from_requires_completed_source() {
        let (_d, svc) = service();
        let src = svc.submit(sleep_sub()).unwrap();
        let e = svc
            .submit(Submission {
                derive_from: Some(src.to_string()),
                ..sleep_sub()
            })
            .unwrap_err();
        assert_eq!(e.code(), "DeriveSourceNotReady");
    }

    #[test]
    fn jobs_list_in_submission_order() {
        let (_d, svc) = service();
        let ids: Vec<_> = (0..3).map(|_| svc.submit(sleep_sub()).unwrap()).collect();
        let listed: Vec<_> = svc
            .list_jobs(&JobFilter::default())
            .iter()
            .map(|s| s.id)
            .collect();
        assert_eq!(listed, ids);
    }

    #[test]
    fn cancel_queued_and_terminal() {
        let (_d, svc) = service();
        let id = svc.submit(sleep_sub()).unwrap();
        assert_eq!(svc.cancel(id).unwrap().state, JobState::Cancelled);
        assert_eq!(svc.cancel(id).unwrap().color, "gray");
        assert_eq!(svc.fetch_results(id).unwrap_err().code(), "NoResults");
        assert_eq!(svc.cancel(JobId(99)).unwrap_err().code(), "NotFound");
    }

    #[test]
    fn results_of_queued_job_not_ready() {
        let (_d, svc) = service();
        let id = svc.submit(sleep_sub()).unwrap();
        assert_eq!(svc.fetch_results(id).unwrap_err().code(), "NotReady");
    }

    #[test]
    fn push_without_assignment_is_refused() {
        let (_d, svc) = service();
        let id = svc.submit(sleep_sub()).unwrap();
        let bundle = ResultBundle {
            job_id: id,
            exit_status: crate::kernels::ExitStatus::Ok,
            outputs: Files::new(),
            log_text: "ok".into(),
        };
        assert_eq!(
            svc.receive_results(id, "x", bundle).unwrap_err(),
            ApiError::AuthFailure
        );
    }

    #[test]
    fn constant_time_compare() {
        assert!(constant_time_eq(b"abc", b"abc"));
        assert!(!constant_time_eq(b"abc", b"abd"));
        assert!(!constant_time_eq(b"abc", b"ab"));
    }
}
