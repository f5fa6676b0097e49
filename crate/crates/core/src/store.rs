//! Durable job and VM database.
//!
//! Every mutation goes through one mutex and is appended to an
//! append-only journal before it becomes visible. The journal can be
//! compacted into a snapshot; on open the snapshot is loaded and the
//! journal tail replayed.
//!
//! On-disk layout under the data directory:
//!
//! ```text
//! journal.log   line 1: {"format":"burstq-journal","version":1}
//!               then one committed entry per line: "<crc32 hex> <json>\n"
//! snapshot      line 1: {"format":"burstq-snapshot","version":1}
//!               line 2: JSON {revision, jobs, vms, audit}
//! ```
//!
//! A trailing line that is incomplete or fails its checksum is a torn
//! write and is truncated away on open. A bad line anywhere else is
//! reported as corruption.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Seek, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::clock::{Clock, Timestamp};
use crate::model::{
    Backend, IllegalTransition, JobEvent, JobId, JobRecord, JobState, VmId, VmRecord, VmState,
};
use crate::pool::billing_periods;

pub const FORMAT_VERSION: u32 = 1;
const JOURNAL_MAGIC: &str = "burstq-journal";
const SNAPSHOT_MAGIC: &str = "burstq-snapshot";
pub const JOURNAL_FILE: &str = "journal.log";
pub const SNAPSHOT_FILE: &str = "snapshot";

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("not found: {0}")]
    NotFound(String),
    #[error(transparent)]
    IllegalTransition(#[from] IllegalTransition),
    #[error("invalid operation: {0}")]
    Invalid(String),
    #[error("storage failure: {0}")]
    StorageFailure(String),
    #[error("corrupt store: {0}")]
    Corrupt(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Actor {
    JobManager,
    QueueManager,
    VmManager,
    Scheduler,
    Recovery,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StoreSnapshot {
    pub revision: u64,
    pub jobs: BTreeMap<JobId, JobRecord>,
    pub vms: BTreeMap<VmId, VmRecord>,
}

impl StoreSnapshot {
    fn apply(&mut self, entry: &JournalEntry) {
        match &entry.mutation {
            Mutation::PutJob(job) => {
                self.jobs.insert(job.id, job.clone());
            }
            Mutation::PutVm(vm) => {
                self.vms.insert(vm.id, vm.clone());
            }
            Mutation::Note => {}
        }
        self.revision = entry.revision;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub revision: u64,
    pub actor: Actor,
    pub description: String,
    pub timestamp: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Mutation {
    PutJob(JobRecord),
    PutVm(VmRecord),
    Note,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JournalEntry {
    pub revision: u64,
    pub actor: Actor,
    pub timestamp: Timestamp,
    pub description: String,
    pub mutation: Mutation,
}

impl JournalEntry {
    fn audit(&self) -> AuditEntry {
        AuditEntry {
            revision: self.revision,
            actor: self.actor,
            description: self.description.clone(),
            timestamp: self.timestamp,
        }
    }
}

/// Rebuilds a snapshot by applying entries, in order, on top of `base`.
pub fn replay(base: &StoreSnapshot, entries: &[JournalEntry]) -> StoreSnapshot {
    let mut snap = base.clone();
    for e in entries {
        snap.apply(e);
    }
    snap
}

/// Where committed entries go.
pub trait Journal: Send {
    /// Appends one encoded entry; must be durable when it returns Ok.
    fn append(&mut self, line: &[u8]) -> io::Result<()>;
    /// Replaces the snapshot and empties the journal.
    fn compact(&mut self, snapshot: &[u8]) -> io::Result<()>;
}

/// Journal kept in memory. Used by the simulator and tests.
#[derive(Debug, Default, Clone)]
pub struct MemoryJournal {
    pub lines: Arc<Mutex<Vec<Vec<u8>>>>,
}

impl Journal for MemoryJournal {
    fn append(&mut self, line: &[u8]) -> io::Result<()> {
        self.lines.lock().unwrap().push(line.to_vec());
        Ok(())
    }

    fn compact(&mut self, _snapshot: &[u8]) -> io::Result<()> {
        self.lines.lock().unwrap().clear();
        Ok(())
    }
}

/// Shared switch that makes a [`FaultyJournal`] fail every write.
#[derive(Debug, Default, Clone)]
pub struct FaultSwitch(Arc<AtomicBool>);

impl FaultSwitch {
    pub fn set(&self, failing: bool) {
        self.0.store(failing, Ordering::SeqCst);
    }

    pub fn is_set(&self) -> bool {
        self.0.load(Ordering::SeqCst)
    }
}

/// Wraps a journal and fails writes while its switch is on, the way a full
/// disk would.
pub struct FaultyJournal<J> {
    inner: J,
    switch: FaultSwitch,
}

impl<J: Journal> FaultyJournal<J> {
    pub fn new(inner: J, switch: FaultSwitch) -> Self {
        FaultyJournal { inner, switch }
    }
}

impl<J: Journal> Journal for FaultyJournal<J> {
    fn append(&mut self, line: &[u8]) -> io::Result<()> {
        if self.switch.is_set() {
            return Err(io::Error::new(
                io::ErrorKind::StorageFull,
                "no space left on device",
            ));
        }
        self.inner.append(line)
    }

    fn compact(&mut self, snapshot: &[u8]) -> io::Result<()> {
        if self.switch.is_set() {
            return Err(io::Error::new(
                io::ErrorKind::StorageFull,
                "no space left on device",
            ));
        }
        self.inner.compact(snapshot)
    }
}

pub struct FileJournal {
    dir: PathBuf,
    file: File,
    sync: bool,
}

impl FileJournal {
    fn sync_file(&self) -> io::Result<()> {
        if self.sync {
            self.file.sync_data()?;
        }
        Ok(())
    }
}

impl Journal for FileJournal {
    fn append(&mut self, line: &[u8]) -> io::Result<()> {
        let start = self.file.seek(io::SeekFrom::End(0))?;
        if let Err(e) = self.file.write_all(line).and_then(|_| self.sync_file()) {
            // Leave no partial line behind.
            let _ = self.file.set_len(start);
            return Err(e);
        }
        Ok(())
    }

    fn compact(&mut self, snapshot: &[u8]) -> io::Result<()> {
        let tmp = self.dir.join("snapshot.tmp");
        {
            let mut f = File::create(&tmp)?;
            f.write_all(snapshot)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, self.dir.join(SNAPSHOT_FILE))?;
        self.file.set_len(0)?;
        self.file.seek(io::SeekFrom::Start(0))?;
        self.file.write_all(&journal_header())?;
        self.sync_file()
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
}

fn header_line(magic: &str) -> Vec<u8> {
    let mut v = serde_json::to_vec(&Header {
        format: magic.into(),
        version: FORMAT_VERSION,
    })
    .expect("header serializes");
    v.push(b'\n');
    v
}

fn journal_header() -> Vec<u8> {
    header_line(JOURNAL_MAGIC)
}

fn check_header(line: &str, magic: &str) -> Result<(), StoreError> {
    let h: Header = serde_json::from_str(line.trim_end())
        .map_err(|e| StoreError::Corrupt(format!("bad {magic} header: {e}")))?;
    if h.format != magic {
        return Err(StoreError::Corrupt(format!(
            "expected {magic}, found {}",
            h.format
        )));
    }
    if h.version != FORMAT_VERSION {
        return Err(StoreError::Corrupt(format!(
            "unsupported {magic} version {}",
            h.version
        )));
    }
    Ok(())
}

fn encode_entry(entry: &JournalEntry) -> Vec<u8> {
    let json = serde_json::to_vec(entry).expect("journal entry serializes");
    let crc = crc32fast::hash(&json);
    let mut line = format!("{crc:08x} ").into_bytes();
    line.extend_from_slice(&json);
    line.push(b'\n');
    line
}

fn decode_entry(line: &str) -> Option<JournalEntry> {
    let (crc, json) = line.split_once(' ')?;
    let crc = u32::from_str_radix(crc, 16).ok()?;
    if crc32fast::hash(json.as_bytes()) != crc {
        return None;
    }
    serde_json::from_str(json).ok()
}

#[derive(Serialize, Deserialize)]
struct SnapshotBody {
    revision: u64,
    jobs: BTreeMap<JobId, JobRecord>,
    vms: BTreeMap<VmId, VmRecord>,
    audit: Vec<AuditEntry>,
}

fn encode_snapshot(snap: &StoreSnapshot, audit: &[AuditEntry]) -> Vec<u8> {
    let mut out = header_line(SNAPSHOT_MAGIC);
    let body = SnapshotBody {
        revision: snap.revision,
        jobs: snap.jobs.clone(),
        vms: snap.vms.clone(),
        audit: audit.to_vec(),
    };
    out.extend(serde_json::to_vec(&body).expect("snapshot serializes"));
    out.push(b'\n');
    out
}

/// Contents of a data directory, read without opening it for writing.
#[derive(Debug, Clone, Default)]
pub struct LoadedState {
    /// State captured by the snapshot file (empty if there is none).
    pub base: StoreSnapshot,
    pub base_audit: Vec<AuditEntry>,
    /// Journal entries after the snapshot, in commit order.
    pub entries: Vec<JournalEntry>,
    /// Byte offset just past the last good journal line.
    good_len: u64,
    torn_tail: bool,
}

impl LoadedState {
    pub fn snapshot(&self) -> StoreSnapshot {
        replay(&self.base, &self.entries)
    }

    pub fn audit(&self) -> Vec<AuditEntry> {
        self.base_audit
            .iter()
            .cloned()
            .chain(self.entries.iter().map(JournalEntry::audit))
            .collect()
    }
}

/// Reads a data directory's snapshot and journal.
pub fn load_dir(dir: &Path) -> Result<LoadedState, StoreError> {
    let mut state = LoadedState::default();
    let snap_path = dir.join(SNAPSHOT_FILE);
    if snap_path.exists() {
        let text = fs::read_to_string(&snap_path).map_err(io_err)?;
        let mut lines = text.lines();
        check_header(lines.next().unwrap_or_default(), SNAPSHOT_MAGIC)?;
        let body: SnapshotBody = serde_json::from_str(lines.next().unwrap_or_default())
            .map_err(|e| StoreError::Corrupt(format!("snapshot body: {e}")))?;
        state.base = StoreSnapshot {
            revision: body.revision,
            jobs: body.jobs,
            vms: body.vms,
        };
        state.base_audit = body.audit;
    }

    let journal_path = dir.join(JOURNAL_FILE);
    if !journal_path.exists() {
        return Ok(state);
    }
    let mut reader = BufReader::new(File::open(&journal_path).map_err(io_err)?);
    let mut offset = 0u64;
    let mut line = String::new();
    let n = reader.read_line(&mut line).map_err(io_err)?;
    if n == 0 {
        return Ok(state);
    }
    if !line.ends_with('\n') {
        // Crashed while writing the header of a fresh journal.
        state.torn_tail = true;
        return Ok(state);
    }
    check_header(&line, JOURNAL_MAGIC)?;
    offset += n as u64;
    state.good_len = offset;

    let mut revision = state.base.revision;
    let mut pending_bad: Option<String> = None;
    loop {
        line.clear();
        let n = reader.read_line(&mut line).map_err(io_err)?;
        if n == 0 {
            break;
        }
        if let Some(bad) = pending_bad.take() {
            return Err(StoreError::Corrupt(format!(
                "journal entry after revision {revision} is unreadable: {bad:.80}"
            )));
        }
        let complete = line.ends_with('\n');
        match decode_entry(line.trim_end_matches('\n')).filter(|_| complete) {
            Some(entry) => {
                if entry.revision <= state.base.revision {
                    // Already folded into the snapshot by an interrupted compaction.
                } else if entry.revision != revision + 1 {
                    return Err(StoreError::Corrupt(format!(
                        "journal revision gap: {} follows {revision}",
                        entry.revision
                    )));
                } else {
                    revision = entry.revision;
                    state.entries.push(entry);
                }
                offset += n as u64;
                state.good_len = offset;
            }
            None if complete => pending_bad = Some(line.clone()),
            None => {
                state.torn_tail = true;
                break;
            }
        }
    }
    if pending_bad.is_some() {
        state.torn_tail = true;
    }
    Ok(state)
}

fn io_err(e: io::Error) -> StoreError {
    StoreError::StorageFailure(e.to_string())
}

#[derive(Debug, Clone)]
pub struct StoreOptions {
    /// fsync every commit.
    pub sync: bool,
    /// Compact after this many journal entries; 0 disables compaction.
    pub compact_every: u64,
}

impl Default for StoreOptions {
    fn default() -> Self {
        StoreOptions {
            sync: true,
            compact_every: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RecoveryReport {
    pub requeued: u32,
    pub failed: u32,
    pub vms_marked_lost: u32,
}

/// What restart recovery needs to know about the outside world.
#[derive(Debug, Clone)]
pub struct RecoveryInput {
    /// VMs whose agent answered a status probe.
    pub alive: BTreeSet<VmId>,
    pub max_attempts: u32,
    pub billing_period: Duration,
    pub now: Timestamp,
}

struct Inner {
    snap: StoreSnapshot,
    base: StoreSnapshot,
    base_audit: Vec<AuditEntry>,
    entries: Vec<JournalEntry>,
    journal: Box<dyn Journal>,
    compact_every: u64,
    next_job: u64,
    next_vm: u64,
}

/// The serialized-access database. Every method takes the single internal
/// lock for its whole duration, so callers never coordinate among
/// themselves.
pub struct Store {
    inner: Mutex<Inner>,
    clock: Arc<dyn Clock>,
}

impl Store {
    pub fn in_memory(clock: Arc<dyn Clock>) -> Self {
        Self::with_journal(Box::new(MemoryJournal::default()), clock)
    }

    pub fn with_journal(journal: Box<dyn Journal>, clock: Arc<dyn Clock>) -> Self {
        Self::from_state(LoadedState::default(), journal, 0, clock)
    }

    /// Opens (creating if needed) a store in `dir`, replaying its journal.
    pub fn open(dir: &Path, opts: StoreOptions, clock: Arc<dyn Clock>) -> Result<Self, StoreError> {
        Self::open_wrapped(dir, opts, clock, |j| Box::new(j))
    }

    /// Like [`Store::open`] with the file journal passed through `wrap`,
    /// e.g. to inject faults.
    pub fn open_wrapped(
        dir: &Path,
        opts: StoreOptions,
        clock: Arc<dyn Clock>,
        wrap: impl FnOnce(FileJournal) -> Box<dyn Journal>,
    ) -> Result<Self, StoreError> {
        fs::create_dir_all(dir).map_err(io_err)?;
        let state = load_dir(dir)?;
        let path = dir.join(JOURNAL_FILE);
        let mut file = OpenOptions::new()
            .read(true)
            .write(true)
            .create(true)
            .truncate(false)
            .open(&path)
            .map_err(io_err)?;
        let len = file.metadata().map_err(io_err)?.len();
        if state.good_len == 0 {
            file.set_len(0).map_err(io_err)?;
            file.write_all(&journal_header()).map_err(io_err)?;
            file.sync_all().map_err(io_err)?;
        } else if state.torn_tail || len > state.good_len {
            tracing::warn!(
                dropped = len - state.good_len,
                "truncating torn journal tail"
            );
            file.set_len(state.good_len).map_err(io_err)?;
            file.sync_all().map_err(io_err)?;
        }
        let journal = FileJournal {
            dir: dir.to_path_buf(),
            file,
            sync: opts.sync,
        };
        Ok(Self::from_state(
            state,
            wrap(journal),
            opts.compact_every,
            clock,
        ))
    }

    fn from_state(
        state: LoadedState,
        journal: Box<dyn Journal>,
        compact_every: u64,
        clock: Arc<dyn Clock>,
    ) -> Self {
        let snap = state.snapshot();
        let next_job = snap.jobs.keys().next_back().map_or(1, |id| id.0 + 1);
        let next_vm = snap.vms.keys().next_back().map_or(1, |id| id.0 + 1);
        Store {
            inner: Mutex::new(Inner {
                snap,
                base: state.base,
                base_audit: state.base_audit,
                entries: state.entries,
                journal,
                compact_every,
                next_job,
                next_vm,
            }),
            clock,
        }
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.clock
    }

    fn commit(
        &self,
        inner: &mut Inner,
        actor: Actor,
        description: String,
        mutation: Mutation,
    ) -> Result<(), StoreError> {
        let entry = JournalEntry {
            revision: inner.snap.revision + 1,
            actor,
            timestamp: self.clock.now(),
            description,
            mutation,
        };
        inner
            .journal
            .append(&encode_entry(&entry))
            .map_err(io_err)?;
        inner.snap.apply(&entry);
        inner.entries.push(entry);
        if inner.compact_every > 0 && inner.entries.len() as u64 >= inner.compact_every {
            let mut audit = inner.base_audit.clone();
            audit.extend(inner.entries.iter().map(JournalEntry::audit));
            let bytes = encode_snapshot(&inner.snap, &audit);
            match inner.journal.compact(&bytes) {
                Ok(()) => {
                    inner.base = inner.snap.clone();
                    inner.base_audit = audit;
                    inner.entries.clear();
                }
                // The journal still holds everything; try again next commit.
                Err(e) => tracing::warn!(error = %e, "compaction failed"),
            }
        }
        Ok(())
    }

    /// Commits a new Queued job and returns its id.
    pub fn enqueue(&self, mut record: JobRecord) -> Result<JobId, StoreError> {
        if record.state != JobState::Queued {
            return Err(StoreError::Invalid(format!(
                "enqueue requires a Queued record, got {}",
                record.state
            )));
        }
        let mut inner = self.lock();
        if record.id == JobId::default() {
            record.id = JobId(inner.next_job);
        } else if inner.snap.jobs.contains_key(&record.id) {
            return Err(StoreError::Invalid(format!(
                "job {} already exists",
                record.id
            )));
        }
        let id = record.id;
        let desc = format!("enqueue {id} ({} on {})", record.spec.kind, record.backend);
        self.commit(
            &mut inner,
            Actor::JobManager,
            desc,
            Mutation::PutJob(record),
        )?;
        inner.next_job = inner.next_job.max(id.0 + 1);
        Ok(id)
    }

    /// Hands out a fresh job id without committing anything, so inputs can
    /// be staged under it before the job is enqueued.
    pub fn reserve_job_id(&self) -> JobId {
        let mut inner = self.lock();
        let id = JobId(inner.next_job);
        inner.next_job += 1;
        id
    }

    /// Oldest Queued job, optionally restricted to one backend.
    pub fn next_queued(&self, backend: Option<Backend>) -> Option<JobRecord> {
        let inner = self.lock();
        inner
            .snap
            .jobs
            .values()
            .find(|j| j.state == JobState::Queued && backend.is_none_or(|b| j.backend == b))
            .cloned()
    }

    /// All Queued jobs for `backend`, oldest first.
    pub fn queued(&self, backend: Backend) -> Vec<JobRecord> {
        self.jobs_where(|j| j.state == JobState::Queued && j.backend == backend)
    }

    pub fn jobs_where(&self, pred: impl Fn(&JobRecord) -> bool) -> Vec<JobRecord> {
        let inner = self.lock();
        inner
            .snap
            .jobs
            .values()
            .filter(|j| pred(j))
            .cloned()
            .collect()
    }

    pub fn job(&self, id: JobId) -> Option<JobRecord> {
        self.lock().snap.jobs.get(&id).cloned()
    }

    /// Applies `mutate` to a copy of the job and commits it. Any error from
    /// `mutate` leaves the store untouched.
    pub fn update_job<F>(
        &self,
        id: JobId,
        actor: Actor,
        description: impl Into<String>,
        mutate: F,
    ) -> Result<JobRecord, StoreError>
    where
        F: FnOnce(&mut JobRecord) -> Result<(), StoreError>,
    {
        let mut inner = self.lock();
        let mut rec = inner
            .snap
            .jobs
            .get(&id)
            .cloned()
            .ok_or_else(|| StoreError::NotFound(format!("job {id}")))?;
        mutate(&mut rec)?;
        rec.id = id;
        let desc = format!("{id}: {} [{}]", description.into(), rec.state);
        self.commit(&mut inner, actor, desc, Mutation::PutJob(rec.clone()))?;
        Ok(rec)
    }

    /// Shorthand for a lifecycle event on a job.
    pub fn apply_event(
        &self,
        id: JobId,
        actor: Actor,
        event: JobEvent,
        now: Timestamp,
    ) -> Result<JobRecord, StoreError> {
        self.update_job(id, actor, format!("{event:?}"), |j| {
            j.apply(event, now)?;
            Ok(())
        })
    }

    pub fn insert_vm(&self, mut record: VmRecord) -> Result<VmRecord, StoreError> {
        let mut inner = self.lock();
        record.id = VmId(inner.next_vm);
        let desc = format!("launch {} ({})", record.id, record.provider_handle);
        self.commit(
            &mut inner,
            Actor::VmManager,
            desc,
            Mutation::PutVm(record.clone()),
        )?;
        inner.next_vm += 1;
        Ok(record)
    }

    /// Inserts or replaces a VM record by id.
    pub fn vm_upsert(&self, record: VmRecord) -> Result<(), StoreError> {
        let mut inner = self.lock();
        let id = record.id;
        let desc = format!("upsert {id} [{}]", record.state);
        self.commit(&mut inner, Actor::VmManager, desc, Mutation::PutVm(record))?;
        inner.next_vm = inner.next_vm.max(id.0 + 1);
        Ok(())
    }

    pub fn vm(&self, id: VmId) -> Option<VmRecord> {
        self.lock().snap.vms.get(&id).cloned()
    }

    pub fn vm_list(&self, state: Option<VmState>) -> Vec<VmRecord> {
        let inner = self.lock();
        inner
            .snap
            .vms
            .values()
            .filter(|v| state.is_none_or(|s| v.state == s))
            .cloned()
            .collect()
    }

    pub fn update_vm<F>(
        &self,
        id: VmId,
        actor: Actor,
        description: impl Into<String>,
        mutate: F,
    ) -> Result<VmRecord, StoreError>
    where
        F: FnOnce(&mut VmRecord) -> Result<(), StoreError>,
    {
        let mut inner = self.lock();
        let mut rec = inner
            .snap
            .vms
            .get(&id)
            .cloned()
            .ok_or_else(|| StoreError::NotFound(format!("vm {id}")))?;
        mutate(&mut rec)?;
        rec.id = id;
        let desc = format!("{id}: {} [{}]", description.into(), rec.state);
        self.commit(&mut inner, actor, desc, Mutation::PutVm(rec.clone()))?;
        Ok(rec)
    }

    /// Finds the first VM matching `pick` and commits `mutate` on it, both
    /// under one lock acquisition.
    pub fn claim_vm<P, F>(
        &self,
        actor: Actor,
        description: impl Into<String>,
        pick: P,
        mutate: F,
    ) -> Result<Option<VmRecord>, StoreError>
    where
        P: Fn(&VmRecord) -> bool,
        F: FnOnce(&mut VmRecord),
    {
        let mut inner = self.lock();
        let Some(mut rec) = inner.snap.vms.values().find(|v| pick(v)).cloned() else {
            return Ok(None);
        };
        mutate(&mut rec);
        let desc = format!("{}: {} [{}]", rec.id, description.into(), rec.state);
        self.commit(&mut inner, actor, desc, Mutation::PutVm(rec.clone()))?;
        Ok(Some(rec))
    }

    /// Records an audit note without changing any record.
    pub fn note(&self, actor: Actor, description: impl Into<String>) -> Result<u64, StoreError> {
        let mut inner = self.lock();
        self.commit(&mut inner, actor, description.into(), Mutation::Note)?;
        Ok(inner.snap.revision)
    }

    pub fn revision(&self) -> u64 {
        self.lock().snap.revision
    }

    pub fn snapshot(&self) -> StoreSnapshot {
        self.lock().snap.clone()
    }

    pub fn audit(&self) -> Vec<AuditEntry> {
        let inner = self.lock();
        inner
            .base_audit
            .iter()
            .cloned()
            .chain(inner.entries.iter().map(JournalEntry::audit))
            .collect()
    }

    /// The compaction base and the journal entries committed after it.
    pub fn history(&self) -> (StoreSnapshot, Vec<JournalEntry>) {
        let inner = self.lock();
        (inner.base.clone(), inner.entries.clone())
    }

    /// Restart recovery. Preparing jobs go back to the queue; Running jobs
    /// whose VM did not answer are requeued (or failed once past
    /// `max_attempts`); VMs without a live agent are closed out.
    pub fn recover(&self, input: &RecoveryInput) -> Result<RecoveryReport, StoreError> {
        let mut report = RecoveryReport::default();
        let now = input.now;
        let jobs = self.jobs_where(|j| matches!(j.state, JobState::Preparing | JobState::Running));
        for job in jobs {
            let alive = job.backend == Backend::Cloud
                && job.state == JobState::Running
                && job.assigned_vm.is_some_and(|v| input.alive.contains(&v));
            if alive {
                continue;
            }
            if job.state == JobState::Preparing {
                self.update_job(
                    job.id,
                    Actor::Recovery,
                    "requeue interrupted preparation",
                    |j| {
                        j.apply(JobEvent::Requeue, now)?;
                        Ok(())
                    },
                )?;
                report.requeued += 1;
                continue;
            }
            let updated =
                self.update_job(job.id, Actor::Recovery, "executor lost in restart", |j| {
                    j.attempt_count += 1;
                    if j.attempt_count <= input.max_attempts {
                        j.apply(JobEvent::Requeue, now)?;
                    } else {
                        j.error = Some(format!(
                            "executor lost during restart after {} attempts",
                            j.attempt_count
                        ));
                        j.apply(JobEvent::Fail, now)?;
                    }
                    Ok(())
                })?;
            if updated.state == JobState::Queued {
                report.requeued += 1;
            } else {
                report.failed += 1;
            }
        }

        let vms = self.vm_list(None);
        for vm in vms {
            if vm.state == VmState::Terminated || input.alive.contains(&vm.id) {
                continue;
            }
            self.update_vm(vm.id, Actor::Recovery, "no live agent after restart", |v| {
                close_vm(v, now, input.billing_period);
                Ok(())
            })?;
            report.vms_marked_lost += 1;
        }
        self.note(
            Actor::Recovery,
            format!(
                "recovery: requeued={} failed={} vms_marked_lost={}",
                report.requeued, report.failed, report.vms_marked_lost
            ),
        )?;
        Ok(report)
    }

    /// Writes a pretty, human-readable dump of the current snapshot.
    pub fn dump(&self) -> String {
        let snap = self.snapshot();
        serde_json::to_string_pretty(&snap).expect("snapshot serializes")
    }
}

/// Marks a VM terminated and fixes its billed periods.
pub fn close_vm(v: &mut VmRecord, now: Timestamp, billing_period: Duration) {
    if let Some(since) = v.busy_since.take() {
        v.busy_ms += now.since(since).as_millis() as u64;
    }
    v.state = VmState::Terminated;
    v.terminated_at = Some(now);
    v.token = None;
    v.current_job = None;
    v.periods_billed = Some(billing_periods(now.since(v.launched_at), billing_period));
}
