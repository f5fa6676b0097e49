//! A real agent and a real manager talking over loopback HTTP.

use std::collections::BTreeMap;
use std::net::{SocketAddr, TcpListener};
use std::sync::{Arc, Barrier, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use axum::extract::{Multipart, State};
use axum::routing::post;
use axum::Router;
use burstq_core::clock::{Clock, SystemClock, Timestamp};
use burstq_core::http::{
    manager_router, serve_listener, HttpAgentClient, HttpResultSink, ManagerState,
};
use burstq_core::kernels::{ExitStatus, Files};
use burstq_core::manager::{JobService, ServiceConfig, Submission};
use burstq_core::model::{JobEvent, JobId, JobKind, JobState, VmRecord, VmState};
use burstq_core::protocol::{
    AgentClient, AgentMode, ExecutePayload, ExecuteReply, PushError, PushPolicy, ResultBundle,
    ResultSink,
};
use burstq_core::runtime::start_agent;
use burstq_core::store::{Actor, Store};
use burstq_core::workspace::{unpack_archive, Workspace};

fn runtime() -> tokio::runtime::Runtime {
    tokio::runtime::Builder::new_multi_thread()
        .worker_threads(2)
        .enable_all()
        .build()
        .unwrap()
}

fn quick_push() -> PushPolicy {
    PushPolicy {
        initial_backoff: Duration::from_millis(50),
        factor: 2.0,
        max_backoff: Duration::from_millis(400),
        max_attempts: 8,
    }
}

struct Manager {
    _dir: tempfile::TempDir,
    store: Arc<Store>,
    service: Arc<JobService>,
    url: String,
    runtime: Option<tokio::runtime::Runtime>,
}

impl Drop for Manager {
    fn drop(&mut self) {
        if let Some(rt) = self.runtime.take() {
            rt.shutdown_background();
        }
    }
}

fn manager() -> Manager {
    let dir = tempfile::tempdir().unwrap();
    let clock: Arc<dyn Clock> = Arc::new(SystemClock);
    let store = Arc::new(Store::in_memory(clock.clone()));
    let ws = Workspace::new(dir.path().join("jobs")).unwrap();
    let service = Arc::new(JobService::new(
        store.clone(),
        ws,
        ServiceConfig::default(),
        clock,
        None,
        None,
    ));
    let rt = runtime();
    let router = manager_router(ManagerState {
        service: service.clone(),
        queue: None,
        lockdown: true,
        debug_trace: false,
    });
    let (addr, _) = serve_listener(
        rt.handle(),
        TcpListener::bind("127.0.0.1:0").unwrap(),
        router,
    )
    .unwrap();
    Manager {
        _dir: dir,
        store,
        service,
        url: format!("http://{addr}"),
        runtime: Some(rt),
    }
}

impl Manager {
    /// A cloud job committed as Running on a VM at `endpoint`.
    fn running_job(&self, endpoint: &str, token: &str, duration_ms: u64) -> JobId {
        let mut params = BTreeMap::new();
        params.insert("duration_ms".to_string(), duration_ms.to_string());
        let id = self
            .service
            .submit(Submission {
                kind: Some("sleep".into()),
                backend: Some("cloud".into()),
                params,
                ..Default::default()
            })
            .unwrap();
        let mut vm = VmRecord::new("h".into(), token.into(), Timestamp::from_secs(0));
        vm.state = VmState::Busy;
        vm.endpoint = Some(endpoint.to_string());
        vm.current_job = Some(id);
        let vm = self.store.insert_vm(vm).unwrap();
        self.store
            .update_job(id, Actor::QueueManager, "dispatch", |j| {
                j.assigned_vm = Some(vm.id);
                j.apply(JobEvent::Dispatch, SystemClock.now())?;
                Ok(())
            })
            .unwrap();
        id
    }

    fn payload(&self, id: JobId, token: &str, duration_ms: u64) -> ExecutePayload {
        let mut params = BTreeMap::new();
        params.insert("duration_ms".to_string(), duration_ms.to_string());
        ExecutePayload {
            job_id: id,
            kind: JobKind::Sleep,
            params,
            inputs: Files::new(),
            callback_url: format!("{}/jobs/{id}/results", self.url),
            token: token.into(),
        }
    }

    fn wait_state(&self, id: JobId, want: JobState, limit: Duration) -> JobState {
        let deadline = Instant::now() + limit;
        loop {
            let s = self.store.job(id).unwrap().state;
            if s == want || Instant::now() > deadline {
                return s;
            }
            thread::sleep(Duration::from_millis(20));
        }
    }
}

#[test]
fn barrage_admits_one_job_and_it_completes_once() {
    let m = manager();
    let dir = tempfile::tempdir().unwrap();
    let agent = start_agent(
        SocketAddr::from(([127, 0, 0, 1], 0)),
        dir.path().to_path_buf(),
        quick_push(),
        Duration::from_secs(5),
    )
    .unwrap();
    let endpoint = format!("http://{}", agent.addr);
    let id = m.running_job(&endpoint, "tok", 300);
    let payload = m.payload(id, "tok", 300);

    let client = Arc::new(HttpAgentClient::new(Duration::from_secs(5)));
    let n = 16;
    let gate = Arc::new(Barrier::new(n));
    let replies: Vec<ExecuteReply> = (0..n)
        .map(|_| {
            let (client, gate, endpoint, payload) = (
                client.clone(),
                gate.clone(),
                endpoint.clone(),
                payload.clone(),
            );
            thread::spawn(move || {
                gate.wait();
                client.execute(&endpoint, &payload).unwrap()
            })
        })
        .collect::<Vec<_>>()
        .into_iter()
        .map(|h| h.join().unwrap())
        .collect();
    let accepted = replies
        .iter()
        .filter(|r| **r == ExecuteReply::Accepted)
        .count();
    assert_eq!(accepted, 1, "{replies:?}");
    assert_eq!(
        replies.iter().filter(|r| **r == ExecuteReply::Busy).count(),
        n - 1
    );

    let status = client.status(&endpoint).unwrap();
    assert_eq!((status.mode, status.job_id), (AgentMode::Busy, Some(id)));

    assert_eq!(
        m.wait_state(id, JobState::Completed, Duration::from_secs(10)),
        JobState::Completed
    );
    let deadline = Instant::now() + Duration::from_secs(5);
    while client.status(&endpoint).unwrap().mode != AgentMode::Idle && Instant::now() < deadline {
        thread::sleep(Duration::from_millis(20));
    }
    let status = client.status(&endpoint).unwrap();
    assert_eq!(
        (status.mode, status.jobs_run, status.fault),
        (AgentMode::Idle, 1, None)
    );
    let job = m.store.job(id).unwrap();
    assert_eq!(
        job.history
            .iter()
            .filter(|h| h.state == JobState::Completed)
            .count(),
        1
    );
    drop(client);
}

#[test]
fn duplicate_pushes_are_acknowledged_exactly_once() {
    let m = manager();
    let id = m.running_job("http://127.0.0.1:9", "tok", 0);
    let mut outputs = Files::new();
    outputs.insert("result.txt".into(), b"42\n".to_vec());
    let bundle = ResultBundle {
        job_id: id,
        exit_status: ExitStatus::Ok,
        outputs: outputs.clone(),
        log_text: "slept".into(),
    };
    let sink = HttpResultSink::new(Duration::from_secs(5));
    let url = format!("{}/jobs/{id}/results", m.url);

    for _ in 0..4 {
        sink.push(&url, "tok", &bundle).unwrap();
    }
    let job = m.store.job(id).unwrap();
    assert_eq!(job.state, JobState::Completed);
    assert_eq!(
        job.history
            .iter()
            .filter(|h| h.state == JobState::Completed)
            .count(),
        1
    );
    let dupes = m
        .store
        .audit()
        .iter()
        .filter(|a| a.description.contains("duplicate result push"))
        .count();
    assert_eq!(dupes, 3);
    assert_eq!(
        unpack_archive(&m.service.fetch_results(id).unwrap()).unwrap(),
        outputs
    );

    let mut other = bundle.clone();
    other.outputs.insert("extra.txt".into(), vec![1]);
    assert!(matches!(
        sink.push(&url, "tok", &other),
        Err(PushError::Rejected(_))
    ));
    assert_eq!(sink.push(&url, "nope", &bundle), Err(PushError::Auth));
}

#[derive(Clone, Default)]
struct Captured(Arc<Mutex<Vec<(String, Option<String>, Vec<u8>)>>>);

async fn capture(State(c): State<Captured>, mut mp: Multipart) -> &'static str {
    while let Some(field) = mp.next_field().await.unwrap() {
        let name = field.name().unwrap_or_default().to_string();
        let file = field.file_name().map(str::to_string);
        let data = field.bytes().await.unwrap().to_vec();
        c.0.lock().unwrap().push((name, file, data));
    }
    "{}"
}

#[test]
fn execute_payload_carries_data_not_code() {
    let rt = runtime();
    let captured = Captured::default();
    let router = Router::new()
        .route("/execute", post(capture))
        .with_state(captured.clone());
    let (addr, _) = serve_listener(
        rt.handle(),
        TcpListener::bind("127.0.0.1:0").unwrap(),
        router,
    )
    .unwrap();

    let mut inputs = Files::new();
    inputs.insert("geno.csv".into(), b"0,1\n1,2\n2,0\n".to_vec());
    inputs.insert("pheno.csv".into(), b"1\n2\n3\n".to_vec());
    let payload = ExecutePayload {
        job_id: JobId(5),
        kind: JobKind::RegressionScan,
        params: BTreeMap::new(),
        inputs: inputs.clone(),
        callback_url: "http://manager/jobs/j5/results".into(),
        token: "secret".into(),
    };
    let client = HttpAgentClient::new(Duration::from_secs(5));
    assert_eq!(
        client.execute(&format!("http://{addr}"), &payload).unwrap(),
        ExecuteReply::Accepted
    );
    drop(client);

    let parts = captured.0.lock().unwrap().clone();
    let text: BTreeMap<String, String> = parts
        .iter()
        .filter(|p| p.1.is_none())
        .map(|p| (p.0.clone(), String::from_utf8(p.2.clone()).unwrap()))
        .collect();
    assert_eq!(
        text.keys().map(String::as_str).collect::<Vec<_>>(),
        ["callback_url", "job_id", "kind", "params", "token"]
    );
    assert_eq!(text["kind"], "regression-scan");
    let files: Files = parts
        .iter()
        .filter_map(|p| p.1.clone().map(|f| (f, p.2.clone())))
        .collect();
    assert_eq!(files, inputs, "only the staged inputs travel as files");
    rt.shutdown_background();
}
