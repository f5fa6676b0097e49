//! HTTP surfaces: the manager API, the agent API, and the blocking clients
//! each side uses to reach the other.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::body::Body;
use axum::extract::{ConnectInfo, DefaultBodyLimit, Multipart, Path, Query, Request, State};
use axum::http::{header, Method, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde_json::{json, Value};

use crate::agent::{Agent, AgentError};
use crate::clock::Clock;
use crate::dispatch::QueueManager;
use crate::kernels::{ExitStatus, Files};
use crate::manager::{ApiError, JobFilter, JobService, Submission};
use crate::model::{JobId, JobKind};
use crate::protocol::{
    AgentCallError, AgentClient, AgentStatus, ExecutePayload, ExecuteReply, PushError, PushPolicy,
    ResultBundle, ResultSink,
};
use crate::simcloud::AgentSpawner;

pub struct HttpError(ApiError);

impl From<ApiError> for HttpError {
    fn from(e: ApiError) -> Self {
        HttpError(e)
    }
}

impl IntoResponse for HttpError {
    fn into_response(self) -> Response {
        let status =
            StatusCode::from_u16(self.0.http_status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(self.0.body())).into_response()
    }
}

type HttpResult<T> = Result<T, HttpError>;

async fn blocking<T, F>(f: F) -> HttpResult<T>
where
    F: FnOnce() -> Result<T, ApiError> + Send + 'static,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| HttpError(ApiError::Storage(format!("handler failed: {e}"))))?
        .map_err(HttpError)
}

#[derive(Clone)]
pub struct ManagerState {
    pub service: Arc<JobService>,
    pub queue: Option<Arc<QueueManager>>,
    pub lockdown: bool,
    pub debug_trace: bool,
}

/// Slack on top of `max_upload_bytes` for multipart framing and fields.
const MULTIPART_SLACK: usize = 1 << 20;

pub fn manager_router(state: ManagerState) -> Router {
    let limit = (state.service.config().max_upload_bytes as usize).saturating_add(MULTIPART_SLACK);
    Router::new()
        .route("/healthz", get(|| async { "ok" }))
        .route("/jobs", post(submit).get(list_jobs))
        .route("/jobs/{id}", get(job_status).delete(cancel_job))
        .route(
            "/jobs/{id}/results",
            get(fetch_results).post(receive_results),
        )
        .route("/vms", get(list_vms))
        .route("/accounting", get(accounting))
        .route("/debug/dispatch-trace", get(dispatch_trace))
        .layer(DefaultBodyLimit::max(limit))
        .layer(middleware::from_fn_with_state(state.clone(), lockdown))
        .with_state(state)
}

fn is_result_push(method: &Method, path: &str) -> bool {
    let parts: Vec<&str> = path.trim_matches('/').split('/').collect();
    method == Method::POST && parts.len() == 3 && parts[0] == "jobs" && parts[2] == "results"
}

async fn lockdown(
    State(st): State<ManagerState>,
    ConnectInfo(peer): ConnectInfo<SocketAddr>,
    req: Request,
    next: Next,
) -> Response {
    if st.lockdown && !peer.ip().is_loopback() && !is_result_push(req.method(), req.uri().path()) {
        return HttpError(ApiError::Forbidden(format!(
            "requests from {} are not accepted; the service is locked down to loopback",
            peer.ip()
        )))
        .into_response();
    }
    next.run(req).await
}

fn parse_id(s: &str) -> HttpResult<JobId> {
    s.parse()
        .map_err(|_| HttpError(ApiError::NotFound(format!("no job {s:?}"))))
}

fn multipart_err(e: axum::extract::multipart::MultipartError) -> HttpError {
    HttpError(ApiError::Validation(format!(
        "malformed multipart body: {}",
        e.body_text()
    )))
}

/// Reads text fields and file parts. A part with a filename is a file,
/// named by that filename.
async fn read_parts(mp: &mut Multipart) -> HttpResult<(BTreeMap<String, Vec<String>>, Files)> {
    let mut fields: BTreeMap<String, Vec<String>> = BTreeMap::new();
    let mut files = Files::new();
    while let Some(field) = mp.next_field().await.map_err(multipart_err)? {
        let name = field.name().unwrap_or_default().to_string();
        match field.file_name().map(str::to_string) {
            Some(file_name) => {
                let data = field.bytes().await.map_err(multipart_err)?;
                let key = if file_name.is_empty() {
                    name
                } else {
                    file_name
                };
                if files.insert(key.clone(), data.to_vec()).is_some() {
                    return Err(HttpError(ApiError::Validation(format!(
                        "duplicate file part {key:?}"
                    ))));
                }
            }
            None => {
                let text = field.text().await.map_err(multipart_err)?;
                fields.entry(name).or_default().push(text);
            }
        }
    }
    Ok((fields, files))
}

fn single(fields: &mut BTreeMap<String, Vec<String>>, key: &str) -> HttpResult<Option<String>> {
    match fields.remove(key) {
        None => Ok(None),
        Some(mut v) if v.len() == 1 => Ok(v.pop()),
        Some(_) => Err(HttpError(ApiError::Validation(format!(
            "field {key:?} given more than once"
        )))),
    }
}

pub fn parse_params(text: &str) -> Result<BTreeMap<String, String>, String> {
    let value: Value =
        serde_json::from_str(text).map_err(|e| format!("params is not JSON: {e}"))?;
    let Value::Object(map) = value else {
        return Err("params must be a JSON object".into());
    };
    Ok(map
        .into_iter()
        .map(|(k, v)| {
            let s = match v {
                Value::String(s) => s,
                other => other.to_string(),
            };
            (k, s)
        })
        .collect())
}

fn parse_count(field: &str, v: Option<String>) -> HttpResult<Option<u32>> {
    v.map(|s| {
        s.trim().parse::<u32>().map_err(|_| {
            HttpError(ApiError::Validation(format!(
                "{field} must be a non-negative integer"
            )))
        })
    })
    .transpose()
}

async fn submit(
    State(st): State<ManagerState>,
    mut mp: Multipart,
) -> HttpResult<(StatusCode, Json<Value>)> {
    let (mut fields, files) = read_parts(&mut mp).await?;
    let kind = single(&mut fields, "type")?;
    let params = match single(&mut fields, "params")? {
        Some(p) if !p.trim().is_empty() => {
            parse_params(&p).map_err(|e| HttpError(ApiError::Validation(e)))?
        }
        _ => BTreeMap::new(),
    };
    let sub = Submission {
        kind,
        params,
        files,
        backend: single(&mut fields, "backend")?,
        derive_from: single(&mut fields, "derive_from")?,
        owner: single(&mut fields, "owner")?,
        markers: parse_count("markers", single(&mut fields, "markers")?)?,
        samples: parse_count("samples", single(&mut fields, "samples")?)?,
    };
    if let Some(unknown) = fields.keys().next() {
        return Err(HttpError(ApiError::Validation(format!(
            "unknown field {unknown:?}"
        ))));
    }
    let svc = st.service.clone();
    let id = blocking(move || svc.submit(sub)).await?;
    Ok((StatusCode::CREATED, Json(json!({ "id": id }))))
}

async fn list_jobs(
    State(st): State<ManagerState>,
    Query(q): Query<BTreeMap<String, String>>,
) -> HttpResult<Json<Value>> {
    let bad = |e: String| HttpError(ApiError::Validation(e));
    let filter = JobFilter {
        state: q.get("state").map(|s| s.parse()).transpose().map_err(bad)?,
        backend: q
            .get("backend")
            .map(|s| s.parse())
            .transpose()
            .map_err(bad)?,
        owner: q.get("owner").cloned(),
    };
    Ok(Json(json!(st.service.list_jobs(&filter))))
}

async fn job_status(
    State(st): State<ManagerState>,
    Path(id): Path<String>,
) -> HttpResult<Json<Value>> {
    let id = parse_id(&id)?;
    Ok(Json(json!(st.service.get_status(id)?)))
}

async fn cancel_job(
    State(st): State<ManagerState>,
    Path(id): Path<String>,
) -> HttpResult<Json<Value>> {
    let id = parse_id(&id)?;
    let svc = st.service.clone();
    let doc = blocking(move || svc.cancel(id)).await?;
    Ok(Json(json!(doc)))
}

async fn fetch_results(
    State(st): State<ManagerState>,
    Path(id): Path<String>,
) -> HttpResult<Response> {
    let id = parse_id(&id)?;
    let svc = st.service.clone();
    let bytes = blocking(move || svc.fetch_results(id)).await?;
    Ok((
        [
            (header::CONTENT_TYPE, "application/x-tar".to_string()),
            (
                header::CONTENT_DISPOSITION,
                format!("attachment; filename=\"{id}-results.tar\""),
            ),
        ],
        Body::from(bytes),
    )
        .into_response())
}

fn bearer(headers: &axum::http::HeaderMap) -> Option<String> {
    let v = headers.get(header::AUTHORIZATION)?.to_str().ok()?;
    let (scheme, token) = v.split_once(' ')?;
    scheme
        .eq_ignore_ascii_case("bearer")
        .then(|| token.trim().to_string())
}

async fn receive_results(
    State(st): State<ManagerState>,
    Path(id): Path<String>,
    headers: axum::http::HeaderMap,
    mut mp: Multipart,
) -> HttpResult<Json<Value>> {
    let id = parse_id(&id)?;
    let token = bearer(&headers).ok_or(HttpError(ApiError::AuthFailure))?;
    let (mut fields, outputs) = read_parts(&mut mp).await?;
    let exit_status: ExitStatus = single(&mut fields, "exit_status")?
        .ok_or_else(|| HttpError(ApiError::Validation("missing exit_status".into())))?
        .trim()
        .parse()
        .map_err(|e| HttpError(ApiError::Validation(e)))?;
    let bundle = ResultBundle {
        job_id: id,
        exit_status,
        outputs,
        log_text: single(&mut fields, "log")?.unwrap_or_default(),
    };
    let svc = st.service.clone();
    let ack = blocking(move || svc.receive_results(id, &token, bundle)).await?;
    Ok(Json(json!(ack)))
}

async fn list_vms(State(st): State<ManagerState>) -> Json<Value> {
    Json(json!(st.service.list_vms()))
}

async fn accounting(State(st): State<ManagerState>) -> Json<Value> {
    Json(json!(st.service.accounting()))
}

async fn dispatch_trace(State(st): State<ManagerState>) -> HttpResult<Json<Value>> {
    match (&st.queue, st.debug_trace) {
        (Some(q), true) => Ok(Json(json!(q.trace()))),
        _ => Err(HttpError(ApiError::NotFound(
            "dispatch trace is disabled".into(),
        ))),
    }
}

// ---- agent side ----

pub fn agent_router(agent: Agent) -> Router {
    Router::new()
        .route("/execute", post(agent_execute))
        .route("/status", get(agent_status))
        .route("/abort", post(agent_abort))
        .layer(DefaultBodyLimit::max((256 << 20) + MULTIPART_SLACK))
        .with_state(agent)
}

fn agent_error(status: StatusCode, code: &str, msg: String) -> Response {
    (status, Json(json!({ "error": code, "message": msg }))).into_response()
}

async fn agent_execute(State(agent): State<Agent>, mut mp: Multipart) -> Response {
    let malformed = |m: String| agent_error(StatusCode::BAD_REQUEST, "MalformedPayload", m);
    let (mut fields, inputs) = match read_parts(&mut mp).await {
        Ok(p) => p,
        Err(HttpError(e)) => return malformed(e.to_string()),
    };
    let mut take = |k: &str| fields.remove(k).and_then(|mut v| v.pop());
    let job_id = match take("job_id").map(|s| s.parse::<JobId>()) {
        Some(Ok(id)) => id,
        Some(Err(e)) => return malformed(format!("job_id: {e}")),
        None => return malformed("missing job_id".into()),
    };
    let kind = match take("kind").map(|s| s.parse::<JobKind>()) {
        Some(Ok(k)) => k,
        Some(Err(e)) => return malformed(e),
        None => return malformed("missing kind".into()),
    };
    let params = match take("params") {
        Some(p) if !p.trim().is_empty() => match parse_params(&p) {
            Ok(p) => p,
            Err(e) => return malformed(e),
        },
        _ => BTreeMap::new(),
    };
    let payload = ExecutePayload {
        job_id,
        kind,
        params,
        inputs,
        callback_url: take("callback_url").unwrap_or_default(),
        token: take("token").unwrap_or_default(),
    };
    let res = tokio::task::spawn_blocking(move || agent.execute(payload)).await;
    match res {
        Ok(Ok(ExecuteReply::Accepted)) => {
            (StatusCode::OK, Json(json!({ "reply": "accepted" }))).into_response()
        }
        Ok(Ok(ExecuteReply::Busy)) => {
            (StatusCode::CONFLICT, Json(json!({ "reply": "busy" }))).into_response()
        }
        Ok(Err(e)) => malformed(e.to_string()),
        Err(e) => agent_error(StatusCode::INTERNAL_SERVER_ERROR, "Internal", e.to_string()),
    }
}

async fn agent_status(State(agent): State<Agent>) -> Json<AgentStatus> {
    Json(agent.status())
}

async fn agent_abort(State(agent): State<Agent>, Json(body): Json<Value>) -> Response {
    let Some(id) = body
        .get("job_id")
        .and_then(Value::as_str)
        .and_then(|s| s.parse::<JobId>().ok())
    else {
        return agent_error(
            StatusCode::BAD_REQUEST,
            "MalformedPayload",
            "missing job_id".into(),
        );
    };
    match agent.abort(id) {
        Ok(()) => Json(json!({ "aborted": id })).into_response(),
        Err(e @ AgentError::NotFound(_)) => {
            agent_error(StatusCode::NOT_FOUND, "NotFound", e.to_string())
        }
        Err(e) => agent_error(StatusCode::BAD_REQUEST, "MalformedPayload", e.to_string()),
    }
}

// ---- clients ----

fn blocking_client(timeout: Duration) -> reqwest::blocking::Client {
    reqwest::blocking::Client::builder()
        .timeout(timeout)
        .connect_timeout(timeout.min(Duration::from_secs(5)))
        // A fresh connection per call, so a dead agent is seen as unreachable.
        .pool_max_idle_per_host(0)
        .build()
        .expect("http client")
}

fn files_form(
    mut form: reqwest::blocking::multipart::Form,
    files: &Files,
) -> reqwest::blocking::multipart::Form {
    for (name, data) in files {
        let part = reqwest::blocking::multipart::Part::bytes(data.clone()).file_name(name.clone());
        form = form.part(name.clone(), part);
    }
    form
}

/// Manager-side client for agents' HTTP API. Create it outside any async
/// runtime context.
pub struct HttpAgentClient {
    client: reqwest::blocking::Client,
}

impl HttpAgentClient {
    pub fn new(timeout: Duration) -> Self {
        HttpAgentClient {
            client: blocking_client(timeout),
        }
    }
}

fn unreachable(e: reqwest::Error) -> AgentCallError {
    AgentCallError::Unreachable(e.to_string())
}

impl AgentClient for HttpAgentClient {
    fn execute(&self, endpoint: &str, p: &ExecutePayload) -> Result<ExecuteReply, AgentCallError> {
        let params = serde_json::to_string(&p.params).expect("params serialize");
        let form = reqwest::blocking::multipart::Form::new()
            .text("job_id", p.job_id.to_string())
            .text("kind", p.kind.to_string())
            .text("params", params)
            .text("callback_url", p.callback_url.clone())
            .text("token", p.token.clone());
        let form = files_form(form, &p.inputs);
        let resp = self
            .client
            .post(format!("{endpoint}/execute"))
            .multipart(form)
            .send()
            .map_err(unreachable)?;
        match resp.status().as_u16() {
            200..=299 => Ok(ExecuteReply::Accepted),
            409 => Ok(ExecuteReply::Busy),
            400..=499 => Err(AgentCallError::Rejected(resp.text().unwrap_or_default())),
            s => Err(AgentCallError::Unreachable(format!("agent answered {s}"))),
        }
    }

    fn status(&self, endpoint: &str) -> Result<AgentStatus, AgentCallError> {
        let resp = self
            .client
            .get(format!("{endpoint}/status"))
            .send()
            .map_err(unreachable)?;
        if !resp.status().is_success() {
            return Err(AgentCallError::Unreachable(format!(
                "status answered {}",
                resp.status()
            )));
        }
        resp.json().map_err(unreachable)
    }

    fn abort(&self, endpoint: &str, job_id: JobId) -> Result<bool, AgentCallError> {
        let resp = self
            .client
            .post(format!("{endpoint}/abort"))
            .json(&json!({ "job_id": job_id }))
            .send()
            .map_err(unreachable)?;
        match resp.status().as_u16() {
            200..=299 => Ok(true),
            404 => Ok(false),
            s => Err(AgentCallError::Rejected(format!("abort answered {s}"))),
        }
    }
}

/// Agent-side delivery of results over HTTP.
pub struct HttpResultSink {
    client: reqwest::blocking::Client,
}

impl HttpResultSink {
    pub fn new(timeout: Duration) -> Self {
        HttpResultSink {
            client: blocking_client(timeout),
        }
    }
}

impl ResultSink for HttpResultSink {
    fn push(
        &self,
        callback_url: &str,
        token: &str,
        bundle: &ResultBundle,
    ) -> Result<(), PushError> {
        let form = reqwest::blocking::multipart::Form::new()
            .text("exit_status", bundle.exit_status.as_str())
            .text("log", bundle.log_text.clone());
        let form = files_form(form, &bundle.outputs);
        let resp = self
            .client
            .post(callback_url)
            .bearer_auth(token)
            .multipart(form)
            .send()
            .map_err(|e| PushError::Transient(e.to_string()))?;
        let status = resp.status().as_u16();
        match status {
            200..=299 => Ok(()),
            401 | 403 => Err(PushError::Auth),
            400..=499 => Err(PushError::Rejected(
                resp.text().unwrap_or_else(|_| status.to_string()),
            )),
            _ => Err(PushError::Transient(format!("manager answered {status}"))),
        }
    }
}

struct RunningAgent {
    agent: Agent,
    server: tokio::task::JoinHandle<()>,
}

/// Runs a real agent behind a loopback HTTP server per instance.
pub struct HttpAgentSpawner {
    runtime: tokio::runtime::Handle,
    clock: Arc<dyn Clock>,
    sink: Arc<dyn ResultSink>,
    policy: PushPolicy,
    workroot: PathBuf,
    agents: Mutex<BTreeMap<String, RunningAgent>>,
}

impl HttpAgentSpawner {
    pub fn new(
        runtime: tokio::runtime::Handle,
        clock: Arc<dyn Clock>,
        sink: Arc<dyn ResultSink>,
        policy: PushPolicy,
        workroot: impl Into<PathBuf>,
    ) -> Self {
        HttpAgentSpawner {
            runtime,
            clock,
            sink,
            policy,
            workroot: workroot.into(),
            agents: Mutex::new(BTreeMap::new()),
        }
    }

    pub fn agent(&self, endpoint: &str) -> Option<Agent> {
        self.agents
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .get(endpoint)
            .map(|a| a.agent.clone())
    }
}

/// Binds a loopback listener and serves `router` with peer addresses.
pub fn spawn_server(
    runtime: &tokio::runtime::Handle,
    addr: SocketAddr,
    router: Router,
) -> std::io::Result<(SocketAddr, tokio::task::JoinHandle<()>)> {
    serve_listener(runtime, std::net::TcpListener::bind(addr)?, router)
}

/// Serves `router` on an already bound listener.
pub fn serve_listener(
    runtime: &tokio::runtime::Handle,
    std_listener: std::net::TcpListener,
    router: Router,
) -> std::io::Result<(SocketAddr, tokio::task::JoinHandle<()>)> {
    std_listener.set_nonblocking(true)?;
    let local = std_listener.local_addr()?;
    let _guard = runtime.enter();
    let listener = tokio::net::TcpListener::from_std(std_listener)?;
    let handle = runtime.spawn(async move {
        let app = router.into_make_service_with_connect_info::<SocketAddr>();
        if let Err(e) = axum::serve(listener, app).await {
            tracing::error!(error = %e, "http server stopped");
        }
    });
    Ok((local, handle))
}

impl AgentSpawner for HttpAgentSpawner {
    fn spawn(&self, handle: &str) -> Result<String, String> {
        let agent = Agent::new(
            self.clock.clone(),
            self.sink.clone(),
            self.policy,
            self.workroot.join(handle),
        );
        let (addr, server) = spawn_server(
            &self.runtime,
            SocketAddr::from(([127, 0, 0, 1], 0)),
            agent_router(agent.clone()),
        )
        .map_err(|e| e.to_string())?;
        let endpoint = format!("http://{addr}");
        self.agents
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .insert(endpoint.clone(), RunningAgent { agent, server });
        Ok(endpoint)
    }

    fn kill(&self, endpoint: &str) {
        let removed = self
            .agents
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .remove(endpoint);
        if let Some(a) = removed {
            a.server.abort();
            if let Some(job) = a.agent.status().job_id {
                let _ = a.agent.abort(job);
            }
        }
    }
}
