//! Live wiring: opens the store, recovers, starts the periodic loops and
//! the HTTP server. Policy code is the same the simulator drives; here the
//! loops run on threads against the system (or scaled) clock.

use std::collections::BTreeSet;
use std::net::{SocketAddr, TcpListener};
use std::path::PathBuf;
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::agent::Agent;
use crate::clock::{CancelToken, Clock, ScaledClock, SystemClock, Timestamp};
use crate::config::{Config, ProviderKind};
use crate::dispatch::QueueManager;
use crate::grid::{available_cores, LocalScheduler, SimGrid, WorkerPool};
use crate::http::{
    agent_router, manager_router, serve_listener, HttpAgentClient, HttpAgentSpawner,
    HttpResultSink, ManagerState,
};
use crate::manager::JobService;
use crate::pool::{CloudProvider, ExternalStubProvider, VmPool};
use crate::protocol::{AgentClient, PushPolicy};
use crate::simcloud::SimCloud;
use crate::store::{RecoveryInput, RecoveryReport, Store, StoreOptions};
use crate::workspace::Workspace;

/// A running service. Dropping it without `shutdown` also stops it.
pub struct Service {
    pub addr: SocketAddr,
    pub store: Arc<Store>,
    pub service: Arc<JobService>,
    pub queue: Arc<QueueManager>,
    pub pool: Arc<VmPool>,
    pub scheduler: Arc<LocalScheduler>,
    pub sim_cloud: Option<Arc<SimCloud>>,
    pub spawner: Arc<HttpAgentSpawner>,
    pub recovery: RecoveryReport,
    stop: Arc<CancelToken>,
    loops: Vec<thread::JoinHandle<()>>,
    // Dropped last, after the runtime: blocking HTTP clients must not be
    // dropped from inside async tasks.
    runtime: Option<tokio::runtime::Runtime>,
    _clients: (Arc<HttpAgentClient>, Arc<HttpResultSink>),
}

fn make_clock(cfg: &Config) -> Arc<dyn Clock> {
    if cfg.time_scale > 1.0 {
        Arc::new(ScaledClock::new(SystemClock.now(), cfg.time_scale))
    } else {
        Arc::new(SystemClock)
    }
}

fn spawn_loop(
    name: &str,
    stop: Arc<CancelToken>,
    clock: Arc<dyn Clock>,
    every: Duration,
    mut body: impl FnMut(Timestamp) + Send + 'static,
) -> thread::JoinHandle<()> {
    thread::Builder::new()
        .name(name.to_string())
        .spawn(move || loop {
            body(clock.now());
            if stop.sleep(&*clock, every) {
                break;
            }
        })
        .expect("spawn loop thread")
}

pub fn start(cfg: &Config) -> Result<Service, String> {
    cfg.validate()?;
    let clock = make_clock(cfg);
    std::fs::create_dir_all(&cfg.data_dir)
        .map_err(|e| format!("{}: {e}", cfg.data_dir.display()))?;
    let store = Arc::new(
        Store::open(
            &cfg.data_dir.join("store"),
            StoreOptions {
                sync: cfg.store_sync,
                compact_every: cfg.compact_every,
            },
            clock.clone(),
        )
        .map_err(|e| format!("open store: {e}"))?,
    );
    let workspace =
        Workspace::new(cfg.data_dir.join("jobs")).map_err(|e| format!("workspace: {e}"))?;

    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .thread_name("burstq-http")
        .build()
        .map_err(|e| format!("tokio runtime: {e}"))?;
    let listener = TcpListener::bind(cfg.bind).map_err(|e| format!("bind {}: {e}", cfg.bind))?;
    let addr = listener.local_addr().map_err(|e| e.to_string())?;
    let callback_base = cfg
        .public_url
        .clone()
        .unwrap_or_else(|| format!("http://{addr}"));

    let agent_client = Arc::new(HttpAgentClient::new(cfg.dispatch.dispatch_timeout));
    let sink = Arc::new(HttpResultSink::new(cfg.dispatch.dispatch_timeout));
    let spawner = Arc::new(HttpAgentSpawner::new(
        runtime.handle().clone(),
        clock.clone(),
        sink.clone(),
        cfg.push,
        cfg.data_dir.join("agents"),
    ));
    let (provider, sim_cloud): (Arc<dyn CloudProvider>, _) = match cfg.provider {
        ProviderKind::Sim => {
            let c = Arc::new(SimCloud::new(
                clock.clone(),
                cfg.simcloud.clone(),
                spawner.clone(),
            ));
            (c.clone(), Some(c))
        }
        ProviderKind::ExternalStub => (Arc::new(ExternalStubProvider), None),
    };

    // Restart recovery: only VMs whose agent answers are kept.
    let alive: BTreeSet<_> = store
        .vm_list(None)
        .into_iter()
        .filter(|v| v.state.is_live())
        .filter(|v| {
            v.endpoint
                .as_deref()
                .is_some_and(|ep| agent_client.status(ep).is_ok())
        })
        .map(|v| v.id)
        .collect();
    let recovery = store
        .recover(&RecoveryInput {
            alive,
            max_attempts: cfg.dispatch.max_attempts,
            billing_period: cfg.scaling.billing_period,
            now: clock.now(),
        })
        .map_err(|e| format!("recovery: {e}"))?;
    tracing::info!(?recovery, "recovered");

    let pool = Arc::new(VmPool::new(
        store.clone(),
        provider,
        agent_client.clone(),
        cfg.scaling.clone(),
        clock.clone(),
        Box::new(ChaCha8Rng::from_os_rng()),
    ));
    let queue = Arc::new(QueueManager::new(
        store.clone(),
        pool.clone(),
        workspace.clone(),
        cfg.dispatch.clone(),
        callback_base,
    ));
    let local_cfg = cfg.local.clone().clamped(available_cores());
    let local_pool = Arc::new(WorkerPool::new(
        "local",
        local_cfg.max_local_jobs,
        clock.clone(),
    ));
    let prepare_pool = Arc::new(WorkerPool::new(
        "prepare",
        local_cfg.prepare_pool_size,
        clock.clone(),
    ));
    let remote_poll = local_cfg.remote_poll_interval;
    let scheduler = Arc::new(LocalScheduler::new(
        store.clone(),
        workspace.clone(),
        local_cfg,
        clock.clone(),
        local_pool,
        prepare_pool,
        Arc::new(SimGrid::new(cfg.simgrid.clone())),
    ));
    let service = Arc::new(JobService::new(
        store.clone(),
        workspace,
        cfg.service.clone(),
        clock.clone(),
        Some(pool.clone()),
        Some(scheduler.clone()),
    ));

    let router = manager_router(ManagerState {
        service: service.clone(),
        queue: Some(queue.clone()),
        lockdown: cfg.lockdown,
        debug_trace: cfg.debug_trace,
    });
    serve_listener(runtime.handle(), listener, router).map_err(|e| format!("serve: {e}"))?;

    let stop = Arc::new(CancelToken::new());
    let poll = cfg.dispatch.poll_interval;
    let loops = vec![
        spawn_loop("cloud-step", stop.clone(), clock.clone(), poll, {
            let queue = queue.clone();
            move |now| {
                queue.cloud_step(now);
            }
        }),
        spawn_loop("local-tick", stop.clone(), clock.clone(), poll, {
            let s = scheduler.clone();
            move |now| {
                s.tick(now);
            }
        }),
        spawn_loop("remote-poll", stop.clone(), clock.clone(), remote_poll, {
            let s = scheduler.clone();
            move |now| {
                s.remote_poll_tick(now);
            }
        }),
    ];
    tracing::info!(%addr, "manager listening");

    Ok(Service {
        addr,
        store,
        service,
        queue,
        pool,
        scheduler,
        sim_cloud,
        spawner,
        recovery,
        stop,
        loops,
        runtime: Some(runtime),
        _clients: (agent_client, sink),
    })
}

impl Service {
    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Blocks until Ctrl-C.
    pub fn wait_for_interrupt(&self) {
        if let Some(rt) = &self.runtime {
            let _ = rt.block_on(tokio::signal::ctrl_c());
        }
    }

    /// Stops the loops and the server. Persistent state is left as is;
    /// the next start recovers from it.
    pub fn shutdown(mut self) {
        self.stop_all();
    }

    fn stop_all(&mut self) {
        self.stop.cancel();
        for l in self.loops.drain(..) {
            let _ = l.join();
        }
        if let Some(rt) = self.runtime.take() {
            rt.shutdown_timeout(Duration::from_secs(2));
        }
    }
}

impl Drop for Service {
    fn drop(&mut self) {
        self.stop_all();
    }
}

/// A standalone agent serving the agent HTTP API.
pub struct AgentServer {
    pub addr: SocketAddr,
    pub agent: Agent,
    runtime: Option<tokio::runtime::Runtime>,
    _sink: Arc<HttpResultSink>,
}

pub fn start_agent(
    bind: SocketAddr,
    workdir: PathBuf,
    policy: PushPolicy,
    push_timeout: Duration,
) -> Result<AgentServer, String> {
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .thread_name("burstq-agent")
        .build()
        .map_err(|e| format!("tokio runtime: {e}"))?;
    let sink = Arc::new(HttpResultSink::new(push_timeout));
    let agent = Agent::new(Arc::new(SystemClock), sink.clone(), policy, workdir);
    let listener = TcpListener::bind(bind).map_err(|e| format!("bind {bind}: {e}"))?;
    let (addr, _) = serve_listener(runtime.handle(), listener, agent_router(agent.clone()))
        .map_err(|e| format!("serve: {e}"))?;
    Ok(AgentServer {
        addr,
        agent,
        runtime: Some(runtime),
        _sink: sink,
    })
}

impl AgentServer {
    pub fn wait_for_interrupt(&self) {
        if let Some(rt) = &self.runtime {
            let _ = rt.block_on(tokio::signal::ctrl_c());
        }
    }
}

impl Drop for AgentServer {
    fn drop(&mut self) {
        if let Some(rt) = self.runtime.take() {
            rt.shutdown_timeout(Duration::from_secs(2));
        }
    }
}
