//! In-process cloud provider and a virtual agent fleet.
//!
//! `SimCloud` models launch, boot delay and failures behind the
//! `CloudProvider` trait. Where an instance's agent lives is up to an
//! `AgentSpawner`: real HTTP agents on loopback for live runs, or
//! `VirtualAgents`, whose jobs finish at clock-determined times, for the
//! simulator.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::clock::{CancelToken, Clock, ManualClock, Timestamp};
use crate::kernels::{nominal_duration, run_kernel};
use crate::model::JobId;
use crate::pool::{CloudProvider, InstanceDescription, InstanceStatus, ProviderError};
use crate::protocol::{
    AgentCallError, AgentClient, AgentMode, AgentStatus, ExecutePayload, ExecuteReply, ResultBundle,
};

/// Starts and stops the agent that runs inside an instance.
pub trait AgentSpawner: Send + Sync {
    /// Returns the agent's endpoint.
    fn spawn(&self, handle: &str) -> Result<String, String>;
    fn kill(&self, endpoint: &str);
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimCloudConfig {
    pub boot_delay_min: Duration,
    pub boot_delay_max: Duration,
    /// Probability that a launch request is refused outright.
    pub launch_failure_prob: f64,
    /// Probability that an accepted instance never becomes healthy.
    pub boot_failure_prob: f64,
    pub seed: u64,
}

impl Default for SimCloudConfig {
    fn default() -> Self {
        SimCloudConfig {
            boot_delay_min: Duration::from_secs(45),
            boot_delay_max: Duration::from_secs(45),
            launch_failure_prob: 0.0,
            boot_failure_prob: 0.0,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone)]
struct Instance {
    ready_at: Timestamp,
    boot_fails: bool,
    status: InstanceStatus,
    endpoint: Option<String>,
}

#[derive(Debug, Default)]
struct CloudState {
    instances: BTreeMap<String, Instance>,
    next: u64,
    launch_requests: u64,
}

pub struct SimCloud {
    clock: Arc<dyn Clock>,
    cfg: SimCloudConfig,
    spawner: Arc<dyn AgentSpawner>,
    rng: Mutex<ChaCha8Rng>,
    state: Mutex<CloudState>,
}

impl SimCloud {
    pub fn new(clock: Arc<dyn Clock>, cfg: SimCloudConfig, spawner: Arc<dyn AgentSpawner>) -> Self {
        SimCloud {
            rng: Mutex::new(ChaCha8Rng::seed_from_u64(cfg.seed)),
            clock,
            cfg,
            spawner,
            state: Mutex::new(CloudState::default()),
        }
    }

    fn state(&self) -> MutexGuard<'_, CloudState> {
        self.state.lock().unwrap_or_else(|p| p.into_inner())
    }

    /// Instances not yet terminated.
    pub fn live_instances(&self) -> usize {
        self.state()
            .instances
            .values()
            .filter(|i| matches!(i.status, InstanceStatus::Pending | InstanceStatus::Running))
            .count()
    }

    pub fn launch_requests(&self) -> u64 {
        self.state().launch_requests
    }

    /// Simulates the machine dying: the agent disappears and the instance
    /// reports an error.
    pub fn crash(&self, handle: &str) {
        let endpoint = {
            let mut st = self.state();
            let Some(inst) = st.instances.get_mut(handle) else {
                return;
            };
            inst.status = InstanceStatus::Error;
            inst.endpoint.take()
        };
        if let Some(ep) = endpoint {
            self.spawner.kill(&ep);
        }
    }

    /// Kills only the agent process; the instance keeps reporting running.
    pub fn kill_agent(&self, handle: &str) {
        let endpoint = self
            .state()
            .instances
            .get(handle)
            .and_then(|i| i.endpoint.clone());
        if let Some(ep) = endpoint {
            self.spawner.kill(&ep);
        }
    }
}

impl CloudProvider for SimCloud {
    fn launch(&self, _image_ref: &str, _size: &str) -> Result<String, ProviderError> {
        let now = self.clock.now();
        let (refused, delay, boot_fails) = {
            let mut rng = self.rng.lock().unwrap_or_else(|p| p.into_inner());
            let refused = self.cfg.launch_failure_prob > 0.0
                && rng.random_bool(self.cfg.launch_failure_prob.min(1.0));
            let lo = self.cfg.boot_delay_min.as_millis() as u64;
            let hi = (self.cfg.boot_delay_max.as_millis() as u64).max(lo);
            let delay = rng.random_range(lo..=hi);
            let boot_fails = self.cfg.boot_failure_prob > 0.0
                && rng.random_bool(self.cfg.boot_failure_prob.min(1.0));
            (refused, delay, boot_fails)
        };
        let mut st = self.state();
        st.launch_requests += 1;
        if refused {
            return Err(ProviderError::Failed("insufficient capacity".into()));
        }
        st.next += 1;
        let handle = format!("i-{:06}", st.next);
        st.instances.insert(
            handle.clone(),
            Instance {
                ready_at: now.plus(Duration::from_millis(delay)),
                boot_fails,
                status: InstanceStatus::Pending,
                endpoint: None,
            },
        );
        Ok(handle)
    }

    fn terminate(&self, handle: &str) -> Result<(), ProviderError> {
        let endpoint = {
            let mut st = self.state();
            let inst = st
                .instances
                .get_mut(handle)
                .ok_or_else(|| ProviderError::UnknownInstance(handle.to_string()))?;
            inst.status = InstanceStatus::Terminated;
            inst.endpoint.take()
        };
        if let Some(ep) = endpoint {
            self.spawner.kill(&ep);
        }
        Ok(())
    }

    fn describe(&self, handle: &str) -> InstanceDescription {
        let now = self.clock.now();
        let mut st = self.state();
        let Some(inst) = st.instances.get_mut(handle) else {
            return InstanceDescription {
                status: InstanceStatus::Terminated,
                endpoint: None,
            };
        };
        if inst.status == InstanceStatus::Pending && now >= inst.ready_at {
            if inst.boot_fails {
                inst.status = InstanceStatus::Error;
            } else {
                match self.spawner.spawn(handle) {
                    Ok(ep) => {
                        inst.status = InstanceStatus::Running;
                        inst.endpoint = Some(ep);
                    }
                    Err(e) => {
                        tracing::warn!(handle, error = %e, "agent failed to start");
                        inst.status = InstanceStatus::Error;
                    }
                }
            }
        }
        InstanceDescription {
            status: inst.status,
            endpoint: inst.endpoint.clone(),
        }
    }
}

#[derive(Debug)]
struct RunningJob {
    job_id: JobId,
    due_at: Timestamp,
    callback_url: String,
    token: String,
    bundle: ResultBundle,
}

#[derive(Debug)]
struct SimAgent {
    started_at: Timestamp,
    alive: bool,
    job: Option<RunningJob>,
    jobs_run: u64,
}

/// A delivery ready to be handed to the manager.
#[derive(Debug, Clone)]
pub struct Delivery {
    pub endpoint: String,
    pub callback_url: String,
    pub token: String,
    pub bundle: ResultBundle,
}

/// Virtual agents: kernels run instantly on a private virtual clock and
/// their results fall due at `accept time + nominal duration + push latency`.
pub struct VirtualAgents {
    clock: Arc<dyn Clock>,
    push_latency: Duration,
    agents: Mutex<BTreeMap<String, SimAgent>>,
}

impl VirtualAgents {
    pub fn new(clock: Arc<dyn Clock>, push_latency: Duration) -> Self {
        VirtualAgents {
            clock,
            push_latency,
            agents: Mutex::new(BTreeMap::new()),
        }
    }

    fn agents(&self) -> MutexGuard<'_, BTreeMap<String, SimAgent>> {
        self.agents.lock().unwrap_or_else(|p| p.into_inner())
    }

    /// Removes and returns every result whose time has come. Agents go idle
    /// as their result is handed over.
    pub fn due_deliveries(&self, now: Timestamp) -> Vec<Delivery> {
        let mut out = Vec::new();
        for (ep, agent) in self.agents().iter_mut() {
            if !agent.alive {
                continue;
            }
            if agent.job.as_ref().is_some_and(|j| j.due_at <= now) {
                let job = agent.job.take().expect("checked");
                agent.jobs_run += 1;
                out.push(Delivery {
                    endpoint: ep.clone(),
                    callback_url: job.callback_url,
                    token: job.token,
                    bundle: job.bundle,
                });
            }
        }
        out.sort_by_key(|d| d.bundle.job_id);
        out
    }

    /// Earliest pending result, for skipping idle stretches of time.
    pub fn next_due(&self) -> Option<Timestamp> {
        self.agents()
            .values()
            .filter(|a| a.alive)
            .filter_map(|a| a.job.as_ref().map(|j| j.due_at))
            .min()
    }

    pub fn running(&self) -> usize {
        self.agents()
            .values()
            .filter(|a| a.alive && a.job.is_some())
            .count()
    }
}

impl AgentSpawner for VirtualAgents {
    fn spawn(&self, handle: &str) -> Result<String, String> {
        let ep = format!("sim://{handle}");
        self.agents().insert(
            ep.clone(),
            SimAgent {
                started_at: self.clock.now(),
                alive: true,
                job: None,
                jobs_run: 0,
            },
        );
        Ok(ep)
    }

    fn kill(&self, endpoint: &str) {
        if let Some(a) = self.agents().get_mut(endpoint) {
            a.alive = false;
            a.job = None;
        }
    }
}

impl AgentClient for VirtualAgents {
    fn execute(
        &self,
        endpoint: &str,
        payload: &ExecutePayload,
    ) -> Result<ExecuteReply, AgentCallError> {
        let now = self.clock.now();
        let mut agents = self.agents();
        let agent = agents
            .get_mut(endpoint)
            .filter(|a| a.alive)
            .ok_or_else(|| AgentCallError::Unreachable(endpoint.to_string()))?;
        if agent.job.is_some() {
            return Ok(ExecuteReply::Busy);
        }
        if payload.callback_url.is_empty() || payload.token.is_empty() {
            return Err(AgentCallError::Rejected("missing callback or token".into()));
        }
        let virtual_clock = ManualClock::new(now);
        let result = run_kernel(
            payload.kind,
            &payload.params,
            &payload.inputs,
            &virtual_clock,
            &CancelToken::new(),
        )
        .expect("kernel without cancellation always finishes");
        let duration = nominal_duration(payload.kind, &payload.params);
        agent.job = Some(RunningJob {
            job_id: payload.job_id,
            due_at: now.plus(duration + self.push_latency),
            callback_url: payload.callback_url.clone(),
            token: payload.token.clone(),
            bundle: ResultBundle::from_kernel(payload.job_id, result),
        });
        Ok(ExecuteReply::Accepted)
    }

    fn status(&self, endpoint: &str) -> Result<AgentStatus, AgentCallError> {
        let now = self.clock.now();
        let agents = self.agents();
        let agent = agents
            .get(endpoint)
            .filter(|a| a.alive)
            .ok_or_else(|| AgentCallError::Unreachable(endpoint.to_string()))?;
        Ok(AgentStatus {
            mode: if agent.job.is_some() {
                AgentMode::Busy
            } else {
                AgentMode::Idle
            },
            job_id: agent.job.as_ref().map(|j| j.job_id),
            uptime_ms: now.since(agent.started_at).as_millis() as u64,
            fault: None,
            jobs_run: agent.jobs_run,
            last_push_attempts: 0,
            log: Vec::new(),
        })
    }

    fn abort(&self, endpoint: &str, job_id: JobId) -> Result<bool, AgentCallError> {
        let mut agents = self.agents();
        let agent = agents
            .get_mut(endpoint)
            .filter(|a| a.alive)
            .ok_or_else(|| AgentCallError::Unreachable(endpoint.to_string()))?;
        if agent.job.as_ref().is_some_and(|j| j.job_id == job_id) {
            agent.job = None;
            return Ok(true);
        }
        Ok(false)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::Files;
    use crate::model::JobKind;

    fn setup(cfg: SimCloudConfig) -> (Arc<ManualClock>, Arc<VirtualAgents>, SimCloud) {
        let clock = Arc::new(ManualClock::new(Timestamp(0)));
        let agents = Arc::new(VirtualAgents::new(clock.clone(), Duration::ZERO));
        let cloud = SimCloud::new(clock.clone(), cfg, agents.clone());
        (clock, agents, cloud)
    }

    fn payload(id: u64, ms: u64) -> ExecutePayload {
        ExecutePayload {
            job_id: JobId(id),
            kind: JobKind::Sleep,
            params: [("duration_ms".to_string(), ms.to_string())].into(),
            inputs: Files::new(),
            callback_url: "sim://manager".into(),
            token: "t".into(),
        }
    }

    #[test]
    fn instance_boots_after_delay() {
        let (clock, _agents, cloud) = setup(SimCloudConfig::default());
        let h = cloud.launch("img", "std").unwrap();
        assert_eq!(cloud.describe(&h).status, InstanceStatus::Pending);
        clock.set(Timestamp::from_secs(45));
        let d = cloud.describe(&h);
        assert_eq!(d.status, InstanceStatus::Running);
        assert_eq!(d.endpoint.as_deref(), Some("sim://i-000001"));
        cloud.terminate(&h).unwrap();
        cloud.terminate(&h).unwrap();
        assert_eq!(cloud.describe(&h).status, InstanceStatus::Terminated);
        assert_eq!(cloud.live_instances(), 0);
    }

    #[test]
    fn failures_are_seeded() {
        let cfg = SimCloudConfig {
            launch_failure_prob: 0.5,
            ..SimCloudConfig::default()
        };
        let outcomes = |cfg: &SimCloudConfig| {
            let (_c, _a, cloud) = setup(cfg.clone());
            (0..32)
                .map(|_| cloud.launch("i", "s").is_ok())
                .collect::<Vec<_>>()
        };
        let a = outcomes(&cfg);
        assert_eq!(a, outcomes(&cfg));
        assert!(a.iter().any(|x| *x) && a.iter().any(|x| !*x));
    }

    #[test]
    fn virtual_agent_delivers_when_due() {
        let (clock, agents, cloud) = setup(SimCloudConfig::default());
        let h = cloud.launch("img", "std").unwrap();
        clock.set(Timestamp::from_secs(45));
        let ep = cloud.describe(&h).endpoint.unwrap();
        assert_eq!(
            agents.execute(&ep, &payload(1, 300_000)).unwrap(),
            ExecuteReply::Accepted
        );
        assert_eq!(
            agents.execute(&ep, &payload(2, 1)).unwrap(),
            ExecuteReply::Busy
        );
        assert_eq!(agents.status(&ep).unwrap().mode, AgentMode::Busy);
        assert!(agents.due_deliveries(Timestamp::from_secs(344)).is_empty());
        assert_eq!(agents.next_due(), Some(Timestamp::from_secs(345)));
        let d = agents.due_deliveries(Timestamp::from_secs(345));
        assert_eq!(d.len(), 1);
        assert!(d[0].bundle.outputs.contains_key("done.txt"));
        assert_eq!(agents.status(&ep).unwrap().mode, AgentMode::Idle);
    }

    #[test]
    fn crash_makes_agent_unreachable() {
        let (clock, agents, cloud) = setup(SimCloudConfig::default());
        let h = cloud.launch("img", "std").unwrap();
        clock.set(Timestamp::from_secs(45));
        let ep = cloud.describe(&h).endpoint.unwrap();
        agents.execute(&ep, &payload(1, 1000)).unwrap();
        cloud.crash(&h);
        assert!(matches!(
            agents.status(&ep),
            Err(AgentCallError::Unreachable(_))
        ));
        assert!(agents.due_deliveries(Timestamp::from_secs(100)).is_empty());
        assert_eq!(cloud.describe(&h).status, InstanceStatus::Error);
    }

    #[test]
    fn abort_only_matching_job() {
        let (clock, agents, cloud) = setup(SimCloudConfig::default());
        let h = cloud.launch("img", "std").unwrap();
        clock.set(Timestamp::from_secs(45));
        let ep = cloud.describe(&h).endpoint.unwrap();
        agents.execute(&ep, &payload(1, 1000)).unwrap();
        assert!(!agents.abort(&ep, JobId(2)).unwrap());
        assert!(agents.abort(&ep, JobId(1)).unwrap());
        assert_eq!(agents.running(), 0);
    }
}
