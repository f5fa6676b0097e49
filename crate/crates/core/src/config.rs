//! Flat `key = value` configuration. Blank lines and `#` comments are
//! ignored; every key has a default, and unknown keys are errors.
//!
//! Durations accept `ms`, `s`, `m` and `h` suffixes; a bare number is
//! seconds.

use std::fmt::Write as _;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Duration;

use crate::dispatch::DispatchConfig;
use crate::grid::{GridDuration, LocalSchedulerConfig, SimGridConfig};
use crate::manager::ServiceConfig;
use crate::pool::ScalingConfig;
use crate::protocol::PushPolicy;
use crate::simcloud::SimCloudConfig;

pub const CONFIG_ENV: &str = "BURSTQ_CONFIG";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProviderKind {
    Sim,
    ExternalStub,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub bind: SocketAddr,
    /// Base URL agents use to reach the manager; defaults to `http://<bind>`.
    pub public_url: Option<String>,
    pub lockdown: bool,
    pub data_dir: PathBuf,
    pub debug_trace: bool,
    /// Live clock acceleration; 1 is real time.
    pub time_scale: f64,
    pub store_sync: bool,
    pub compact_every: u64,
    pub service: ServiceConfig,
    pub dispatch: DispatchConfig,
    pub scaling: ScalingConfig,
    pub provider: ProviderKind,
    pub simcloud: SimCloudConfig,
    pub local: LocalSchedulerConfig,
    pub simgrid: SimGridConfig,
    pub push: PushPolicy,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            bind: SocketAddr::from(([127, 0, 0, 1], 8080)),
            public_url: None,
            lockdown: true,
            data_dir: PathBuf::from("burstq-data"),
            debug_trace: false,
            time_scale: 1.0,
            store_sync: true,
            compact_every: 0,
            service: ServiceConfig::default(),
            dispatch: DispatchConfig::default(),
            scaling: ScalingConfig::default(),
            provider: ProviderKind::Sim,
            simcloud: SimCloudConfig::default(),
            local: LocalSchedulerConfig::default(),
            simgrid: SimGridConfig::default(),
            push: PushPolicy::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("config line {line}: {message}")]
pub struct ConfigError {
    pub line: usize,
    pub message: String,
}

pub fn parse_duration(s: &str) -> Result<Duration, String> {
    let s = s.trim();
    let (num, unit) = match s.find(|c: char| c.is_ascii_alphabetic()) {
        Some(i) => (&s[..i], &s[i..]),
        None => (s, "s"),
    };
    let v: f64 = num
        .trim()
        .parse()
        .map_err(|_| format!("bad duration {s:?}"))?;
    let secs = match unit {
        "ms" => v / 1000.0,
        "s" => v,
        "m" => v * 60.0,
        "h" => v * 3600.0,
        _ => return Err(format!("bad duration unit in {s:?}")),
    };
    if !secs.is_finite() || secs < 0.0 {
        return Err(format!("bad duration {s:?}"));
    }
    Ok(Duration::from_secs_f64(secs))
}

fn fmt_duration(d: Duration) -> String {
    if d.subsec_millis() != 0 {
        format!("{}ms", d.as_millis())
    } else {
        format!("{}s", d.as_secs())
    }
}

fn parse_bool(s: &str) -> Result<bool, String> {
    match s.trim().to_ascii_lowercase().as_str() {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(format!("expected a boolean, got {s:?}")),
    }
}

fn num<T: std::str::FromStr>(s: &str) -> Result<T, String> {
    s.trim()
        .parse()
        .map_err(|_| format!("expected a number, got {s:?}"))
}

impl Config {
    pub fn parse(text: &str) -> Result<Config, ConfigError> {
        let mut cfg = Config::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split_once('#').map_or(raw, |(l, _)| l).trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| ConfigError {
                line: i + 1,
                message,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected key = value, got {line:?}")))?;
            cfg.set(key.trim(), value.trim()).map_err(err)?;
        }
        cfg.validate()
            .map_err(|message| ConfigError { line: 0, message })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Config, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Config::parse(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    /// An explicit path wins; then `BURSTQ_CONFIG`; then defaults.
    pub fn resolve(path: Option<&Path>) -> Result<Config, String> {
        match path {
            Some(p) => Config::load(p),
            None => match std::env::var_os(CONFIG_ENV) {
                Some(p) => Config::load(Path::new(&p)),
                None => Ok(Config::default()),
            },
        }
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<(), String> {
        match key {
            "bind" => self.bind = v.parse().map_err(|_| format!("bad address {v:?}"))?,
            "public_url" => self.public_url = Some(v.trim_end_matches('/').to_string()),
            "lockdown" => self.lockdown = parse_bool(v)?,
            "data_dir" => self.data_dir = PathBuf::from(v),
            "debug_trace" => self.debug_trace = parse_bool(v)?,
            "time_scale" => self.time_scale = num(v)?,
            "store.sync" => self.store_sync = parse_bool(v)?,
            "store.compact_every" => self.compact_every = num(v)?,
            "max_upload_bytes" => self.service.max_upload_bytes = num(v)?,
            "routing.local_marker_threshold" => {
                self.service.routing.local_marker_threshold = num(v)?
            }
            "routing.big_memory_marker_threshold" => {
                self.service.routing.big_memory_marker_threshold = num(v)?
            }
            "routing.max_marker_capacity" => self.service.routing.max_marker_capacity = num(v)?,
            "routing.gb_per_core" => self.service.routing.gb_per_core = num(v)?,
            "routing.gb_at_threshold" => self.service.routing.gb_at_threshold = num(v)?,
            "routing.cloud_enabled" => self.service.routing.cloud_enabled = parse_bool(v)?,
            "dispatch.poll_interval" => self.dispatch.poll_interval = parse_duration(v)?,
            "dispatch.timeout" => self.dispatch.dispatch_timeout = parse_duration(v)?,
            "dispatch.max_retries" => self.dispatch.max_dispatch_retries = num(v)?,
            "dispatch.max_attempts" => self.dispatch.max_attempts = num(v)?,
            "scaling.min_vms" => self.scaling.min_vms = num(v)?,
            "scaling.max_vms" => self.scaling.max_vms = num(v)?,
            "scaling.idle_grace" => self.scaling.idle_grace = parse_duration(v)?,
            "scaling.terminate_window" => self.scaling.terminate_window = parse_duration(v)?,
            "scaling.billing_period" => self.scaling.billing_period = parse_duration(v)?,
            "scaling.boot_budget" => self.scaling.boot_budget = parse_duration(v)?,
            "scaling.unit_price" => self.scaling.unit_price = num(v)?,
            "scaling.image_ref" => self.scaling.image_ref = v.to_string(),
            "scaling.instance_size" => self.scaling.instance_size = v.to_string(),
            "provider" => {
                self.provider = match v {
                    "sim" => ProviderKind::Sim,
                    "external-stub" => ProviderKind::ExternalStub,
                    _ => return Err(format!("provider must be sim or external-stub, got {v:?}")),
                }
            }
            "sim.boot_delay_min" => self.simcloud.boot_delay_min = parse_duration(v)?,
            "sim.boot_delay_max" => self.simcloud.boot_delay_max = parse_duration(v)?,
            "sim.boot_delay" => {
                let d = parse_duration(v)?;
                self.simcloud.boot_delay_min = d;
                self.simcloud.boot_delay_max = d;
            }
            "sim.launch_failure_prob" => self.simcloud.launch_failure_prob = num(v)?,
            "sim.boot_failure_prob" => self.simcloud.boot_failure_prob = num(v)?,
            "sim.seed" => self.simcloud.seed = num(v)?,
            "local.max_local_jobs" => self.local.max_local_jobs = num(v)?,
            "local.prepare_pool_size" => self.local.prepare_pool_size = num(v)?,
            "local.remote_poll_interval" => self.local.remote_poll_interval = parse_duration(v)?,
            "local.submit_latency_small" => self.local.submit_latency.small = parse_duration(v)?,
            "local.submit_latency_large" => self.local.submit_latency.large = parse_duration(v)?,
            "local.size_cutoff_bytes" => self.local.submit_latency.size_cutoff_bytes = num(v)?,
            "local.submit_timeout_prob" => self.local.submit_timeout_prob = num(v)?,
            "grid.queue_wait_min" => self.simgrid.queue_wait_min = parse_duration(v)?,
            "grid.queue_wait_max" => self.simgrid.queue_wait_max = parse_duration(v)?,
            "grid.duration" => {
                self.simgrid.duration = match v {
                    "kernel" => GridDuration::Kernel,
                    "synthetic" => SimGridConfig::synthetic(),
                    _ => {
                        return Err(format!(
                            "grid.duration must be kernel or synthetic, got {v:?}"
                        ))
                    }
                }
            }
            "grid.seed" => self.simgrid.seed = num(v)?,
            "push.initial_backoff" => self.push.initial_backoff = parse_duration(v)?,
            "push.factor" => self.push.factor = num(v)?,
            "push.max_backoff" => self.push.max_backoff = parse_duration(v)?,
            "push.max_attempts" => self.push.max_attempts = num(v)?,
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), String> {
        self.service.routing.validate()?;
        self.scaling.validate()?;
        self.dispatch.validate()?;
        self.local.validate()?;
        if !(self.time_scale >= 1.0) {
            return Err("time_scale must be at least 1".into());
        }
        for (k, p) in [
            ("sim.launch_failure_prob", self.simcloud.launch_failure_prob),
            ("sim.boot_failure_prob", self.simcloud.boot_failure_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(format!("{k} must be in [0, 1]"));
            }
        }
        if self.push.max_attempts == 0 {
            return Err("push.max_attempts must be at least 1".into());
        }
        Ok(())
    }

    pub fn callback_base(&self) -> String {
        self.public_url
            .clone()
            .unwrap_or_else(|| format!("http://{}", self.bind))
    }

    /// The configuration as a file, every key with its current value.
    pub fn render(&self) -> String {
        let c = self;
        let r = &c.service.routing;
        let s = &c.scaling;
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("bind", c.bind.to_string());
        if let Some(u) = &c.public_url {
            kv("public_url", u.clone());
        }
        kv("lockdown", c.lockdown.to_string());
        kv("data_dir", c.data_dir.display().to_string());
        kv("debug_trace", c.debug_trace.to_string());
        kv("time_scale", c.time_scale.to_string());
        kv("store.sync", c.store_sync.to_string());
        kv("store.compact_every", c.compact_every.to_string());
        kv("max_upload_bytes", c.service.max_upload_bytes.to_string());
        kv(
            "routing.local_marker_threshold",
            r.local_marker_threshold.to_string(),
        );
        kv(
            "routing.big_memory_marker_threshold",
            r.big_memory_marker_threshold.to_string(),
        );
        kv(
            "routing.max_marker_capacity",
            r.max_marker_capacity.to_string(),
        );
        kv("routing.gb_per_core", r.gb_per_core.to_string());
        kv("routing.gb_at_threshold", r.gb_at_threshold.to_string());
        kv("routing.cloud_enabled", r.cloud_enabled.to_string());
        kv(
            "dispatch.poll_interval",
            fmt_duration(c.dispatch.poll_interval),
        );
        kv(
            "dispatch.timeout",
            fmt_duration(c.dispatch.dispatch_timeout),
        );
        kv(
            "dispatch.max_retries",
            c.dispatch.max_dispatch_retries.to_string(),
        );
        kv("dispatch.max_attempts", c.dispatch.max_attempts.to_string());
        kv("scaling.min_vms", s.min_vms.to_string());
        kv("scaling.max_vms", s.max_vms.to_string());
        kv("scaling.idle_grace", fmt_duration(s.idle_grace));
        kv("scaling.terminate_window", fmt_duration(s.terminate_window));
        kv("scaling.billing_period", fmt_duration(s.billing_period));
        kv("scaling.boot_budget", fmt_duration(s.boot_budget));
        kv("scaling.unit_price", s.unit_price.to_string());
        kv("scaling.image_ref", s.image_ref.clone());
        kv("scaling.instance_size", s.instance_size.clone());
        kv(
            "provider",
            match c.provider {
                ProviderKind::Sim => "sim",
                ProviderKind::ExternalStub => "external-stub",
            }
            .into(),
        );
        kv(
            "sim.boot_delay_min",
            fmt_duration(c.simcloud.boot_delay_min),
        );
        kv(
            "sim.boot_delay_max",
            fmt_duration(c.simcloud.boot_delay_max),
        );
        kv(
            "sim.launch_failure_prob",
            c.simcloud.launch_failure_prob.to_string(),
        );
        kv(
            "sim.boot_failure_prob",
            c.simcloud.boot_failure_prob.to_string(),
        );
        kv("sim.seed", c.simcloud.seed.to_string());
        kv("local.max_local_jobs", c.local.max_local_jobs.to_string());
        kv(
            "local.prepare_pool_size",
            c.local.prepare_pool_size.to_string(),
        );
        kv(
            "local.remote_poll_interval",
            fmt_duration(c.local.remote_poll_interval),
        );
        kv(
            "local.submit_latency_small",
            fmt_duration(c.local.submit_latency.small),
        );
        kv(
            "local.submit_latency_large",
            fmt_duration(c.local.submit_latency.large),
        );
        kv(
            "local.size_cutoff_bytes",
            c.local.submit_latency.size_cutoff_bytes.to_string(),
        );
        kv(
            "local.submit_timeout_prob",
            c.local.submit_timeout_prob.to_string(),
        );
        kv(
            "grid.queue_wait_min",
            fmt_duration(c.simgrid.queue_wait_min),
        );
        kv(
            "grid.queue_wait_max",
            fmt_duration(c.simgrid.queue_wait_max),
        );
        kv(
            "grid.duration",
            match c.simgrid.duration {
                GridDuration::Kernel => "kernel",
                GridDuration::Synthetic { .. } => "synthetic",
            }
            .into(),
        );
        kv("grid.seed", c.simgrid.seed.to_string());
        kv("push.initial_backoff", fmt_duration(c.push.initial_backoff));
        kv("push.factor", c.push.factor.to_string());
        kv("push.max_backoff", fmt_duration(c.push.max_backoff));
        kv("push.max_attempts", c.push.max_attempts.to_string());
        out
    }
}
