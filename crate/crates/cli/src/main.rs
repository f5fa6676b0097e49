//! `burstq`: run the manager or an agent, talk to a running manager, and
//! drive the simulator.
//!
//! Failures print a JSON object `{"error": CODE, "message": ...}` on stderr
//! and exit with status 1.

use std::io::Write as _;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use burstq_core::config::Config;
use burstq_core::kernels::ExecMode;
use burstq_core::sim::{run_simulation, Acceleration, SimConfig};
use burstq_core::store::load_dir;
use burstq_core::workload::{generate_workload, WorkloadProfile};
use clap::{Parser, Subcommand};
use reqwest::blocking::{multipart, Client, Response};
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "burstq", version, about = "Cloud-bursting batch job service")]
struct Cli {
    /// Manager base URL for client commands.
    #[arg(
        long,
        global = true,
        env = "BURSTQ_URL",
        default_value = "http://127.0.0.1:8080"
    )]
    url: String,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the manager until interrupted.
    Serve {
        /// Config file; falls back to $BURSTQ_CONFIG, then defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides `bind` from the config.
        #[arg(long)]
        bind: Option<SocketAddr>,
        /// Overrides `data_dir` from the config.
        #[arg(long)]
        data_dir: Option<PathBuf>,
        /// Print the effective configuration and exit.
        #[arg(long)]
        print_config: bool,
    },
    /// Run a standalone agent.
    Agent {
        #[arg(long)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: std::net::IpAddr,
        #[arg(long, default_value = "burstq-agent")]
        workdir: PathBuf,
    },
    /// Submit a job.
    Submit {
        #[arg(long = "type")]
        kind: String,
        /// Input file as NAME=PATH; repeatable.
        #[arg(long = "file", value_parser = parse_kv)]
        files: Vec<(String, String)>,
        /// Kernel parameter as KEY=VALUE; repeatable.
        #[arg(long = "param", value_parser = parse_kv)]
        params: Vec<(String, String)>,
        #[arg(long)]
        backend: Option<String>,
        #[arg(long)]
        derive_from: Option<String>,
        #[arg(long)]
        markers: Option<u32>,
        #[arg(long)]
        samples: Option<u32>,
        #[arg(long)]
        owner: Option<String>,
    },
    Status {
        id: String,
    },
    /// Download and unpack a job's results.
    Results {
        id: String,
        #[arg(long)]
        out: PathBuf,
    },
    Cancel {
        id: String,
    },
    Jobs {
        #[arg(long)]
        state: Option<String>,
        #[arg(long)]
        backend: Option<String>,
        #[arg(long)]
        owner: Option<String>,
    },
    Vms,
    Accounting,
    /// Run the simulator over a generated workload.
    Simulate {
        /// `paper-daily` or a JSON profile file.
        #[arg(long, default_value = "paper-daily")]
        profile: String,
        #[arg(long, default_value_t = 1.0)]
        days: f64,
        /// Virtual seconds per wall second, or `max`.
        #[arg(long, default_value = "max")]
        accel: String,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Service config whose policy settings the simulation uses.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Inspect the persistent store.
    Store {
        #[command(subcommand)]
        cmd: StoreCmd,
    },
}

#[derive(Subcommand)]
enum StoreCmd {
    /// Print the current snapshot (and optionally the audit log) as JSON.
    Dump {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[arg(long)]
        audit: bool,
    },
}

fn parse_kv(s: &str) -> Result<(String, String), String> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| format!("expected KEY=VALUE, got {s:?}"))?;
    if k.is_empty() {
        return Err(format!("empty key in {s:?}"));
    }
    Ok((k.to_string(), v.to_string()))
}

struct Failure {
    code: String,
    message: String,
}

impl Failure {
    fn new(code: &str, message: impl Into<String>) -> Self {
        Failure {
            code: code.into(),
            message: message.into(),
        }
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn client() -> CliResult<Client> {
    Client::builder()
        .timeout(Duration::from_secs(300))
        .build()
        .map_err(|e| Failure::new("ClientError", e.to_string()))
}

/// Passes 2xx through; turns the service's error body into a failure.
fn check(resp: Result<Response, reqwest::Error>) -> CliResult<Response> {
    let resp = resp.map_err(|e| Failure::new("Unreachable", e.to_string()))?;
    if resp.status().is_success() {
        return Ok(resp);
    }
    let status = resp.status();
    let body: Value = resp.json().unwrap_or(Value::Null);
    Err(Failure {
        code: body["error"].as_str().unwrap_or("HttpError").to_string(),
        message: body["message"]
            .as_str()
            .map_or_else(|| format!("service answered {status}"), str::to_string),
    })
}

/// Writes a line to stdout, ignoring a closed pipe.
fn emit(v: impl std::fmt::Display) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{v}");
    let _ = out.flush();
}

fn print_json(resp: Response) -> CliResult {
    let v: Value = resp
        .json()
        .map_err(|e| Failure::new("BadResponse", e.to_string()))?;
    emit(serde_json::to_string_pretty(&v).expect("json"));
    Ok(())
}

fn get(url: &str) -> CliResult {
    print_json(check(client()?.get(url).send())?)
}

fn resolve_config(path: Option<&Path>) -> CliResult<Config> {
    Config::resolve(path).map_err(|e| Failure::new("ConfigError", e))
}

fn serve(
    config: Option<PathBuf>,
    bind: Option<SocketAddr>,
    data_dir: Option<PathBuf>,
    print: bool,
) -> CliResult {
    let mut cfg = resolve_config(config.as_deref())?;
    if let Some(b) = bind {
        cfg.bind = b;
    }
    if let Some(d) = data_dir {
        cfg.data_dir = d;
    }
    if print {
        emit(cfg.render().trim_end());
        return Ok(());
    }
    let svc = burstq_core::runtime::start(&cfg).map_err(|e| Failure::new("StartupError", e))?;
    emit(json!({ "listening": svc.url(), "recovery": svc.recovery }));
    svc.wait_for_interrupt();
    svc.shutdown();
    Ok(())
}

fn agent(host: std::net::IpAddr, port: u16, workdir: PathBuf) -> CliResult {
    let cfg = resolve_config(None)?;
    let server = burstq_core::runtime::start_agent(
        SocketAddr::new(host, port),
        workdir,
        cfg.push,
        cfg.dispatch.dispatch_timeout,
    )
    .map_err(|e| Failure::new("StartupError", e))?;
    emit(json!({ "listening": format!("http://{}", server.addr) }));
    server.wait_for_interrupt();
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn submit(
    base: &str,
    kind: String,
    files: Vec<(String, String)>,
    params: Vec<(String, String)>,
    backend: Option<String>,
    derive_from: Option<String>,
    markers: Option<u32>,
    samples: Option<u32>,
    owner: Option<String>,
) -> CliResult {
    let params: serde_json::Map<String, Value> = params
        .into_iter()
        .map(|(k, v)| (k, Value::String(v)))
        .collect();
    let mut form = multipart::Form::new()
        .text("type", kind)
        .text("params", Value::Object(params).to_string());
    for (name, value) in [
        ("backend", backend),
        ("derive_from", derive_from),
        ("owner", owner),
    ] {
        if let Some(v) = value {
            form = form.text(name, v);
        }
    }
    for (name, value) in [("markers", markers), ("samples", samples)] {
        if let Some(v) = value {
            form = form.text(name, v.to_string());
        }
    }
    for (name, path) in files {
        let data =
            std::fs::read(&path).map_err(|e| Failure::new("IoError", format!("{path}: {e}")))?;
        form = form.part("file", multipart::Part::bytes(data).file_name(name));
    }
    print_json(check(
        client()?
            .post(format!("{base}/jobs"))
            .multipart(form)
            .send(),
    )?)
}

fn results(base: &str, id: &str, out: &Path) -> CliResult {
    let resp = check(client()?.get(format!("{base}/jobs/{id}/results")).send())?;
    let bytes = resp
        .bytes()
        .map_err(|e| Failure::new("Unreachable", e.to_string()))?;
    std::fs::create_dir_all(out).map_err(|e| Failure::new("IoError", e.to_string()))?;
    tar::Archive::new(&bytes[..])
        .unpack(out)
        .map_err(|e| Failure::new("IoError", format!("unpack results: {e}")))?;
    emit(json!({ "id": id, "out": out }));
    Ok(())
}

fn jobs(
    base: &str,
    state: Option<String>,
    backend: Option<String>,
    owner: Option<String>,
) -> CliResult {
    let query: Vec<(&str, String)> = [("state", state), ("backend", backend), ("owner", owner)]
        .into_iter()
        .filter_map(|(k, v)| v.map(|v| (k, v)))
        .collect();
    let mut url = reqwest::Url::parse(&format!("{base}/jobs"))
        .map_err(|e| Failure::new("ClientError", e.to_string()))?;
    for (k, v) in &query {
        url.query_pairs_mut().append_pair(k, v);
    }
    print_json(check(client()?.get(url).send())?)
}

fn simulate(
    profile: &str,
    days: f64,
    accel: &str,
    seed: u64,
    out: &Path,
    config: Option<PathBuf>,
) -> CliResult {
    let profile = WorkloadProfile::load(profile).map_err(|e| Failure::new("ConfigError", e))?;
    let accel: Acceleration = accel.parse().map_err(|e| Failure::new("ConfigError", e))?;
    if !(days >= 0.0 && days.is_finite()) {
        return Err(Failure::new("ConfigError", "days must be non-negative"));
    }
    let cfg = resolve_config(config.as_deref())?;
    let horizon = Duration::from_secs_f64(days * 86_400.0);
    let schedule = generate_workload(&profile, horizon, seed, ExecMode::Parallel)
        .map_err(|e| Failure::new("ConfigError", e))?;
    let start = profile
        .start()
        .map_err(|e| Failure::new("ConfigError", e))?;
    let sim_cfg = SimConfig::from_config(&cfg).seeded(seed);
    let report = run_simulation(&schedule, start, &sim_cfg, accel)
        .map_err(|e| Failure::new("ConfigError", e))?;
    std::fs::write(out, report.metrics_json() + "\n")
        .map_err(|e| Failure::new("IoError", format!("{}: {e}", out.display())))?;
    let m = &report.metrics;
    emit(json!({
        "out": out,
        "jobs_submitted": m.jobs_submitted,
        "jobs_completed": m.jobs_completed,
        "mean_wait_s": m.mean_wait_s,
        "billed_periods": m.billed_periods,
    }));
    Ok(())
}

fn store_dump(config: Option<PathBuf>, data_dir: Option<PathBuf>, audit: bool) -> CliResult {
    let dir = match data_dir {
        Some(d) => d,
        None => resolve_config(config.as_deref())?.data_dir,
    };
    let loaded =
        load_dir(&dir.join("store")).map_err(|e| Failure::new("StorageError", e.to_string()))?;
    let mut doc = json!({ "snapshot": loaded.snapshot() });
    if audit {
        doc["audit"] = json!(loaded.audit());
    }
    emit(serde_json::to_string_pretty(&doc).expect("json"));
    Ok(())
}

fn run(cli: Cli) -> CliResult {
    let base = cli.url.trim_end_matches('/').to_string();
    match cli.cmd {
        Cmd::Serve {
            config,
            bind,
            data_dir,
            print_config,
        } => serve(config, bind, data_dir, print_config),
        Cmd::Agent {
            port,
            host,
            workdir,
        } => agent(host, port, workdir),
        Cmd::Submit {
            kind,
            files,
            params,
            backend,
            derive_from,
            markers,
            samples,
            owner,
        } => submit(
            &base,
            kind,
            files,
            params,
            backend,
            derive_from,
            markers,
            samples,
            owner,
        ),
        Cmd::Status { id } => get(&format!("{base}/jobs/{id}")),
        Cmd::Results { id, out } => results(&base, &id, &out),
        Cmd::Cancel { id } => {
            print_json(check(client()?.delete(format!("{base}/jobs/{id}")).send())?)
        }
        Cmd::Jobs {
            state,
            backend,
            owner,
        } => jobs(&base, state, backend, owner),
        Cmd::Vms => get(&format!("{base}/vms")),
        Cmd::Accounting => get(&format!("{base}/accounting")),
        Cmd::Simulate {
            profile,
            days,
            accel,
            seed,
            out,
            config,
        } => simulate(&profile, days, &accel, seed, &out, config),
        Cmd::Store {
            cmd:
                StoreCmd::Dump {
                    config,
                    data_dir,
                    audit,
                },
        } => store_dump(config, data_dir, audit),
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_env("BURSTQ_LOG")
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn")),
        )
        .with_writer(std::io::stderr)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", json!({ "error": f.code, "message": f.message }));
            ExitCode::FAILURE
        }
    }
}
