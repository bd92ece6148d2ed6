//! `fedcampus` subcommands. Exit codes: 0 success (JSON on stdout), 1 run
//! failure, 2 bad flags.

use std::ffi::OsString;
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fedcampus_core::aggregation::DPConfig;
use fedcampus_core::model::Platform;
use fedcampus_core::protocol::{TaskEntry, TaskManifest, TaskRequest};
use fedcampus_orchestrator::store::{read_jsonl, ROUNDS_FILE};
use fedcampus_orchestrator::{http, Orchestrator, RoundRecord, ServerConfig};
use serde::Serialize;

use crate::client::{run_client, ClientReport, APP_VERSION};
use crate::data::{generate_fleet, generate_health_data, FleetConfig};
use crate::demo::{run_demo, validation_provider, DemoOptions, DemoTask, DEFAULT_PORT_BASE};
use crate::Device;

const DEFAULT_ADMIN_PORT: u16 = 8080;

#[derive(Debug, Parser)]
#[command(
    name = "fedcampus",
    version,
    about = "Federated learning and analytics on a simulated campus fleet"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the coordinator with its admin API until interrupted.
    Server {
        #[arg(long)]
        config: PathBuf,
    },
    /// Join every advertised task with a simulated fleet.
    Fleet {
        #[arg(long)]
        n: usize,
        /// Admin API address, HOST or HOST:PORT.
        #[arg(long)]
        server: String,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        fleet_config: Option<PathBuf>,
    },
    /// Server and fleet in one process; prints a JSON summary.
    Demo(DemoArgs),
    /// Print persisted round records, one JSON object per line.
    Inspect {
        #[arg(long)]
        data_dir: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct DemoArgs {
    #[arg(long, value_enum)]
    pub task: DemoTask,
    #[arg(long, default_value_t = 10)]
    pub clients: usize,
    #[arg(long, default_value_t = 5)]
    pub rounds: u64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = DEFAULT_PORT_BASE)]
    pub port_base: u16,
    /// Analytics privacy budget.
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Update clipping norm; any --dp-* flag turns client DP on.
    #[arg(long)]
    pub dp_clip: Option<f64>,
    #[arg(long)]
    pub dp_epsilon: Option<f64>,
    #[arg(long)]
    pub dp_delta: Option<f64>,
    /// Noise multiplier used in place of the calibrated one.
    #[arg(long)]
    pub dp_sigma: Option<f64>,
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[arg(long)]
    pub fleet_config: Option<PathBuf>,
    /// Include duration_ms in the summary.
    #[arg(long)]
    pub timing: bool,
}

impl DemoArgs {
    fn dp(&self) -> DPConfig {
        if self.dp_clip.is_none()
            && self.dp_epsilon.is_none()
            && self.dp_delta.is_none()
            && self.dp_sigma.is_none()
        {
            return DPConfig::disabled();
        }
        let d = DPConfig::disabled();
        DPConfig {
            enabled: true,
            clip_norm: self.dp_clip.unwrap_or(d.clip_norm),
            epsilon: self.dp_epsilon.unwrap_or(d.epsilon),
            delta: self.dp_delta.unwrap_or(d.delta),
            sigma_override: self.dp_sigma,
        }
    }
}

pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code().clamp(0, 255) as u8);
        }
    };
    let _ = tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn")),
        )
        .try_init();
    let rt = match tokio::runtime::Runtime::new() {
        Ok(rt) => rt,
        Err(e) => return fail(format!("runtime: {e}")),
    };
    match rt.block_on(run(cli.command)) {
        Ok(out) => {
            if !out.is_empty() {
                println!("{out}");
            }
            ExitCode::SUCCESS
        }
        Err(msg) => fail(msg),
    }
}

fn fail(msg: String) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(1)
}

fn load_fleet_config(path: Option<&Path>) -> Result<FleetConfig, String> {
    let Some(p) = path else {
        return Ok(FleetConfig::default());
    };
    let raw = std::fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?;
    let cfg: FleetConfig =
        serde_json::from_str(&raw).map_err(|e| format!("{}: {e}", p.display()))?;
    cfg.validate()?;
    Ok(cfg)
}

async fn run(cmd: Command) -> Result<String, String> {
    match cmd {
        Command::Server { config } => server(&config).await.map(|_| String::new()),
        Command::Fleet {
            n,
            server,
            seed,
            fleet_config,
        } => fleet(n, &server, seed, fleet_config.as_deref()).await,
        Command::Demo(args) => demo(args).await,
        Command::Inspect { data_dir } => inspect(&data_dir),
    }
}

async fn demo(args: DemoArgs) -> Result<String, String> {
    let mut opts = DemoOptions::new(args.task, args.clients, args.rounds, args.seed);
    opts.port_base = args.port_base;
    opts.epsilon = args.epsilon;
    opts.dp = args.dp();
    opts.data_dir = args.data_dir.clone();
    opts.fleet = load_fleet_config(args.fleet_config.as_deref())?;
    opts.timing = args.timing;
    let run = run_demo(&opts).await.map_err(|e| e.to_string())?;
    eprintln!("demo finished in {} ms", run.duration_ms);
    serde_json::to_string(&run.summary).map_err(|e| e.to_string())
}

async fn server(path: &Path) -> Result<(), String> {
    let raw = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let cfg: ServerConfig =
        serde_json::from_str(&raw).map_err(|e| format!("{}: {e}", path.display()))?;
    let addr = SocketAddr::new(cfg.bind_addr, cfg.admin_port);
    let seed = cfg.seed;
    let orch = Orchestrator::new(cfg)
        .map_err(|e| e.to_string())?
        .with_validation(validation_provider(seed, FleetConfig::default()));
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| format!("bind {addr}: {e}"))?;
    eprintln!(
        "admin API on http://{}",
        listener.local_addr().map_err(|e| e.to_string())?
    );
    tokio::select! {
        r = http::serve(orch.clone(), listener) => r.map_err(|e| e.to_string())?,
        _ = tokio::signal::ctrl_c() => {}
    }
    orch.shutdown().await;
    Ok(())
}

#[derive(Debug, Serialize)]
struct TaskOutcome {
    task_id: String,
    completed: usize,
    failed: usize,
}

#[derive(Debug, Serialize)]
struct FleetSummary {
    clients: usize,
    seed: u64,
    tasks: Vec<TaskOutcome>,
    reports: Vec<ClientReport>,
}

fn admin_addr(server: &str) -> String {
    if server.parse::<SocketAddr>().is_ok()
        || server
            .rsplit_once(':')
            .is_some_and(|(_, p)| p.parse::<u16>().is_ok())
    {
        server.to_string()
    } else {
        format!("{server}:{DEFAULT_ADMIN_PORT}")
    }
}

async fn fleet(
    n: usize,
    server: &str,
    seed: u64,
    cfg_path: Option<&Path>,
) -> Result<String, String> {
    if n == 0 {
        return Err("--n must be >= 1".into());
    }
    let cfg = load_fleet_config(cfg_path)?;
    let addr = admin_addr(server);
    let host: IpAddr = tokio::net::lookup_host(&addr)
        .await
        .map_err(|e| format!("resolve {addr}: {e}"))?
        .next()
        .ok_or_else(|| format!("resolve {addr}: no address"))?
        .ip();
    let http = reqwest::Client::new();
    let mut manifests = Vec::new();
    for platform in Platform::ALL {
        let req = TaskRequest {
            platform,
            app_version: APP_VERSION.into(),
        };
        let m: TaskManifest = http
            .post(format!("http://{addr}/api/tasks"))
            .json(&req)
            .send()
            .await
            .and_then(|r| r.error_for_status())
            .map_err(|e| format!("task discovery: {e}"))?
            .json()
            .await
            .map_err(|e| format!("task discovery: {e}"))?;
        manifests.push((platform, m));
    }
    let task_ids: Vec<String> = {
        let mut ids: Vec<String> = manifests
            .iter()
            .flat_map(|(_, m)| m.tasks.iter().map(|t| t.task_id.clone()))
            .collect();
        ids.sort();
        ids.dedup();
        ids
    };
    if task_ids.is_empty() {
        return Err(format!("no live tasks at {addr}"));
    }
    let devices: Vec<Device> = generate_fleet(n, seed, &cfg)
        .into_iter()
        .map(|p| {
            let records = generate_health_data(&p, cfg.days, &cfg);
            Device::new(p, records)
        })
        .collect();
    let entry = |platform: Platform, id: &str| -> Option<TaskEntry> {
        manifests
            .iter()
            .find(|(p, _)| *p == platform)
            .and_then(|(_, m)| m.tasks.iter().find(|t| t.task_id == id).cloned())
    };
    let mut handles = Vec::new();
    for id in &task_ids {
        for d in &devices {
            if let Some(task) = entry(d.profile.platform, id) {
                let d = d.clone();
                handles.push((
                    id.clone(),
                    tokio::spawn(async move { run_client(&d, host, &task).await }),
                ));
            }
        }
    }
    let mut outcomes: Vec<TaskOutcome> = task_ids
        .iter()
        .map(|id| TaskOutcome {
            task_id: id.clone(),
            completed: 0,
            failed: 0,
        })
        .collect();
    let mut reports = Vec::new();
    for (id, h) in handles {
        let o = outcomes
            .iter_mut()
            .find(|o| o.task_id == id)
            .expect("outcome per task");
        match h.await {
            Ok(Ok(r)) => {
                o.completed += 1;
                reports.push(r);
            }
            Ok(Err(e)) => {
                tracing::warn!("{id}: {e}");
                o.failed += 1;
            }
            Err(e) => {
                tracing::warn!("{id}: {e}");
                o.failed += 1;
            }
        }
    }
    if reports.is_empty() {
        return Err("no client finished a task".into());
    }
    serde_json::to_string(&FleetSummary {
        clients: n,
        seed,
        tasks: outcomes,
        reports,
    })
    .map_err(|e| e.to_string())
}

fn inspect(dir: &Path) -> Result<String, String> {
    let path = dir.join(ROUNDS_FILE);
    if !path.exists() {
        return Err(format!("{}: no round records", path.display()));
    }
    let rounds: Vec<RoundRecord> = read_jsonl(&path).map_err(|e| e.to_string())?;
    let lines: Result<Vec<String>, _> = rounds.iter().map(serde_json::to_string).collect();
    lines.map(|l| l.join("\n")).map_err(|e| e.to_string())
}
