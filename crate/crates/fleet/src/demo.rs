//! In-process end-to-end runs: one server plus a simulated fleet over loopback.

use std::collections::BTreeMap;
use std::net::{IpAddr, Ipv4Addr};
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use fedcampus_core::aggregation::DPConfig;
use fedcampus_core::analytics::{
    recommend, BucketSpec, CohortStats, DpMeanQuery, FAQuery, FAQueryKind, FaResult,
    HeavyHittersQuery, Thresholds, UserLocal,
};
use fedcampus_core::model::{ModelSpec, Platform};
use fedcampus_core::protocol::TaskEntry;
use fedcampus_core::seed::derive_seed;
use fedcampus_core::trainer::{Dataset, Hyperparams, Trainer};
use fedcampus_orchestrator::session::ValidationFn;
use fedcampus_orchestrator::{
    Clock, Orchestrator, OrchestratorError, PoolRange, ServerConfig, SessionRequest, SessionState,
};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::client::{run_client, ClientReport, Device};
use crate::data::{attribute_mean, generate_fleet, generate_health_data, FleetConfig};
use crate::features::TaskModel;

/// Devices in the server-held validation split.
pub const VALIDATION_DEVICES: usize = 30;
pub const DEFAULT_PORT_BASE: u16 = 47100;
const POOL_SIZE: u16 = 16;
const LOOPBACK: IpAddr = IpAddr::V4(Ipv4Addr::LOCALHOST);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum DemoTask {
    Sleep,
    Activity,
    Recommend,
    Hitters,
}

#[derive(Debug, Clone)]
pub struct DemoOptions {
    pub task: DemoTask,
    pub clients: usize,
    pub rounds: u64,
    pub seed: u64,
    pub port_base: u16,
    /// Analytics budget; a per-task default when absent.
    pub epsilon: Option<f64>,
    pub dp: DPConfig,
    pub hyperparams: Option<Hyperparams>,
    pub data_dir: Option<PathBuf>,
    pub fleet: FleetConfig,
    pub timing: bool,
    /// Forces every device onto one platform.
    pub platform: Option<Platform>,
    /// Hand canonical vectors to trainers without the platform encodings.
    pub bypass_encoding: bool,
}

impl DemoOptions {
    pub fn new(task: DemoTask, clients: usize, rounds: u64, seed: u64) -> Self {
        DemoOptions {
            task,
            clients,
            rounds,
            seed,
            port_base: DEFAULT_PORT_BASE,
            epsilon: None,
            dp: DPConfig::disabled(),
            hyperparams: None,
            data_dir: None,
            fleet: FleetConfig::default(),
            timing: false,
            platform: None,
            bypass_encoding: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoSummary {
    pub task: DemoTask,
    pub clients: usize,
    pub rounds: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_global_mse: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fa_result: Option<Value>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub duration_ms: Option<u64>,
    pub seed: u64,
}

/// A finished demo: the printed summary plus what tests want to inspect.
#[derive(Debug, Clone)]
pub struct DemoRun {
    pub summary: DemoSummary,
    pub global_params: Vec<f64>,
    pub rounds: Vec<fedcampus_orchestrator::RoundRecord>,
    pub reports: Vec<ClientReport>,
    pub duration_ms: u64,
}

#[derive(Debug, Error)]
pub enum DemoError {
    #[error("bad options: {0}")]
    Options(String),
    #[error(transparent)]
    Server(#[from] OrchestratorError),
    #[error("session {session} ended {state:?}")]
    Session {
        session: String,
        state: SessionState,
    },
}

pub fn devices(opts: &DemoOptions) -> Vec<Device> {
    generate_fleet(opts.clients, opts.seed, &opts.fleet)
        .into_iter()
        .map(|mut p| {
            if let Some(pl) = opts.platform {
                p.platform = pl;
            }
            let records = generate_health_data(&p, opts.fleet.days, &opts.fleet);
            Device {
                profile: p,
                records,
                bypass_encoding: opts.bypass_encoding,
            }
        })
        .collect()
}

/// Pooled validation data for `family`, from devices under a reserved seed.
pub fn validation_dataset(family: TaskModel, seed: u64, cfg: &FleetConfig) -> Dataset {
    let profiles = generate_fleet(VALIDATION_DEVICES, derive_seed(seed, "validation"), cfg);
    let parts: Vec<Dataset> = profiles
        .iter()
        .map(|p| family.dataset(p, &generate_health_data(p, cfg.days, cfg)))
        .collect();
    Dataset::concat(&parts).expect("validation parts share a shape")
}

pub fn validation_provider(seed: u64, cfg: FleetConfig) -> ValidationFn {
    Arc::new(move |spec: &ModelSpec| {
        let family = TaskModel::for_model_id(&spec.model_id).filter(|f| f.accepts(spec))?;
        Some(validation_dataset(family, seed, &cfg))
    })
}

pub fn demo_server(opts: &DemoOptions) -> Result<Orchestrator, DemoError> {
    let cfg = ServerConfig {
        clock: Clock::Logical,
        ..ServerConfig::new(
            0,
            PoolRange {
                base: opts.port_base,
                size: POOL_SIZE,
            },
            opts.data_dir.clone(),
            opts.seed,
        )
    };
    Ok(Orchestrator::new(cfg)?.with_validation(validation_provider(opts.seed, opts.fleet.clone())))
}

/// Finds the session in the task manifest, as a device would.
fn discover(o: &Orchestrator, platform: Platform, session: &str) -> Option<TaskEntry> {
    o.list_tasks(platform, crate::client::APP_VERSION)
        .tasks
        .into_iter()
        .find(|t| t.task_id == session)
}

/// Runs every device against `session` and waits for the server side to finish.
pub async fn drive_session(
    o: &Orchestrator,
    session: &str,
    devices: &[Device],
) -> Result<Vec<ClientReport>, DemoError> {
    let mut handles = Vec::new();
    for d in devices {
        let task = discover(o, d.profile.platform, session)
            .ok_or_else(|| DemoError::Options(format!("{session} not advertised")))?;
        let d = d.clone();
        handles.push(tokio::spawn(async move {
            run_client(&d, LOOPBACK, &task).await
        }));
    }
    let end = o.wait_session(session).await?;
    let mut reports = Vec::new();
    for h in handles {
        match h.await {
            Ok(Ok(r)) => reports.push(r),
            Ok(Err(e)) => tracing::warn!("client: {e}"),
            Err(e) => tracing::warn!("client task: {e}"),
        }
    }
    if end.state != SessionState::Completed {
        return Err(DemoError::Session {
            session: session.into(),
            state: end.state,
        });
    }
    Ok(reports)
}

pub fn fl_request(family: TaskModel, opts: &DemoOptions, id: &str) -> SessionRequest {
    let hp = opts
        .hyperparams
        .unwrap_or_else(|| family.default_hyperparams(derive_seed(opts.seed, "train")));
    SessionRequest {
        start_clients: Some(opts.clients),
        round_timeout_ms: 120_000,
        dp: opts.dp,
        ..SessionRequest::fl(family.model_id(), opts.rounds, opts.clients.div_ceil(2), hp)
            .with_id(id)
    }
}

fn fa_request(query: FAQuery, opts: &DemoOptions, id: &str) -> SessionRequest {
    SessionRequest {
        start_clients: Some(opts.clients),
        round_timeout_ms: 120_000,
        ..SessionRequest::fa(query, opts.clients.div_ceil(2)).with_id(id)
    }
}

pub async fn run_demo(opts: &DemoOptions) -> Result<DemoRun, DemoError> {
    if opts.clients == 0 {
        return Err(DemoError::Options("--clients must be >= 1".into()));
    }
    if opts.rounds == 0 {
        return Err(DemoError::Options("--rounds must be >= 1".into()));
    }
    opts.fleet.validate().map_err(DemoError::Options)?;
    let started = Instant::now();
    let o = demo_server(opts)?;
    let devices = devices(opts);
    let outcome = match opts.task {
        DemoTask::Sleep | DemoTask::Activity => run_fl(&o, opts, &devices).await,
        DemoTask::Hitters => run_hitters(&o, opts, &devices).await,
        DemoTask::Recommend => run_recommend(&o, opts, &devices).await,
    };
    o.shutdown().await;
    let mut run = outcome?;
    run.duration_ms = started.elapsed().as_millis() as u64;
    if opts.timing {
        run.summary.duration_ms = Some(run.duration_ms);
    }
    Ok(run)
}

async fn run_fl(
    o: &Orchestrator,
    opts: &DemoOptions,
    devices: &[Device],
) -> Result<DemoRun, DemoError> {
    let family = if opts.task == DemoTask::Sleep {
        TaskModel::Sleep
    } else {
        TaskModel::Activity
    };
    let model = family.initial_model(derive_seed(opts.seed, "init"));
    o.register_model(&serde_json::to_vec(&model).expect("models serialize"))?;
    let id = format!("{}-fl", family.model_id());
    o.create_session(fl_request(family, opts, &id))?;
    let reports = drive_session(o, &id, devices).await?;
    let global = o.global_params(&id)?;
    let rounds = o.rounds(&id)?;
    let mut summary = DemoSummary {
        task: opts.task,
        clients: opts.clients,
        rounds: opts.rounds,
        final_global_mse: None,
        accuracy: None,
        fa_result: None,
        duration_ms: None,
        seed: opts.seed,
    };
    let val = validation_dataset(family, opts.seed, &opts.fleet);
    let mut t = Trainer::from_spec(model.spec()).expect("demo models are trainable");
    t.set_parameters(&global).expect("global matches its spec");
    let (loss, metric) = t.evaluate(&val).expect("validation matches the model");
    match family {
        TaskModel::Sleep => summary.final_global_mse = Some(loss),
        TaskModel::Activity => summary.accuracy = Some(metric),
    }
    Ok(DemoRun {
        summary,
        global_params: global,
        rounds,
        reports,
        duration_ms: 0,
    })
}

pub fn hitters_query(epsilon: f64) -> FAQuery {
    FAQuery {
        query_id: "steps-heavy-hitters".into(),
        kind: FAQueryKind::HeavyHitters(HeavyHittersQuery {
            buckets: BucketSpec::default_steps(),
            k: 3,
            epsilon,
            cluster_by: "cluster".into(),
        }),
    }
}

async fn run_hitters(
    o: &Orchestrator,
    opts: &DemoOptions,
    devices: &[Device],
) -> Result<DemoRun, DemoError> {
    let query = hitters_query(opts.epsilon.unwrap_or(4.0));
    o.create_session(fa_request(query.clone(), opts, "hitters"))?;
    let reports = drive_session(o, "hitters", devices).await?;
    let result = o.fa_result(&query.query_id)?;
    Ok(DemoRun {
        summary: DemoSummary {
            task: opts.task,
            clients: opts.clients,
            rounds: 1,
            final_global_mse: None,
            accuracy: None,
            fa_result: Some(serde_json::to_value(result).expect("results serialize")),
            duration_ms: None,
            seed: opts.seed,
        },
        global_params: Vec::new(),
        rounds: o.rounds("hitters")?,
        reports,
        duration_ms: 0,
    })
}

fn mean_query(attribute: &str, clip_hi: f64, epsilon: f64) -> FAQuery {
    FAQuery {
        query_id: format!("mean-{attribute}"),
        kind: FAQueryKind::DPMean(DpMeanQuery {
            attribute: attribute.into(),
            clip_lo: 0.0,
            clip_hi,
            epsilon,
        }),
    }
}

async fn run_recommend(
    o: &Orchestrator,
    opts: &DemoOptions,
    devices: &[Device],
) -> Result<DemoRun, DemoError> {
    let eps = opts.epsilon.unwrap_or(10.0);
    let mut results = BTreeMap::new();
    let mut all_reports = Vec::new();
    let mut all_rounds = Vec::new();
    for (attr, hi) in [("steps", 30_000.0), ("calories", 5_000.0)] {
        let q = mean_query(attr, hi, eps);
        let id = format!("{attr}-mean");
        o.create_session(fa_request(q.clone(), opts, &id))?;
        all_reports.extend(drive_session(o, &id, devices).await?);
        all_rounds.extend(o.rounds(&id)?);
        match o.fa_result(&q.query_id)? {
            FaResult::DPMean(r) => results.insert(attr, r),
            other => unreachable!("mean query returned {other:?}"),
        };
    }
    let cohort = CohortStats {
        dp_mean_steps: results["steps"].mean,
        dp_mean_calories: results["calories"].mean,
    };
    // each device compares its own averages with the released cohort means
    let mut steps_bands: BTreeMap<String, usize> = BTreeMap::new();
    let mut cal_bands: BTreeMap<String, usize> = BTreeMap::new();
    for d in devices {
        let user = UserLocal {
            steps: attribute_mean(&d.records, "steps").unwrap_or(0.0),
            calories: attribute_mean(&d.records, "calories").unwrap_or(0.0),
        };
        let rec = recommend(&cohort, &user, &Thresholds::default());
        *steps_bands.entry(format!("{:?}", rec.steps)).or_default() += 1;
        *cal_bands.entry(format!("{:?}", rec.calories)).or_default() += 1;
    }
    let fa = json!({
        "cohort": cohort,
        "steps": results["steps"],
        "calories": results["calories"],
        "recommendations": { "steps": steps_bands, "calories": cal_bands },
    });
    Ok(DemoRun {
        summary: DemoSummary {
            task: opts.task,
            clients: opts.clients,
            rounds: 1,
            final_global_mse: None,
            accuracy: None,
            fa_result: Some(fa),
            duration_ms: None,
            seed: opts.seed,
        },
        global_params: vec![cohort.dp_mean_steps, cohort.dp_mean_calories],
        rounds: all_rounds,
        reports: all_reports,
        duration_ms: 0,
    })
}
