//! Server and session configuration, plus the records sessions emit.

use std::net::IpAddr;
use std::path::PathBuf;
use std::time::{SystemTime, UNIX_EPOCH};

use fedcampus_core::aggregation::DPConfig;
use fedcampus_core::analytics::FAQuery;
use fedcampus_core::protocol::SessionKind;
use fedcampus_core::trainer::Hyperparams;
use serde::{Deserialize, Serialize};

use crate::ports::PoolRange;
use crate::state::SessionState;

fn default_bind() -> IpAddr {
    IpAddr::from([127, 0, 0, 1])
}

/// Timestamp source. `Logical` stamps events with per-session counters so
/// persisted output depends only on seeds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Clock {
    #[default]
    Wall,
    Logical,
}

impl Clock {
    /// Milliseconds since the epoch, or `tick` under the logical clock.
    pub fn stamp(&self, tick: u64) -> u64 {
        match self {
            Clock::Wall => SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_millis() as u64)
                .unwrap_or(0),
            Clock::Logical => tick,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServerConfig {
    pub admin_port: u16,
    pub fl_port_pool: PoolRange,
    /// `None` keeps everything in memory.
    pub data_dir: Option<PathBuf>,
    pub seed: u64,
    #[serde(default = "default_bind")]
    pub bind_addr: IpAddr,
    #[serde(default)]
    pub clock: Clock,
}

impl ServerConfig {
    pub fn new(
        admin_port: u16,
        fl_port_pool: PoolRange,
        data_dir: Option<PathBuf>,
        seed: u64,
    ) -> Self {
        ServerConfig {
            admin_port,
            fl_port_pool,
            data_dir,
            seed,
            bind_addr: default_bind(),
            clock: Clock::Wall,
        }
    }
}

fn default_fraction() -> f64 {
    1.0
}

fn default_timeout() -> u64 {
    30_000
}

fn default_rounds() -> u64 {
    1
}

/// `POST /api/sessions` body: a session config without its port.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionRequest {
    #[serde(default)]
    pub session_id: Option<String>,
    pub kind: SessionKind,
    #[serde(default)]
    pub model_id: Option<String>,
    /// Latest version when absent.
    #[serde(default)]
    pub model_version: Option<u64>,
    #[serde(default)]
    pub query: Option<FAQuery>,
    #[serde(default = "default_rounds")]
    pub rounds: u64,
    pub min_clients: usize,
    /// Clients to wait for before round 1; `min_clients` when absent.
    #[serde(default)]
    pub start_clients: Option<usize>,
    #[serde(default = "default_fraction")]
    pub client_fraction: f64,
    #[serde(default = "default_timeout")]
    pub round_timeout_ms: u64,
    /// Fail with InsufficientClients if too few clients join in time.
    #[serde(default)]
    pub join_timeout_ms: Option<u64>,
    #[serde(default)]
    pub hyperparams: Option<Hyperparams>,
    #[serde(default)]
    pub dp: DPConfig,
    /// Derived from the server seed and session id when absent.
    #[serde(default)]
    pub seed: Option<u64>,
}

impl SessionRequest {
    pub fn fl(
        model_id: impl Into<String>,
        rounds: u64,
        min_clients: usize,
        hyperparams: Hyperparams,
    ) -> Self {
        SessionRequest {
            session_id: None,
            kind: SessionKind::FL,
            model_id: Some(model_id.into()),
            model_version: None,
            query: None,
            rounds,
            min_clients,
            start_clients: None,
            client_fraction: 1.0,
            round_timeout_ms: default_timeout(),
            join_timeout_ms: None,
            hyperparams: Some(hyperparams),
            dp: DPConfig::disabled(),
            seed: None,
        }
    }

    pub fn fa(query: FAQuery, min_clients: usize) -> Self {
        SessionRequest {
            session_id: None,
            kind: SessionKind::FA,
            model_id: None,
            model_version: None,
            query: Some(query),
            rounds: 1,
            min_clients,
            start_clients: None,
            client_fraction: 1.0,
            round_timeout_ms: default_timeout(),
            join_timeout_ms: None,
            hyperparams: None,
            dp: DPConfig::disabled(),
            seed: None,
        }
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.session_id = Some(id.into());
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }
}

/// A fully resolved session configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionConfig {
    pub session_id: String,
    pub kind: SessionKind,
    pub model_id: Option<String>,
    pub model_version: Option<u64>,
    pub query: Option<FAQuery>,
    pub rounds: u64,
    pub min_clients: usize,
    pub start_clients: usize,
    pub client_fraction: f64,
    pub round_timeout_ms: u64,
    pub join_timeout_ms: Option<u64>,
    pub hyperparams: Option<Hyperparams>,
    pub dp: DPConfig,
    pub seed: u64,
    pub port: u16,
}

impl SessionConfig {
    /// `max(min_clients, ceil(fraction * joined))`, capped at `joined`.
    pub fn selection_size(&self, joined: usize) -> usize {
        let frac = (self.client_fraction * joined as f64).ceil() as usize;
        frac.max(self.min_clients).min(joined)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoundRecord {
    pub session_id: String,
    pub round: u64,
    pub n_selected: usize,
    pub n_completed: usize,
    /// Validation loss of the new global model; `null` without a validation split.
    pub global_loss: Option<f64>,
    pub started_at: u64,
    pub ended_at: u64,
}

/// Federated evaluation on the final global model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FederatedEval {
    pub loss: f64,
    pub metric: f64,
    pub num_examples: u64,
    pub n_clients: usize,
}

/// What `GET /api/sessions` returns per session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub session_id: String,
    pub kind: SessionKind,
    pub state: SessionState,
    pub port: u16,
    pub current_round: u64,
    pub rounds: u64,
    pub last_global_loss: Option<f64>,
    pub n_clients_joined: usize,
    pub config: SessionConfig,
    pub federated_eval: Option<FederatedEval>,
}
