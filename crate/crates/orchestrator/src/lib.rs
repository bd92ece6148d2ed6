//! Coordinator for federated training and analytics sessions.
//!
//! Each session owns one port from a fixed pool and runs its own round loop
//! over the framed wire protocol. Models, session events, round records and
//! analytics results are kept as JSON lines in a data directory.

pub mod config;
pub mod http;
pub mod ports;
pub mod registry;
pub mod server;
pub mod session;
pub mod state;
pub mod store;

pub use config::{Clock, RoundRecord, ServerConfig, SessionConfig, SessionRequest, SessionView};
pub use ports::PoolRange;
pub use server::{Orchestrator, OrchestratorError};
pub use state::{FailureReason, SessionState};
