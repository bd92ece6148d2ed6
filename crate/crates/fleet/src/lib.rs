//! Simulated campus device fleet: synthetic health data, protocol clients,
//! in-process demos and the `fedcampus` command line.

pub mod cli;
pub mod client;
pub mod data;
pub mod demo;
pub mod features;

pub use client::{run_client, ClientError, ClientReport, Device};
pub use data::{
    generate_fleet, generate_health_data, Archetype, DeviceProfile, FleetConfig, HealthRecord,
};
pub use demo::{run_demo, DemoError, DemoOptions, DemoRun, DemoSummary, DemoTask};
pub use features::TaskModel;
