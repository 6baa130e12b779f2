//! Discrete-event simulator of data gathering in a vehicular sensor network
//! on a straight segmented road.
//!
//! Vehicles sense their own speed and either uplink readings individually or
//! organize into clusters that gather, fuse, and disseminate one aggregate
//! per cluster per cycle over the operator's paid uplink. The simulator
//! counts V2V and V2I traffic for three dissemination strategies and scores
//! every delivered aggregate against a ground-truth oracle.
//!
//! Entry points: [`config::parse_config`] for CLI/file configuration and
//! [`scenario::run_scenario`] for executing one seeded run.

pub mod clustering;
pub mod config;
pub mod engine;
pub mod gathering;
pub mod mobility;
pub mod radio;
pub mod report;
pub mod scenario;

pub use config::{parse_config, ClusterMode, OutputFormat, Scenario, SimConfig};
pub use engine::{Engine, Metrics, StreamId};
pub use report::{CycleRow, RunReport};
pub use scenario::{ground_truth_mean, occupied_clusters_per_cycle, run_scenario};
