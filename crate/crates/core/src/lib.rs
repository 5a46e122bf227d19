//! Gossip-based asynchronous distributed Langevin sampling with multiple
//! local computations per gossip cycle.
//!
//! Agents on a connected graph each hold a data shard. In every cycle one
//! agent wakes, picks a neighbor, the pair averages their parameters and then
//! each runs `T` unadjusted Langevin steps on a reused minibatch.

pub mod config;
pub mod engine;
pub mod error;
pub mod experiment;
pub mod ingest;
pub mod metrics;
pub mod models;
pub mod rng;
pub mod scheduler;
pub mod topology;

pub use config::{load_config, parse_config, preset, preset_with, LoadedConfig, RunConfig};
pub use engine::{run_cycle, run_trial, Chain, SwarmState, TrialSpec};
pub use error::{Error, Result};
pub use metrics::RunRecord;
pub use models::{DataShard, ModelKind, ModelSpec, Prior};
pub use scheduler::{HyperParams, OverlapMode, Scheduler, TMode};
pub use topology::{Graph, GraphKind};
