//! Simulator for Byzantine-robust decentralized stochastic optimization.
//!
//! Regular agents minimize the sum of their expected local costs over a
//! static or time-varying graph while Byzantine agents send arbitrary
//! messages. The crate provides the update rules (a total-variation
//! penalized stochastic subgradient method, DPSGD and a trimmed-mean
//! baseline), attack models, a deterministic round-synchronous engine, and
//! the theory layer used to check runs against exact reference solutions.

pub mod algorithms;
pub mod analysis;
pub mod attacks;
pub mod engine;
pub mod error;
pub mod graph;
pub mod model;
pub mod objectives;
pub mod rng;

pub use algorithms::{Method, PenaltyNorm, StepSchedule};
pub use attacks::AttackSpec;
pub use engine::{
    run, ExperimentConfig, MetricsLog, MetricsRecord, RunOutput, Simulation, CSV_HEADER,
};
pub use error::{Error, Result};
pub use graph::{NetworkSchedule, Topology};
pub use model::ModelVec;
pub use objectives::{LocalObjective, QuadraticObjective, SoftmaxObjective};
