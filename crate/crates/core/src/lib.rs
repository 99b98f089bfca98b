//! Neural ODE training under hard physical constraints.
//!
//! A scalar reverse-mode tape ([`diff`]) drives fixed-step ODE solvers
//! ([`ode`]) whose right-hand side is a small MLP ([`nn`]). Constraint
//! violations along the predicted trajectory ([`constraints`]) enter the loss
//! either as a fixed quadratic penalty or through the self-adaptive scheme in
//! [`penalty`], and [`train`] runs the optimisation loops.

pub mod config;
pub mod constraints;
pub mod data;
pub mod diff;
pub mod error;
pub mod harness;
pub mod nn;
pub mod ode;
pub mod penalty;
pub mod rng;
pub mod train;

pub use config::{Architecture, ExperimentConfig, MethodKind};
pub use constraints::{Constraint, ConstraintExpr, ConstraintKind, ConstraintSet};
pub use data::{System, SystemSpec, TaskKind, TaskSpec};
pub use diff::{Graph, Scalar, Var};
pub use error::{Error, Result};
pub use harness::{AggregateTable, RunSummary};
pub use nn::{AdamState, HiddenLayer, Layer, Mlp};
pub use ode::{Method, SolverConfig, TimeGrid, Trajectory};
pub use penalty::{LossRegime, PenaltyReport, Regime};
pub use train::{run_experiment, Evaluation, Metrics, RunResult, RunStatus};
