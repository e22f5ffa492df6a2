//! Exact policy optimization on tabular softmax MDPs.
//!
//! The crate evaluates policies by dense linear solves, runs accelerated and
//! baseline policy-gradient methods with exact (or exactly-sampled) gradients,
//! and checks the structural conditions behind their convergence rates.

pub mod diagnostics;
pub mod error;
pub mod eval;
pub mod experiments;
pub mod mdp;
pub mod optim;
pub mod optimal;
pub mod policy;
pub mod run;
pub mod schedule;
pub mod trace;

pub use error::{Error, Result};
pub use eval::{objective, performance_difference, policy_gradient, state_values, value_bundle, visitation, ValueBundle};
pub use mdp::{load_mdp, load_mdp_file, Mdp, MdpSpec};
pub use optim::{Algorithm, OptimizerState, StepOutcome};
pub use optimal::{optimal_solution, OptimalSolution};
pub use policy::{softmax_policy, Policy, PolicyParams};
pub use run::{run, LogSpacing, RunConfig};
pub use schedule::StepSchedule;
pub use trace::{RunTrace, TraceRecord};
