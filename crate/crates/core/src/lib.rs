//! Simulation and statistical verification of two-time-scale stochastic
//! approximation.
//!
//! The crate runs the coupled fast/slow iteration over large seeded
//! ensembles, rescales the errors, builds interpolated trajectories, and
//! compares them against the closed-form Ornstein-Uhlenbeck limits.

pub mod engine;
pub mod experiment;
pub mod limits;
pub mod linalg;
pub mod mdp;
pub mod problem;
pub mod schedule;
pub mod stats;
pub mod trajectory;

pub use engine::{run_ensemble, simulate, EngineError, EnsembleSnapshot, IterateState, RunConfig};
pub use limits::{fast_limit, slow_limit, LimitSpec};


pub use linalg::{matrix_exp, solve_lyapunov, spectral_report, LinalgError, Matrix};
pub use problem::{ProblemConfig, ProblemError, ProblemSpec};
pub use schedule::{Scale, ScheduleError, StepSchedule};
