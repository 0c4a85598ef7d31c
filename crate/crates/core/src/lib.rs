//! Simulation and short-term prediction of two-player differential
//! interactive games.
//!
//! Each player's realized control is its intended control passed through a
//! hidden behavioral reaction to the state and its derivatives. The
//! prediction pipeline never sees those reactions. It estimates, along the
//! observed trajectory, linear combinations of probe functions that stay
//! stationary ([`conservation`]), inverts them locally for the controls
//! ([`inversion`]), and integrates the resulting delayed ordinary game forward
//! ([`predictor`]). [`selection`] chooses among probe sets by backtesting.
//!
//! The crate is `no_std` and needs only `alloc`.
#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod conservation;
pub mod dynamics;
pub mod inversion;
pub mod numerics;
pub mod predictor;
pub mod probes;
pub mod selection;

pub use conservation::{conserved_values, estimate_frames, probe_derivatives, ConservedFrame, FrameSeries};
pub use dynamics::{scenario, simulate, GameDefinition, History, ReactionSpec, ScenarioKind, ScenarioParams, Simulator};
pub use inversion::{control_jacobian, invert_controls, InversionSettings};
pub use numerics::TimeGrid;
pub use predictor::{estimate_horizon, predict, ControlPlan, HorizonSpec, Prediction, PredictionStatus, SurrogateSpec};
pub use probes::{generate_library, random_probe_set, Expr, ProbeLibrary, ProbeSet};
pub use selection::{
    backtest_score, evolve_pool, hyperplane_probe_set, projective_search, select_best, BacktestReport, CandidateLabel, CandidateSet, Pool,
    ProjectiveBase,
};
