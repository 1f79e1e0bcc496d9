//! Consensus-based distributed Kalman filtering with partial state sharing,
//! coordinated Byzantine attack design, and the analysis tools to study both.
//!
//! The crate is organized by role:
//!
//! - [`model`]: linear dynamics, sensors, random connected networks.
//! - [`selection`]: partial-sharing selection schedules.
//! - [`filter`]: the estimator, its gains and its stability bound.
//! - [`attack`]: perturbations and the attacker's design problems.
//! - [`analysis`]: exact covariance propagation and MSE metrics.
//! - [`experiment`]: configuration, presets and artifact export.

pub mod analysis;
pub mod attack;
pub mod error;
pub mod experiment;
pub mod filter;
pub mod linalg;
pub mod model;
pub mod rng;
pub mod selection;

pub use attack::{AttackObjectiveContext, AttackPlan};
pub use error::{Error, Result};
pub use filter::{AgentRuntime, GainVariant, Scenario, StabilityProfile};
pub use linalg::{Matrix, Vector};
pub use model::{NetworkGraph, ObservationModel, StateSpaceModel};
pub use selection::SelectionSchedule;
