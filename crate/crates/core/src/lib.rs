//! Tolls, commuter traffic and EV charging on a distribution grid.
//!
//! A two-class Wardrop equilibrium over parallel paths gives the energy each
//! charging station must deliver during the working day. Three schedulers
//! (per station, aggregator, grid operator) spread that energy over time
//! slots, and an AC power flow prices each schedule by the squared apparent
//! power at the head of the feeder.
//!
//! The numerical core is generic over the scalar type; the aliases below fix
//! it to `f64` for everyday use. Water-filling and the local and global
//! schedulers also accept exact rationals.

// `!(x > 0)` is how validation rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli_io;
pub mod experiments;
pub mod grid;
pub mod linalg;
pub mod qp;
pub mod scalar;
pub mod scheduling;
pub mod std_types;
pub mod traffic;

use num_rational::Ratio;

pub use scalar::{Real, Scalar};

pub type TransportScenario64 = traffic::TransportScenario<f64>;
pub type EquilibriumResult64 = traffic::EquilibriumResult<f64>;
pub type ChargingNeeds64 = traffic::ChargingNeeds<f64>;
pub type GridModel64 = grid::GridModel<f64>;
pub type PowerFlowSolution64 = grid::PowerFlowSolution<f64>;
pub type SlotWeights64 = scheduling::SlotWeights<f64>;
pub type LoadSchedule64 = scheduling::LoadSchedule<f64>;

pub type TransportScenario32 = traffic::TransportScenario<f32>;
pub type GridModel32 = grid::GridModel<f32>;
pub type LoadSchedule32 = scheduling::LoadSchedule<f32>;

/// Exact schedules for the water-filling based methods.
pub type LoadScheduleRational = scheduling::LoadSchedule<Ratio<i64>>;
pub type SlotWeightsRational = scheduling::SlotWeights<Ratio<i64>>;
