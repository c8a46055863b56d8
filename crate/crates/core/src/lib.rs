//! Thermal transport on district heating networks: simulation, stability
//! preserving model reduction and optimal feed-in control.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod control;
pub mod coupling;
pub mod error;
pub mod fixtures;
pub mod hydraulics;
pub mod integrator;
pub mod model;
pub mod network;
pub mod reduction;
pub mod scalar;
pub mod scenario;
pub mod sensitivity;
pub mod sparse;
pub mod thermal;

pub use error::{Error, ErrorKind, Result};
pub use scalar::Scalar;

pub type Network = network::NetworkTopology<f64>;
pub type Fom = model::FullOrderModel<f64>;
pub type Rom = reduction::ReducedOrderModel<f64>;
pub type Trajectory = integrator::Trajectory<f64>;
