//! Grid cases, AC power flow, cascading-failure simulation and the dataset
//! pipeline that turns simulated cascades into graph samples.

pub mod cascade;
pub mod dataset;
pub mod error;
pub mod grid;
pub mod metrics;
pub mod powerflow;
pub mod rng;

pub use error::{CaseError, DatasetError, SimError};
pub use grid::{directed_view, load_case, scale_loads, DirectedEdgeView, GridCase};
pub use powerflow::{island_decomposition, solve_ac, PowerFlowSolution};
