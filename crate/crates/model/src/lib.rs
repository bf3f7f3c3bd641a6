//! Graph neural jump-ODE cascade predictor.
//!
//! A forward pass encodes the post-outage grid with edge-conditioned
//! attention, advances node states with one Euler step of a neural ODE,
//! applies a gated jump for edges predicted to trip, and decodes edge,
//! node, severity and demand-not-served targets. A learned Kirchhoff
//! residual regularizes training.

pub mod batch;
pub mod config;
pub mod diagnostics;
pub mod error;
pub mod eval;
mod layers;
pub mod loss;
pub mod model;
pub mod train;

pub use batch::GraphBatch;
pub use config::{ModelConfig, MultiRoundConfig, Variant};
pub use diagnostics::{gradient_check, GradCheck};
pub use error::{ModelError, Result};
pub use eval::{evaluate, per_round_report, predict, Mode, Prediction, RoundReport};
pub use loss::{LossConfig, LossParts};
pub use model::{CheckpointHeader, Model, ModelOutput, TeacherSignal};
pub use train::{calibrate_thresholds, train, Thresholds, TrainConfig, TrainOutcome};
