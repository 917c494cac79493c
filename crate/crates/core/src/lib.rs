//! Entire-space multi-task conversion-rate models on a small dense-network
//! core, with a session simulator, sample calibration and evaluation.

mod error;

pub mod data;
pub mod embedding;
pub mod eval;
pub mod model;
pub mod nn;
pub mod objective;
pub mod simulator;
pub mod train;

pub use data::{Domain, InteractionSample};
pub use embedding::{FeatureSchema, FieldSpec, OovPolicy};
pub use error::{Error, Result};
pub use eval::{auc, evaluate, MetricsReport};
pub use model::{load_checkpoint, save_checkpoint, Model, ModelConfig, PredictionBundle, Variant};
pub use objective::{KlMode, LossBreakdown, LossWeights};
pub use simulator::{gap_oracle, GapReport, Simulator, SimulatorConfig};
pub use train::{train, TrainConfig, TrainOutcome};
