//! Continual-learning lab built around low-rank adapters.
//!
//! Tasks arrive in sequence. Each one is learned by a LoRA adapter in two
//! stages: a free stage on the full training split, then a constrained stage
//! on a small subset where the adapter is pushed orthogonal to gradients of
//! earlier merged models. Finished adapters are frozen into a delta stack on
//! top of the base weights.

pub mod cli;
pub mod error;
pub mod linalg;
pub mod lora;
pub mod metrics;
pub mod models;
pub mod regularizers;
pub mod tasks;
pub mod trainer;

pub use error::{Error, Result};
pub use linalg::{Matrix, RngStream};
pub use lora::{BaseWeights, DeltaStack, LayerShape, LoraAdapter, LoraConfig};
pub use metrics::{MetricSummary, PerfMatrix};
pub use models::{Batch, Model, ModelKind, ModelSpec};
pub use regularizers::{GpwcSnapshot, OrthPenalty, RegWeights};
pub use tasks::{QuadraticPair, RotatedGaussians, SubsetPlan, TaskSpec, TaskStream};
pub use trainer::{OptimConfig, RunArtifacts, Strategy, StrategyName};
