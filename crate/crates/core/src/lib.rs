//! Curvature-adaptive batch-size training.
//!
//! SGD whose batch size and learning rate grow together when the dominant
//! Hessian eigenvalue decays, optionally mixing FGSM adversarial examples
//! into each batch. Alongside the trainer the crate carries the pieces needed
//! to check it: a reverse-mode tape with Hessian-vector products, power
//! iteration, strongly convex convergence checks, and a cost simulator for
//! elastic data-parallel clusters.

pub mod adversarial;
pub mod autodiff;
pub mod convergence;
pub mod data;
pub mod error;
pub mod hessian;
pub mod models;
pub mod scheduler;
pub mod sim;
pub mod trainer;

pub use adversarial::{fgsm, mix_adversarial, AdvConfig};
pub use autodiff::{evaluate, hvp, input_gradient, DiffResult, HessianOperator, ParamVector, Segment};
pub use convergence::{BatchSchedule, ConvexConstants};
pub use data::{Batch, CsvSchema, Dataset};
pub use error::{Error, Result};
pub use hessian::{HessianEstimate, PowerConfig};
pub use models::{Activation, LossKind, Model, ModelKind, ModelSpec};
pub use scheduler::{FlagReason, ScaleEvent, SchedulerConfig, SchedulerState};
pub use sim::{CostModel, SimSchedule, TimeBreakdown};
pub use trainer::{Strategy, TrainConfig, TrainingLog};
