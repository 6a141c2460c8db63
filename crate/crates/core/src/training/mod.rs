//! Training pipeline: data, loss, optimiser, schedule and the loop itself.

pub mod data;
mod loss;
mod optim;
pub mod resize;
mod schedule;
mod trainer;

pub use loss::charbonnier;
pub use optim::{clip_grad_norm, AdamW};
pub use schedule::LrSchedule;
pub use trainer::{init_model, train, StepStats, TrainConfig, TrainPaths, TrainSummary, Trainer};
