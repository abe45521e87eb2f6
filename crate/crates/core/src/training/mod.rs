//! Optimization of the full objective: configuration, Adam, epoch sampling,
//! the training loop and checkpoints.

mod adam;
mod checkpoint;
mod config;
mod sampler;
mod trainer;

pub use adam::{adam_step, Adam, AdamSlot, ADAM_BETA1, ADAM_BETA2, ADAM_EPSILON};
pub use checkpoint::{CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::TrainConfig;
pub use sampler::{sample_source_batch, sample_target_batch, EpochSampler};
pub use trainer::{objective_and_gradients, train, IterationBatch, Objective, TrainOutcome, Trainer};
