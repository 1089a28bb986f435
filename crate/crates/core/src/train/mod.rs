//! Joint training of planner and world model.

pub mod checkpoint;
pub mod config;
pub mod losses;
mod trainer;

pub use checkpoint::{Checkpoint, RngState};
pub use config::{DataConfig, LossWeights, OptimConfig, RunConfig};
pub use losses::{reconstruction_loss, score_loss, total_loss, trajectory_loss, LossComponents};
pub use trainer::{
    agreement, load_dataset, sample_step, samples, train, train_with, EpochRecord, Sample, StepMode,
    StepOutput, TrainOutcome, TrainSinks, TrainSummary,
};
