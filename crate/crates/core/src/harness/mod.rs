//! Training, evaluation, ablation and the channel sweep.

pub mod config;
pub mod evaluate;
pub mod experiments;
pub mod pipeline;
pub mod train;

pub use config::{Mode, TrainConfig};
pub use evaluate::{evaluate, Report};
pub use experiments::{ablate, run, sweep_d};
pub use train::{load_trained, save_trained, train, TrainOutput};
