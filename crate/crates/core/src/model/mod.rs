//! The joint model: configuration, network assembly, the training step,
//! synthesis, the optimizer and checkpoints.

mod checkpoint;
mod config;
mod network;
mod optim;
mod train;

pub use checkpoint::{Checkpoint, FORMAT_VERSION, MAGIC};
pub use config::{parse_pairs, JditConfig, Profile};
pub use network::{durations_from_log, ArOutputs, DurationPredictor, JditModel};
pub use optim::{radam_noam_update, rectification, NoamSchedule, OptimizerState, RadamHyper};
pub use train::{
    compute_gradients, dropout_rng, extract_utterance_durations, predicted_durations, repair_durations, teacher_forced_alignment,
    train_step,
    Batch, BatchGradients, BatchItem, TrainStepReport,
};
