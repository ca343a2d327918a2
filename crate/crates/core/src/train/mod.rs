//! Optimisation: configuration, Adam, checkpoints and the training loop.

pub mod adam;
pub mod checkpoint;
pub mod config;
pub mod run;

pub use adam::{adam_step, AdamState};
pub use checkpoint::{load_checkpoint, load_checkpoint_for, save_checkpoint, Checkpoint, Progress};
pub use config::{lr_schedule, TrainConfig};
pub use run::{
    class_names, evaluate_cases, initial_params, load_run_data, mean_kl, read_log, train, train_on,
    train_step, RunData, StepLog, StepLosses, TrainOutcome, ValidationRecord,
};
