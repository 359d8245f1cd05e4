//! Per-step training loop, method registry, checkpoints and the experiment driver.

mod checkpoint;
mod experiment;
mod method;
mod train;

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use experiment::{
    derive_seed, load_data, run_experiment, step_settings, RunData, RunOptions, RunSummary,
    StepOutcome, CURVES_CSV, EPOCHS_CSV, HISTORY_CSV, RESULTS_CSV, RESULTS_FORMAT_VERSION,
};
pub use method::{CeKind, LogitKdKind, MethodName, MethodSpec};
pub use train::{
    holdout_miou, train_step, Control, EpochRecord, IterRecord, StepContext, StepHistory,
    StepSettings, TrainState,
};
