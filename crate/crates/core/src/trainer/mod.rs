//! SGD training with the per-epoch learning-rate schedule, checkpoints and
//! finite-difference gradient checking.

mod checkpoint;
mod config;
mod gradcheck;
mod schedule;
mod train;

pub use checkpoint::{
    checkpoint_bytes, load_checkpoint, load_checkpoint_as, parse_checkpoint, save_checkpoint, vocab_path,
    CheckpointHeader,
};
pub use config::{AdversarialMode, TrainConfig};
pub use gradcheck::{
    compare_gradients, compare_gradients_in, compare_term_gradients_in, grad_check, grad_check_config, grad_check_model, relative_error, GradCheckReport,
    GroupError, DEFAULT_EPS, DESK_GRADCHECK_CONFIG,
};
pub use schedule::{lr_update, lr_update_forced, sgd_step, sgd_step_where, TrainState};
pub use train::{
    derive_seed, evaluate, metrics_csv, prepare_data, read_metrics, train_cycle, train_multitask,
    train_multitask_with, write_metrics, EpochHook, MetricsRow, PreparedData, TaskData, TrainOutcome,
    METRICS_HEADER,
};
