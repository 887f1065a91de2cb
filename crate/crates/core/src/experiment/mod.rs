//! Training, evaluation, checkpoints and the ablation grid.

mod checkpoint;
mod grid;
mod schedule;
mod train;

pub use checkpoint::{
    checkpoint_from_bytes, checkpoint_to_bytes, load_checkpoint, save_checkpoint, CheckpointMeta, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use grid::{
    reference_error, results_markdown, run_grid, write_results_csv, read_results_csv, GridCell, GridSpec, ResultRow,
    Variant, GRID_EYE_DISTANCE, RESULTS_HEADER,
};
pub use schedule::{lr_schedule, ScheduleKind};
pub use train::{
    check_compatible, epoch_seed, evaluate, read_epoch_log, train, train_model, write_epoch_log, write_sample_errors, EpochRecord,
    Evaluation, SampleError, TrainConfig, TrainRun, EPOCH_LOG_HEADER, EVAL_BATCH,
};

use std::path::Path;

use crate::config::ConfigError;
use crate::data::DataError;
use crate::nn::NnError;
use crate::tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Checkpoint(String),
    #[error("{0}")]
    Schedule(String),
    #[error("model and data are incompatible: {0}")]
    Incompatible(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFinite { epoch: usize, batch: usize },
    #[error("cannot evaluate on an empty dataset")]
    Empty,
    #[error("invalid grid: {0}")]
    Grid(String),
    #[error("{path}: {reason}")]
    Table { path: String, reason: String },
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.display().to_string(),
        source,
    }
}
