//! Training runs, checkpoints, hyperparameter grids and the reports built
//! from their evaluation records.

use std::io;

use thiserror::Error;

mod checkpoint;
mod config;
mod grid;
mod report;
mod train;

pub use checkpoint::{peek_dtype, Checkpoint, MAGIC, VERSION};
pub use config::RunConfig;
pub use grid::{expand_grid, run_grid, GridSpec, GP_GRID, DISC_UPDATES_GRID};
pub use report::{
    read_runs, select_best, selection_report, stability_rows, write_diagnostics, write_runs, write_scatter, write_selection,
    write_stability, GroupSelection, Metric, RunRow, Selected, StabilityRow,
};
pub use train::{checkpoint_path, init_bundle, evaluate_saved, load_model, train, train_from, Counters, EXTRACTOR_DIM, StepMetrics, TrainSummary, Trainer};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint belongs to run {found}, not {expected}")]
    HashMismatch { expected: String, found: String },
    #[error("grid dimension {0} is empty")]
    EmptyGrid(String),
    #[error(transparent)]
    Model(#[from] crate::models::ModelError),
    #[error(transparent)]
    Loss(#[from] crate::losses::LossError),
    #[error(transparent)]
    Eval(#[from] crate::eval::EvalError),
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
    #[error(transparent)]
    Nn(#[from] crate::nn::NnError),
    #[error(transparent)]
    Autodiff(#[from] crate::autodiff::AutodiffError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl HarnessError {
    /// A value overflowed or turned NaN somewhere below.
    pub fn is_non_finite(&self) -> bool {
        use crate::autodiff::AutodiffError as A;
        use crate::eval::EvalError as E;
        let ad = |e: &A| matches!(e, A::NonFinite { .. });
        let nn = |e: &crate::nn::NnError| matches!(e, crate::nn::NnError::Autodiff(a) if ad(a));
        let model = |e: &crate::models::ModelError| match e {
            crate::models::ModelError::Nn(n) => nn(n),
            crate::models::ModelError::Autodiff(a) => ad(a),
            _ => false,
        };
        match self {
            HarnessError::Autodiff(a) => ad(a),
            HarnessError::Loss(crate::losses::LossError::Autodiff(a)) => ad(a),
            HarnessError::Nn(n) => nn(n),
            HarnessError::Model(m) => model(m),
            HarnessError::Eval(E::NonFinite(_)) | HarnessError::Eval(E::NotPsd(_)) => true,
            HarnessError::Eval(E::Nn(n)) => nn(n),
            HarnessError::Eval(E::Model(m)) => model(m),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;

#[cfg(test)]
mod tests;
