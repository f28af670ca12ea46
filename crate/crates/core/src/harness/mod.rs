//! Configuration, training, evaluation, ablations and run outputs.

mod ablate;
pub mod checkpoint;
mod config;
mod gradcheck;
mod train;

use std::path::Path;

pub use ablate::{ablate, ablation_csv, directional_checks, AblationRow, OrderingCheck};
pub use config::RunConfig;
pub use gradcheck::grad_check;
pub use train::{
    build_model, evaluate, train, train_step, write_evaluation, write_outputs, EpochRecord, Evaluation, ReportFile,
    SampleSelection, TrainLog, TrainOutcome,
};

use crate::error::Result;
use crate::features::{load_dataset, Dataset, Planted};

/// A dataset directory and its planted-cell file, if any.
pub fn load_data(dir: &Path) -> Result<(Dataset, Option<Planted>)> {
    let data = load_dataset(dir)?;
    let planted = Planted::load(dir)?;
    Ok((data, planted))
}
