//! Optimizer, training loop, cross-validation protocol and metrics.

mod adam;
mod cv;
mod fit;
mod folds;
mod metrics;

pub use adam::{adam_step, Adam, AdamConfig, AdamState};
pub use cv::{
    cross_validate, epochs_csv, fold_seed, folds_csv, run_fold, CvOptions, CvReport, FoldResult, EPOCHS_CSV_HEADER,
    FOLDS_CSV_HEADER,
};
pub use fit::{
    batches, evaluate, fit, loss_and_accuracy, predict, recalibrate_batch_norm, EpochRecord, FitOutcome, TrainConfig,
    TrainReport,
};
pub use folds::{stratified_folds, FoldSplit};
pub use metrics::{argmax, Confusion, MeanStd, Metrics, Summary};
