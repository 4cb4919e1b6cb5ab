use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::fit::{evaluate, fit, TrainConfig, TrainReport};
use super::folds::{stratified_folds, FoldSplit};
use super::metrics::{Metrics, Summary};
use crate::data::TrialSet;
use crate::error::{Error, Result};
use crate::model::{AbsoluteNet, ModelConfig};
use crate::rng::{derive, derived};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CvOptions {
    pub folds: usize,
    /// Run only the first `n` folds.
    pub max_folds: Option<usize>,
    /// Train folds concurrently on the current rayon pool.
    pub parallel: bool,
}

impl Default for CvOptions {
    fn default() -> Self {
        CvOptions {
            folds: 5,
            max_folds: None,
            parallel: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub split: FoldSplit,
    pub select: TrainReport,
    pub retrain: TrainReport,
    pub test: Metrics,
    /// Test trials that reached a gradient update; zero unless the split
    /// is broken.
    pub leaked_test: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub folds: Vec<FoldResult>,
    pub summary: Summary,
    pub trainable_params: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

/// Seed of fold `i` given the run seed.
pub fn fold_seed(seed: u64, fold: usize) -> u64 {
    derive(seed, 100 + fold as u64)
}

/// One fold: select the best checkpoint over `epochs_select` epochs on the
/// train part, continue it for `epochs_retrain` epochs on train + val, then
/// score the untouched test part.
pub fn run_fold(set: &TrialSet, split: &FoldSplit, model: &ModelConfig, train: &TrainConfig) -> Result<FoldResult> {
    let seed = fold_seed(train.seed, split.fold);
    let mut net = AbsoluteNet::<f32>::build(model, &mut derived(seed, 0))?;
    let select = fit(
        &mut net,
        set,
        &split.train,
        Some(&split.val),
        train.epochs_select,
        train,
        derive(seed, 1),
    )?;
    *net.params_mut() = select.best;
    let mut combined: Vec<usize> = split.train.iter().chain(&split.val).copied().collect();
    combined.sort_unstable();
    let retrain = fit(
        &mut net,
        set,
        &combined,
        None,
        train.epochs_retrain,
        train,
        derive(seed, 2),
    )?;
    let test = evaluate(&net, set, &split.test)?;
    let leaked_test = split
        .test
        .iter()
        .copied()
        .filter(|i| select.updated.binary_search(i).is_ok() || retrain.updated.binary_search(i).is_ok())
        .collect();
    Ok(FoldResult {
        fold: split.fold,
        split: split.clone(),
        select: select.report,
        retrain: retrain.report,
        test,
        leaked_test,
    })
}

pub fn cross_validate(
    set: &TrialSet,
    model: &ModelConfig,
    train: &TrainConfig,
    options: &CvOptions,
) -> Result<CvReport> {
    train.validate()?;
    if set.channels != model.input_channels || set.samples != model.input_samples {
        return Err(Error::config(
            "model",
            format!(
                "model expects {}x{} trials, dataset has {}x{}",
                model.input_channels, model.input_samples, set.channels, set.samples
            ),
        ));
    }
    let trainable_params = AbsoluteNet::<f32>::build(model, &mut derived(0, 0))?
        .params()
        .trainable_count();
    let mut splits = stratified_folds(&set.labels, options.folds, derive(train.seed, 1))?;
    if let Some(n) = options.max_folds {
        splits.truncate(n.max(1));
    }
    let folds: Vec<FoldResult> = if options.parallel {
        splits
            .par_iter()
            .map(|s| run_fold(set, s, model, train))
            .collect::<Result<_>>()?
    } else {
        splits
            .iter()
            .map(|s| run_fold(set, s, model, train))
            .collect::<Result<_>>()?
    };
    let metrics: Vec<Metrics> = folds.iter().map(|f| f.test).collect();
    Ok(CvReport {
        summary: Summary::of(&metrics),
        folds,
        trainable_params,
        model: model.clone(),
        train: train.clone(),
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.6}")).unwrap_or_default()
}

pub const EPOCHS_CSV_HEADER: &str = "fold,phase,epoch,train_loss,train_accuracy,val_loss,val_accuracy";

/// Per-epoch curves of every fold and phase.
pub fn epochs_csv(report: &CvReport) -> String {
    let mut out = String::from(EPOCHS_CSV_HEADER);
    out.push('\n');
    for f in &report.folds {
        for (phase, r) in [("select", &f.select), ("retrain", &f.retrain)] {
            for e in &r.epochs {
                let _ = writeln!(
                    out,
                    "{},{phase},{},{:.6},{:.6},{},{}",
                    f.fold,
                    e.epoch,
                    e.train_loss,
                    e.train_accuracy,
                    opt(e.val_loss),
                    opt(e.val_accuracy)
                );
            }
        }
    }
    out
}

pub const FOLDS_CSV_HEADER: &str =
    "fold,train,val,test,selected_epoch,best_val_loss,tp,fp,tn,fn,accuracy,sensitivity,specificity";

pub fn folds_csv(report: &CvReport) -> String {
    let mut out = String::from(FOLDS_CSV_HEADER);
    out.push('\n');
    for f in &report.folds {
        let c = f.test.counts;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{:.6},{:.6},{:.6}",
            f.fold,
            f.split.train.len(),
            f.split.val.len(),
            f.split.test.len(),
            f.select.selected_epoch,
            opt(f.select.best_val_loss),
            c.tp,
            c.fp,
            c.tn,
            c.fn_,
            f.test.accuracy,
            f.test.sensitivity,
            f.test.specificity
        );
    }
    out
}
