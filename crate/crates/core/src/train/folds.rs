use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::seeded;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub fold: usize,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Splits trial indices into `k` class-stratified parts. Fold `i` tests on
/// part `i`, validates on part `i + 1 (mod k)` and trains on the rest, so
/// with `k = 5` each fold is 60/20/20.
pub fn stratified_folds(labels: &[u8], k: usize, seed: u64) -> Result<Vec<FoldSplit>> {
    if k < 3 {
        return Err(Error::config("folds", format!("need at least 3 folds, got {k}")));
    }
    let mut classes: Vec<u8> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::Dataset(format!("need both classes, found {classes:?}")));
    }
    let mut rng = seeded(seed);
    let mut parts = vec![Vec::new(); k];
    // The dealing position carries over between classes so part sizes
    // differ by at most one overall as well as within each class.
    let mut next = 0;
    for class in classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if members.len() < k {
            return Err(Error::Dataset(format!(
                "class {class} has {} trials, {k} folds need at least {k}",
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        for i in members {
            parts[next].push(i);
            next = (next + 1) % k;
        }
    }
    for p in &mut parts {
        p.sort_unstable();
    }
    Ok((0..k)
        .map(|fold| {
            let val_part = (fold + 1) % k;
            let mut train: Vec<usize> = (0..k)
                .filter(|&p| p != fold && p != val_part)
                .flat_map(|p| parts[p].iter().copied())
                .collect();
            train.sort_unstable();
            FoldSplit {
                fold,
                train,
                val: parts[val_part].clone(),
                test: parts[fold].clone(),
            }
        })
        .collect())
}
