use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::seeded_rng;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub fold_index: usize,
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum FoldStrategy {
    /// Seeded shuffle, then contiguous chunks.
    #[default]
    Random,
    /// Seeded shuffle, stable sort by MOS, then round-robin assignment.
    Stratified,
}

/// Validation-fold sizes: `n / k` each, remainder spread over the first folds.
pub fn fold_sizes(n: usize, k: usize) -> Vec<usize> {
    (0..k).map(|i| n / k + usize::from(i < n % k)).collect()
}

fn splits_from_assignment(ids: &[String], fold_of: &[usize], k: usize) -> Vec<FoldSplit> {
    (0..k)
        .map(|f| {
            let (val, train): (Vec<_>, Vec<_>) =
                ids.iter().zip(fold_of).partition(|(_, &a)| a == f);
            FoldSplit {
                fold_index: f,
                train_ids: train.into_iter().map(|(id, _)| id.clone()).collect(),
                val_ids: val.into_iter().map(|(id, _)| id.clone()).collect(),
            }
        })
        .collect()
}

fn check(n: usize, k: usize) -> Result<()> {
    if k < 2 {
        return Err(Error::config(format!("need at least 2 folds, got {k}")));
    }
    if k > n {
        return Err(Error::config(format!("cannot make {k} folds from {n} samples")));
    }
    Ok(())
}

/// Unstratified folds. Ids keep their input order inside each split.
pub fn make_folds(ids: &[String], k: usize, seed: u64) -> Result<Vec<FoldSplit>> {
    check(ids.len(), k)?;
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.shuffle(&mut seeded_rng(seed));
    let mut fold_of = vec![0; ids.len()];
    let mut pos = 0;
    for (f, size) in fold_sizes(ids.len(), k).into_iter().enumerate() {
        for &i in &order[pos..pos + size] {
            fold_of[i] = f;
        }
        pos += size;
    }
    Ok(splits_from_assignment(ids, &fold_of, k))
}

/// Folds with similar MOS distributions.
pub fn make_stratified_folds(ids: &[String], mos: &[f64], k: usize, seed: u64) -> Result<Vec<FoldSplit>> {
    check(ids.len(), k)?;
    if mos.len() != ids.len() {
        return Err(Error::config("one MOS value per id required"));
    }
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.shuffle(&mut seeded_rng(seed));
    order.sort_by(|&a, &b| mos[a].total_cmp(&mos[b]));
    let mut fold_of = vec![0; ids.len()];
    for (rank, &i) in order.iter().enumerate() {
        fold_of[i] = rank % k;
    }
    Ok(splits_from_assignment(ids, &fold_of, k))
}
