//! Class-stratified k-fold splits.

use rand::seq::SliceRandom;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::seed;

fn check(k: usize, fold: usize) -> Result<()> {
    if k < 2 {
        return Err(Error::Config(format!("k-fold needs k >= 2, got {k}")));
    }
    if fold >= k {
        return Err(Error::Config(format!("fold {fold} outside 0..{k}")));
    }
    Ok(())
}

/// Fold number of every image. Each class is shuffled and dealt round-robin
/// starting at a rotating offset, so fold sizes differ by at most one.
fn assignments(dataset: &Dataset, k: usize, seed: u64) -> Result<Vec<usize>> {
    let groups = dataset.by_class();
    let smallest = groups.values().map(Vec::len).min().unwrap_or(0);
    if k > smallest {
        return Err(Error::Config(format!(
            "k = {k} exceeds the smallest class size {smallest}"
        )));
    }
    let mut fold_of = vec![0; dataset.len()];
    let mut offset = 0;
    for (&class, idx) in &groups {
        let mut idx = idx.clone();
        idx.shuffle(&mut seed::derived_rng(seed, "fold-class", class as u64));
        for (p, &i) in idx.iter().enumerate() {
            fold_of[i] = (p + offset) % k;
        }
        offset = (offset + idx.len()) % k;
    }
    Ok(fold_of)
}

/// Images each class contributes to each fold, in class order. Sizes depend
/// only on the class sizes, not on the shuffle seed.
pub fn fold_sizes(dataset: &Dataset, k: usize) -> Vec<Vec<usize>> {
    let mut offset = 0;
    dataset
        .by_class()
        .values()
        .map(|idx| {
            let mut sizes = vec![0; k];
            for p in 0..idx.len() {
                sizes[(p + offset) % k] += 1;
            }
            offset = (offset + idx.len()) % k;
            sizes
        })
        .collect()
}

/// Image indices of the training part and validation fold `fold` of `k`.
/// Validation folds over `fold = 0..k` are disjoint and cover the dataset.
pub fn kfold_split(dataset: &Dataset, k: usize, fold: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    check(k, fold)?;
    let fold_of = assignments(dataset, k, seed)?;
    let (val, train): (Vec<usize>, Vec<usize>) = (0..dataset.len()).partition(|&i| fold_of[i] == fold);
    Ok((train, val))
}

/// Splits class ids into `k` folds and returns (other classes, fold `fold`).
pub fn class_folds(classes: &[usize], k: usize, fold: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    check(k, fold)?;
    if k > classes.len() {
        return Err(Error::Config(format!("k = {k} exceeds the class count {}", classes.len())));
    }
    let mut order = classes.to_vec();
    order.sort_unstable();
    order.shuffle(&mut seed::derived_rng(seed, "fold-classes", 0));
    let (mut held, mut rest) = (Vec::new(), Vec::new());
    for (p, c) in order.into_iter().enumerate() {
        if p % k == fold {
            held.push(c);
        } else {
            rest.push(c);
        }
    }
    held.sort_unstable();
    rest.sort_unstable();
    Ok((rest, held))
}
