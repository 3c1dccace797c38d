//! Seeded stratified splits.

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::seed;

fn class_indices(labels: &[u8], seed: u64) -> [Vec<usize>; 2] {
    let mut rng = seed::rng(seed);
    let mut classes = [Vec::new(), Vec::new()];
    for (i, &l) in labels.iter().enumerate() {
        classes[usize::from(l == 1)].push(i);
    }
    for c in &mut classes {
        c.shuffle(&mut rng);
    }
    classes
}

/// Split into (train, holdout) with `fraction` of each class held out.
/// Both returned lists are sorted ascending.
pub fn stratified_holdout(labels: &[u8], fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let classes = class_indices(labels, seed);
    if classes.iter().any(|c| c.len() < 2) {
        return Err(Error::Stratification(
            "holdout split needs at least 2 samples of each class".into(),
        ));
    }
    let mut train = Vec::new();
    let mut holdout = Vec::new();
    for c in &classes {
        let take = ((c.len() as f64 * fraction).round() as usize).clamp(1, c.len() - 1);
        holdout.extend_from_slice(&c[..take]);
        train.extend_from_slice(&c[take..]);
    }
    train.sort_unstable();
    holdout.sort_unstable();
    Ok((train, holdout))
}

/// Stratified k-fold: returns the validation index set of each fold (sorted).
/// Each class is shuffled and dealt round-robin, so per-fold class counts
/// differ by at most one.
pub fn stratified_kfold(labels: &[u8], folds: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if folds < 2 {
        return Err(Error::Parameter(format!("need at least 2 folds, got {folds}")));
    }
    let classes = class_indices(labels, seed);
    for (label, c) in classes.iter().enumerate() {
        if c.len() < folds {
            return Err(Error::Stratification(format!(
                "class {label} has {} samples, fewer than {folds} folds",
                c.len()
            )));
        }
    }
    let mut out = vec![Vec::new(); folds];
    let mut slot = 0;
    for c in &classes {
        for &i in c {
            out[slot % folds].push(i);
            slot += 1;
        }
    }
    for f in &mut out {
        f.sort_unstable();
    }
    Ok(out)
}

/// Complement of `subset` in `0..n`, ascending.
pub fn complement(n: usize, subset: &[usize]) -> Vec<usize> {
    let mut mask = vec![true; n];
    for &i in subset {
        mask[i] = false;
    }
    (0..n).filter(|&i| mask[i]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(n: usize, positives: usize) -> Vec<u8> {
        (0..n)
            .map(|i| u8::from(i % (n / positives).max(1) == 0 && i / (n / positives).max(1) < positives))
            .collect()
    }

    #[test]
    fn folds_partition_and_stratify() {
        let y = labels(2768, 2268);
        let folds = stratified_kfold(&y, 5, 3).unwrap();
        let mut all: Vec<usize> = folds.concat();
        all.sort_unstable();
        assert_eq!(all, (0..y.len()).collect::<Vec<_>>());
        let global = y.iter().filter(|&&l| l == 1).count() as f64 / y.len() as f64;
        for f in &folds {
            let rate = f.iter().filter(|&&i| y[i] == 1).count() as f64 / f.len() as f64;
            assert!((rate - global).abs() < 0.02);
        }
    }

    #[test]
    fn single_class_fold_is_rejected() {
        assert!(matches!(
            stratified_kfold(&[1, 1, 1, 0], 2, 0),
            Err(Error::Stratification(_))
        ));
    }

    #[test]
    fn holdout_keeps_both_classes() {
        let y = labels(100, 30);
        let (train, hold) = stratified_holdout(&y, 0.2, 1).unwrap();
        assert_eq!(train.len() + hold.len(), 100);
        assert_eq!(hold.iter().filter(|&&i| y[i] == 1).count(), 6);
        assert_eq!(complement(100, &hold), train);
    }
}
