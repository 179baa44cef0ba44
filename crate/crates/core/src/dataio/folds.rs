use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Index sets for one cross-validation fold.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Fold {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Shuffles `0..n` with `seed`, cuts it into `k` near-equal splits, and for
/// fold `i` uses split `i` as test, split `i + 1 (mod k)` as validation and
/// the rest as training data.
pub fn split_folds(n: usize, k: usize, seed: u64) -> Result<Vec<Fold>> {
    if k < 3 {
        return Err(Error::invalid(format!(
            "need k >= 3 folds for disjoint train/val/test roles, got {k}"
        )));
    }
    if n < k {
        return Err(Error::invalid(format!("{n} samples cannot fill {k} folds")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let base = n / k;
    let extra = n % k;
    let mut splits = Vec::with_capacity(k);
    let mut start = 0;
    for i in 0..k {
        let len = base + usize::from(i < extra);
        splits.push(order[start..start + len].to_vec());
        start += len;
    }

    Ok((0..k)
        .map(|i| {
            let v = (i + 1) % k;
            let train = (0..k)
                .filter(|&j| j != i && j != v)
                .flat_map(|j| splits[j].iter().copied())
                .collect();
            Fold {
                train,
                val: splits[v].clone(),
                test: splits[i].clone(),
            }
        })
        .collect())
}

/// Keeps `floor(fraction * len)` training indices. The subset is a prefix of
/// one seeded permutation, so smaller fractions are nested in larger ones.
pub fn subsample_nested(train: &[usize], fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid(format!("fraction must be in (0, 1], got {fraction}")));
    }
    if fraction == 1.0 {
        return Ok(train.to_vec());
    }
    let keep = (fraction * train.len() as f64).floor() as usize;
    if keep == 0 {
        return Err(Error::invalid(format!(
            "fraction {fraction} of {} training samples leaves nothing",
            train.len()
        )));
    }
    let mut order = train.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order.truncate(keep);
    Ok(order)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    #[test]
    fn ten_samples_five_folds() {
        let folds = split_folds(10, 5, 1).unwrap();
        assert_eq!(folds.len(), 5);
        let mut tested = BTreeSet::new();
        for f in &folds {
            assert_eq!((f.train.len(), f.val.len(), f.test.len()), (6, 2, 2));
            let all: BTreeSet<_> = f.train.iter().chain(&f.val).chain(&f.test).collect();
            assert_eq!(all.len(), 10);
            tested.extend(f.test.iter().copied());
        }
        assert_eq!(tested, (0..10).collect());
    }

    #[test]
    fn deterministic_and_validated() {
        assert_eq!(split_folds(23, 5, 4).unwrap(), split_folds(23, 5, 4).unwrap());
        assert_ne!(split_folds(23, 5, 4).unwrap(), split_folds(23, 5, 5).unwrap());
        assert!(split_folds(10, 1, 0).is_err());
        assert!(split_folds(3, 5, 0).is_err());
    }

    #[test]
    fn subsamples_are_nested() {
        let train: Vec<usize> = (100..180).collect();
        let s8 = subsample_nested(&train, 0.125, 9).unwrap();
        let s4 = subsample_nested(&train, 0.25, 9).unwrap();
        let s2 = subsample_nested(&train, 0.5, 9).unwrap();
        assert_eq!((s8.len(), s4.len(), s2.len()), (10, 20, 40));
        assert_eq!(&s4[..10], &s8[..]);
        assert_eq!(&s2[..20], &s4[..]);
        assert_eq!(subsample_nested(&train, 1.0, 9).unwrap(), train);
        assert!(subsample_nested(&train[..4], 0.125, 9).is_err());
    }
}
