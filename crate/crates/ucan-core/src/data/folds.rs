//! Deterministic k-fold split of study ids for cross validation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Splits `study_ids` into `k` folds of (train, test) id lists.
///
/// The test splits partition the id set: disjoint, covering, sizes differing
/// by at most one. The shuffle is seeded, so the same inputs always yield
/// the same folds.
pub fn split_folds(
    study_ids: &[String],
    k: usize,
    seed: u64,
) -> Result<Vec<(Vec<String>, Vec<String>)>> {
    if k < 2 {
        return Err(Error::InvalidConfig {
            field: "k".into(),
            reason: format!("need k >= 2, got {k}"),
        });
    }
    if study_ids.len() < k {
        return Err(Error::InvalidConfig {
            field: "k".into(),
            reason: format!("k = {k} exceeds the {} available studies", study_ids.len()),
        });
    }
    let mut shuffled: Vec<String> = study_ids.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shuffled.shuffle(&mut rng);

    let n = shuffled.len();
    let base = n / k;
    let extra = n % k; // the first `extra` folds get one more test id
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for fold in 0..k {
        let size = base + usize::from(fold < extra);
        let test: Vec<String> = shuffled[start..start + size].to_vec();
        let train: Vec<String> = shuffled[..start]
            .iter()
            .chain(&shuffled[start + size..])
            .cloned()
            .collect();
        folds.push((train, test));
        start += size;
    }
    Ok(folds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("study_{i:03}")).collect()
    }

    #[test]
    fn thirty_five_ids_give_28_7_splits() {
        let folds = split_folds(&ids(35), 5, 1).unwrap();
        assert_eq!(folds.len(), 5);
        for (train, test) in &folds {
            assert_eq!(train.len(), 28);
            assert_eq!(test.len(), 7);
        }
    }

    #[test]
    fn test_splits_partition_the_ids() {
        let all = ids(13);
        let folds = split_folds(&all, 4, 9).unwrap();
        let mut seen = BTreeSet::new();
        for (_, test) in &folds {
            for id in test {
                assert!(seen.insert(id.clone()), "{id} in two test splits");
            }
        }
        assert_eq!(seen.len(), all.len());
    }

    #[test]
    fn same_seed_same_folds() {
        let all = ids(11);
        assert_eq!(
            split_folds(&all, 3, 7).unwrap(),
            split_folds(&all, 3, 7).unwrap()
        );
    }

    #[test]
    fn k_larger_than_ids_rejected() {
        assert!(split_folds(&ids(3), 5, 0).is_err());
        assert!(split_folds(&ids(3), 1, 0).is_err());
    }
}
