//! Seeded train/validation split.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitPlan {
    pub seed: u64,
    pub train: Vec<String>,
    pub val: Vec<String>,
}

/// Deterministic shuffled split. |train| = round(train_fraction * total);
/// train and val together cover the ids exactly once.
pub fn split(ids: &[String], seed: u64, train_fraction: f64) -> Result<SplitPlan> {
    if ids.len() < 2 {
        return Err(Error::Validation(format!(
            "need at least 2 samples to split, got {}",
            ids.len()
        )));
    }
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(Error::Validation(format!(
            "train_fraction must be in [0,1], got {train_fraction}"
        )));
    }

    // Fisher-Yates with our own index draws, so the plan depends only on
    // the ChaCha8 stream and not on any library shuffle implementation.
    let mut order: Vec<usize> = (0..ids.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }

    let n_train = (train_fraction * ids.len() as f64).round() as usize;
    let train = order[..n_train].iter().map(|&i| ids[i].clone()).collect();
    let val = order[n_train..].iter().map(|&i| ids[i].clone()).collect();
    Ok(SplitPlan { seed, train, val })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("img_{i:03}")).collect()
    }

    #[test]
    fn eighty_twenty_on_ten_samples() {
        let plan = split(&ids(10), 0, 0.8).unwrap();
        assert_eq!(plan.train.len(), 8);
        assert_eq!(plan.val.len(), 2);

        let mut all: Vec<&String> = plan.train.iter().chain(&plan.val).collect();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 10, "split must cover every id exactly once");
    }

    #[test]
    fn same_seed_gives_identical_plans() {
        let a = split(&ids(25), 3, 0.8).unwrap();
        let b = split(&ids(25), 3, 0.8).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn too_few_samples_or_bad_fraction_error() {
        assert!(split(&ids(1), 0, 0.8).is_err());
        assert!(split(&ids(10), 0, 1.5).is_err());
    }

    #[test]
    fn rounding_rule_is_round_half_like_f64() {
        // 0.8 * n never lands on .5, so f64 round() is unambiguous here.
        for (n, want_train) in [(2, 2), (3, 2), (5, 4), (7, 6), (12, 10), (100, 80)] {
            let plan = split(&ids(n), 0, 0.8).unwrap();
            assert_eq!(plan.train.len(), want_train, "n={n}");
        }
    }

    /// Golden plans frozen from the first run of the seeded shuffle.
    /// These pins make cross-platform / cross-version drift visible:
    /// checkpoint reproducibility depends on the split staying put.
    #[test]
    fn golden_plans_for_the_three_canonical_seeds() {
        let ids = ids(10);
        let val_of = |seed: u64| split(&ids, seed, 0.8).unwrap().val;
        assert_eq!(val_of(0), ["img_004", "img_007"]);
        assert_eq!(val_of(1), ["img_005", "img_004"]);
        assert_eq!(val_of(2), ["img_007", "img_005"]);

        let plan0 = split(&ids, 0, 0.8).unwrap();
        assert_eq!(
            plan0.train,
            ["img_002", "img_001", "img_009", "img_005", "img_008", "img_003", "img_006",
             "img_000"]
        );
    }
}
