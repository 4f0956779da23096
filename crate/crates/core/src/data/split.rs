//! Seeded holdout/train/val splitting with nested data increments.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::DataError;

/// A deterministic partition of `n` samples: a holdout block plus an ordered
/// train/val pool consumed in nested prefix increments.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitPlan {
    seed: u64,
    holdout: Vec<usize>,
    trainval_order: Vec<usize>,
    increment_fractions: Vec<f64>,
    val_fraction: f64,
}

/// Index views into one increment; borrows the plan's ordering.
#[derive(Debug, Clone, Copy)]
pub struct IncrementView<'a> {
    pub train: &'a [usize],
    pub val: &'a [usize],
    pub fraction: f64,
}

impl SplitPlan {
    pub fn new(
        n: usize,
        seed: u64,
        holdout_fraction: f64,
        val_fraction: f64,
        increment_fractions: &[f64],
    ) -> Result<Self, DataError> {
        if !(holdout_fraction > 0.0 && holdout_fraction < 1.0) {
            return Err(DataError::param(
                "holdout_fraction",
                format!("{holdout_fraction} not in (0,1)"),
            ));
        }
        if !(val_fraction > 0.0 && val_fraction < 1.0) {
            return Err(DataError::param(
                "val_fraction",
                format!("{val_fraction} not in (0,1)"),
            ));
        }
        if increment_fractions.is_empty() {
            return Err(DataError::param("increments", "empty"));
        }
        let mut prev = 0.0;
        for &f in increment_fractions {
            if f <= prev || f > 1.0 {
                return Err(DataError::param(
                    "increments",
                    format!("fractions must ascend in (0,1], got {increment_fractions:?}"),
                ));
            }
            prev = f;
        }
        if *increment_fractions.last().unwrap() != 1.0 {
            return Err(DataError::param("increments", "last fraction must be 1.0"));
        }
        let holdout_len = (holdout_fraction * n as f64).floor() as usize;
        if holdout_len == 0 || holdout_len >= n {
            return Err(DataError::param(
                "holdout_fraction",
                format!("{n} samples leave an empty holdout or pool"),
            ));
        }
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        order.shuffle(&mut rng);
        let trainval_order = order.split_off(holdout_len);
        Ok(SplitPlan {
            seed,
            holdout: order,
            trainval_order,
            increment_fractions: increment_fractions.to_vec(),
            val_fraction,
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn holdout(&self) -> &[usize] {
        &self.holdout
    }

    pub fn trainval_len(&self) -> usize {
        self.trainval_order.len()
    }

    pub fn increment_count(&self) -> usize {
        self.increment_fractions.len()
    }

    pub fn fractions(&self) -> &[f64] {
        &self.increment_fractions
    }

    /// Views for increment `k` (0-based). The increment's index set is the
    /// first `floor(fraction * pool)` entries of the shuffled pool; its last
    /// `floor(val_fraction * m)` entries form validation.
    pub fn increment(&self, k: usize) -> Result<IncrementView<'_>, DataError> {
        let fraction = *self
            .increment_fractions
            .get(k)
            .ok_or_else(|| DataError::param("increment", format!("no increment {k}")))?;
        let m = (fraction * self.trainval_order.len() as f64).floor() as usize;
        let val_len = (self.val_fraction * m as f64).floor() as usize;
        Ok(IncrementView {
            train: &self.trainval_order[..m - val_len],
            val: &self.trainval_order[m - val_len..m],
            fraction,
        })
    }
}

pub const DEFAULT_INCREMENTS: [f64; 4] = [0.25, 0.50, 0.75, 1.00];

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn plan(n: usize, seed: u64) -> SplitPlan {
        SplitPlan::new(n, seed, 0.2, 0.1, &DEFAULT_INCREMENTS).unwrap()
    }

    #[test]
    fn forced_arithmetic_at_n_1000() {
        let p = plan(1000, 7);
        assert_eq!(p.holdout().len(), 200);
        assert_eq!(p.trainval_len(), 800);
        for (k, want) in [(0usize, 200usize), (1, 400), (2, 600), (3, 800)] {
            let v = p.increment(k).unwrap();
            assert_eq!(v.train.len() + v.val.len(), want);
        }
    }

    #[test]
    fn nesting_and_leakage_freedom() {
        let p = plan(503, 99);
        let holdout: HashSet<_> = p.holdout().iter().copied().collect();
        let mut prev: Vec<usize> = Vec::new();
        for k in 0..p.increment_count() {
            let v = p.increment(k).unwrap();
            let mut all: Vec<usize> = v.train.to_vec();
            all.extend_from_slice(v.val);
            // increment k's set is a prefix of increment k+1's
            assert_eq!(&all[..prev.len()], &prev[..]);
            // train and val are disjoint and never touch holdout
            let train: HashSet<_> = v.train.iter().copied().collect();
            for i in v.val {
                assert!(!train.contains(i));
            }
            for i in &all {
                assert!(!holdout.contains(i));
            }
            prev = all;
        }
        // every index is either holdout or pool
        assert_eq!(p.holdout().len() + p.trainval_len(), 503);
    }

    #[test]
    fn same_seed_gives_identical_plan() {
        assert_eq!(plan(1000, 42), plan(1000, 42));
        assert_ne!(plan(1000, 42), plan(1000, 43));
    }

    #[test]
    fn corpus_scale_counts() {
        // pool of 352,366 as in the full-scale corpus
        let p = SplitPlan::new(391_517, 5, 0.1, 0.1, &DEFAULT_INCREMENTS).unwrap();
        assert_eq!(p.trainval_len(), 352_366);
        let v = p.increment(0).unwrap();
        let m = v.train.len() + v.val.len();
        assert!((m as i64 - 88_092).abs() <= 1, "increment size {m}");
        let val_frac = v.val.len() as f64 / m as f64;
        assert!((0.08..=0.105).contains(&val_frac), "val fraction {val_frac}");
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(SplitPlan::new(100, 0, 0.0, 0.1, &DEFAULT_INCREMENTS).is_err());
        assert!(SplitPlan::new(100, 0, 0.2, 1.0, &DEFAULT_INCREMENTS).is_err());
        assert!(SplitPlan::new(100, 0, 0.2, 0.1, &[]).is_err());
        assert!(SplitPlan::new(100, 0, 0.2, 0.1, &[0.5, 0.25, 1.0]).is_err());
        assert!(SplitPlan::new(100, 0, 0.2, 0.1, &[0.25, 0.5]).is_err());
        assert!(SplitPlan::new(100, 0, 0.2, 0.1, &[0.25, 1.0]).is_ok());
    }

    #[test]
    fn increment_out_of_range_errors() {
        let p = plan(1000, 7);
        assert!(p.increment(4).is_err());
    }
}
