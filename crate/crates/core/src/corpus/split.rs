use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitScheme {
    KFold(usize),
    Loso,
}

/// Subject-wise cross-validation plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub scheme: SplitScheme,
    /// subject id → fold in which the subject is held out
    pub assignments: BTreeMap<String, usize>,
    /// proportion of training items kept per fold
    pub fraction: f64,
}

impl SplitPlan {
    pub fn n_folds(&self) -> usize {
        match self.scheme {
            SplitScheme::KFold(k) => k,
            SplitScheme::Loso => self.assignments.len(),
        }
    }

    pub fn eval_subjects(&self, fold: usize) -> Vec<String> {
        self.assignments
            .iter()
            .filter(|(_, &f)| f == fold)
            .map(|(s, _)| s.clone())
            .collect()
    }

    pub fn train_subjects(&self, fold: usize) -> Vec<String> {
        self.assignments
            .iter()
            .filter(|(_, &f)| f != fold)
            .map(|(s, _)| s.clone())
            .collect()
    }

    pub fn with_fraction(mut self, fraction: f64) -> Result<Self> {
        check_fraction(fraction)?;
        self.fraction = fraction;
        Ok(self)
    }
}

pub(crate) fn check_fraction(fraction: f64) -> Result<()> {
    if fraction > 0.0 && fraction <= 1.0 {
        Ok(())
    } else {
        Err(Error::param(format!("fraction must lie in (0, 1], got {fraction}")))
    }
}

/// Assigns every distinct subject to exactly one evaluation fold.
/// k-fold shuffles subjects with `seed` and deals them round-robin;
/// leave-one-subject-out gives each subject (in sorted order) its own fold.
pub fn make_split(subjects: &[String], scheme: SplitScheme, seed: u64) -> Result<SplitPlan> {
    let unique: Vec<String> = subjects.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    if unique.is_empty() {
        return Err(Error::param("no subjects to split"));
    }
    let assignments = match scheme {
        SplitScheme::KFold(k) => {
            if k < 2 {
                return Err(Error::param(format!("k-fold needs k >= 2, got {k}")));
            }
            if k > unique.len() {
                return Err(Error::param(format!(
                    "{k} folds requested for {} subjects",
                    unique.len()
                )));
            }
            let mut order = unique;
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            order.into_iter().enumerate().map(|(i, s)| (s, i % k)).collect()
        }
        SplitScheme::Loso => unique.into_iter().enumerate().map(|(i, s)| (s, i)).collect(),
    };
    Ok(SplitPlan {
        scheme,
        assignments,
        fraction: 1.0,
    })
}

/// Keeps ⌈fraction·n⌉ items sampled uniformly without replacement, in their
/// original order.
pub fn subset_fraction<T: Clone>(items: &[T], fraction: f64, seed: u64) -> Result<Vec<T>> {
    check_fraction(fraction)?;
    if fraction == 1.0 {
        return Ok(items.to_vec());
    }
    let keep = ((fraction * items.len() as f64).ceil() as usize).min(items.len());
    let mut idx: Vec<usize> = (0..items.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx.truncate(keep);
    idx.sort_unstable();
    Ok(idx.into_iter().map(|i| items[i].clone()).collect())
}
