//! Seeded m-shot subsampling, balanced or with a controlled class ratio.

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prompting::LabeledExample;

const SUBSAMPLE_STREAM: u64 = 0;

/// Which pools an imbalance ratio applies to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SampleScope {
    #[default]
    TrainOnly,
    TestOnly,
    Both,
}

impl SampleScope {
    pub fn train(self) -> bool {
        matches!(self, SampleScope::TrainOnly | SampleScope::Both)
    }

    pub fn test(self) -> bool {
        matches!(self, SampleScope::TestOnly | SampleScope::Both)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplePlan {
    /// Shots per class.
    pub m: usize,
    pub seed: u64,
    /// Fraction of the sample taken from the last class of the label space
    /// (the positive class for binary tasks); 0.5 is balanced.
    pub imbalance_lambda: f64,
    pub scope: SampleScope,
}

impl SamplePlan {
    pub fn balanced(m: usize, seed: u64) -> Self {
        Self {
            m,
            seed,
            imbalance_lambda: 0.5,
            scope: SampleScope::TrainOnly,
        }
    }

    pub fn is_balanced(&self) -> bool {
        self.imbalance_lambda == 0.5
    }
}

/// Number of examples of the λ-class in a sample of `total`, rounding half up.
pub fn minority_count(total: usize, lambda: f64) -> usize {
    ((total as f64 * lambda) + 0.5).floor() as usize
}

/// Per-class counts for a sample of `total` with ratio `lambda` on the last class.
pub fn class_counts(n_classes: usize, total: usize, lambda: f64) -> Result<Vec<usize>> {
    if !(lambda > 0.0 && lambda <= 1.0) {
        return Err(Error::InvalidConfig(format!("imbalance lambda {lambda} is outside (0, 1]")));
    }
    if lambda == 0.5 || n_classes != 2 {
        if lambda != 0.5 {
            return Err(Error::InvalidConfig(
                "imbalance ratios are only defined for binary tasks".into(),
            ));
        }
        let base = total / n_classes;
        let extra = total % n_classes;
        return Ok((0..n_classes).map(|c| base + usize::from(c < extra)).collect());
    }
    let minority = minority_count(total, lambda).min(total);
    Ok(vec![total - minority, minority])
}

/// Draw `counts[c]` examples of each class without replacement, then shuffle.
pub fn sample_counts(
    pool: &[LabeledExample],
    label_space: &[String],
    counts: &[usize],
    seed: u64,
) -> Result<Vec<LabeledExample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(SUBSAMPLE_STREAM);
    let mut picked: Vec<&LabeledExample> = Vec::with_capacity(counts.iter().sum());
    for (label, &want) in label_space.iter().zip(counts) {
        let members: Vec<&LabeledExample> = pool.iter().filter(|e| &e.label == label).collect();
        if members.len() < want {
            return Err(Error::InsufficientData(format!(
                "class `{label}` has {} examples, {want} requested",
                members.len()
            )));
        }
        picked.extend(index::sample(&mut rng, members.len(), want).iter().map(|j| members[j]));
    }
    picked.shuffle(&mut rng);
    Ok(picked.into_iter().cloned().collect())
}

/// Balanced: `m` per class. Imbalanced (binary): `2m` total with
/// `round(2m * lambda)` from the last class.
pub fn subsample(
    pool: &[LabeledExample],
    label_space: &[String],
    plan: &SamplePlan,
) -> Result<Vec<LabeledExample>> {
    if plan.m == 0 {
        return Err(Error::InsufficientData("m must be at least 1".into()));
    }
    let counts = class_counts(label_space.len(), plan.m * label_space.len(), plan.imbalance_lambda)?;
    sample_counts(pool, label_space, &counts, plan.seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels() -> Vec<String> {
        vec!["negative".into(), "positive".into()]
    }

    fn pool(n: usize) -> Vec<LabeledExample> {
        (0..2 * n)
            .map(|i| LabeledExample::new(format!("e{i}"), "t", labels()[i % 2].clone()))
            .collect()
    }

    fn count(s: &[LabeledExample], l: &str) -> usize {
        s.iter().filter(|e| e.label == l).count()
    }

    #[test]
    fn balanced_sample() {
        let s = subsample(&pool(50), &labels(), &SamplePlan::balanced(8, 1)).unwrap();
        assert_eq!((count(&s, "negative"), count(&s, "positive")), (8, 8));
        assert_eq!(s, subsample(&pool(50), &labels(), &SamplePlan::balanced(8, 1)).unwrap());
        assert_ne!(s, subsample(&pool(50), &labels(), &SamplePlan::balanced(8, 2)).unwrap());
    }

    #[test]
    fn imbalanced_sample() {
        let plan = SamplePlan {
            imbalance_lambda: 0.25,
            ..SamplePlan::balanced(32, 0)
        };
        let s = subsample(&pool(100), &labels(), &plan).unwrap();
        assert_eq!(count(&s, "positive"), 16);
        assert_eq!(count(&s, "negative"), 48);
    }

    #[test]
    fn rounding_half_up() {
        assert_eq!(minority_count(64, 0.125), 8);
        assert_eq!(minority_count(4, 0.125), 1);
        assert_eq!(minority_count(10, 0.25), 3);
        assert_eq!(minority_count(6, 0.25), 2);
    }

    #[test]
    fn errors() {
        assert!(matches!(
            subsample(&pool(3), &labels(), &SamplePlan::balanced(4, 0)),
            Err(Error::InsufficientData(_))
        ));
        let bad = SamplePlan {
            imbalance_lambda: 0.0,
            ..SamplePlan::balanced(2, 0)
        };
        assert!(subsample(&pool(3), &labels(), &bad).is_err());
        let three: Vec<String> = vec!["a".into(), "b".into(), "c".into()];
        let skew = SamplePlan {
            imbalance_lambda: 0.2,
            ..SamplePlan::balanced(2, 0)
        };
        assert!(subsample(&pool(3), &three, &skew).is_err());
    }
}
