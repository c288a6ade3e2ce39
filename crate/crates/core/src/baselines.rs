//! Comparison methods: plain in-context learning, ICL ensembles over disjoint
//! demonstration sets, and contextual calibration with a content-free probe.

use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backend::{Backend, VocabDistribution};
use crate::error::{Error, Result};
use crate::neighbors::mask_to_labels;
use crate::prompting::{build_prompt, LabeledExample, TaskSpec};

/// Floor for calibration prior entries.
pub const PRIOR_FLOOR: f64 = 1e-12;

/// Default content-free probe text.
pub const DEFAULT_PROBE: &str = "N/A";

const ENSEMBLE_STREAM: u64 = 3;

fn label_probs(d: &VocabDistribution, label_ids: &[u32]) -> Result<Vec<f64>> {
    label_ids
        .iter()
        .map(|&id| {
            d.probs()
                .get(id as usize)
                .map(|&p| f64::from(p))
                .ok_or(Error::ShapeMismatch {
                    expected: d.vocab_size(),
                    actual: id as usize + 1,
                })
        })
        .collect()
}

/// Index of the largest score; the first one wins ties.
pub(crate) fn argmax_first(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, s) in scores.iter().enumerate() {
        if *s > scores[best] {
            best = i;
        }
    }
    best
}

/// Class index whose label word is most probable.
pub fn icl_predict(d: &VocabDistribution, label_ids: &[u32]) -> Result<usize> {
    Ok(argmax_first(&label_probs(d, label_ids)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    /// Average the renormalized label-word distributions.
    #[default]
    MeanProb,
    /// One vote per prompt; ties go to the earlier class.
    MajorityVote,
}

/// Disjoint demonstration sets, one prompt each.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnsemblePlan {
    demo_sets: Vec<Vec<LabeledExample>>,
    pub aggregation: Aggregation,
}

impl EnsemblePlan {
    pub fn new(demo_sets: Vec<Vec<LabeledExample>>, aggregation: Aggregation) -> Result<Self> {
        if demo_sets.is_empty() {
            return Err(Error::EmptyPlan);
        }
        let mut seen = HashSet::new();
        for ex in demo_sets.iter().flatten() {
            if !seen.insert(ex.id.as_str()) {
                return Err(Error::DuplicateId(ex.id.clone()));
            }
        }
        Ok(Self {
            demo_sets,
            aggregation,
        })
    }

    /// Partition `train` into as many sets of `shots_per_class` per class as
    /// the smallest class allows. Leftovers are dropped.
    pub fn partition(
        train: &[LabeledExample],
        label_space: &[String],
        shots_per_class: usize,
        seed: u64,
        aggregation: Aggregation,
    ) -> Result<Self> {
        if shots_per_class == 0 {
            return Err(Error::EmptyPlan);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(ENSEMBLE_STREAM);
        let mut by_class: Vec<Vec<&LabeledExample>> = label_space
            .iter()
            .map(|l| train.iter().filter(|e| &e.label == l).collect())
            .collect();
        for members in &mut by_class {
            members.shuffle(&mut rng);
        }
        let n_sets = by_class.iter().map(Vec::len).min().unwrap_or(0) / shots_per_class;
        let mut sets = Vec::with_capacity(n_sets);
        for j in 0..n_sets {
            let mut set: Vec<LabeledExample> = by_class
                .iter()
                .flat_map(|m| m[j * shots_per_class..(j + 1) * shots_per_class].iter())
                .map(|e| (*e).clone())
                .collect();
            set.shuffle(&mut rng);
            sets.push(set);
        }
        Self::new(sets, aggregation)
    }

    pub fn demo_sets(&self) -> &[Vec<LabeledExample>] {
        &self.demo_sets
    }

    pub fn len(&self) -> usize {
        self.demo_sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.demo_sets.is_empty()
    }
}

/// Ensemble decision plus the aggregated per-class scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleOutcome {
    pub prediction: usize,
    pub scores: Vec<f64>,
}

/// Combine already-computed member distributions.
pub fn aggregate_ensemble(
    members: &[VocabDistribution],
    label_ids: &[u32],
    aggregation: Aggregation,
) -> Result<EnsembleOutcome> {
    if members.is_empty() {
        return Err(Error::EmptyPlan);
    }
    let mut scores = vec![0.0f64; label_ids.len()];
    match aggregation {
        Aggregation::MeanProb => {
            for d in members {
                let masked = mask_to_labels(d, label_ids)?;
                for (s, &p) in scores.iter_mut().zip(masked.probs()) {
                    *s += f64::from(p);
                }
            }
            let n = members.len() as f64;
            scores.iter_mut().for_each(|s| *s /= n);
        }
        Aggregation::MajorityVote => {
            for d in members {
                scores[icl_predict(d, label_ids)?] += 1.0;
            }
        }
    }
    Ok(EnsembleOutcome {
        prediction: argmax_first(&scores),
        scores,
    })
}

/// One backend query per demonstration set, then aggregate.
pub fn icl_ensemble_predict<B: Backend + ?Sized>(
    task: &TaskSpec,
    plan: &EnsemblePlan,
    query: &LabeledExample,
    backend: &B,
    label_ids: &[u32],
) -> Result<EnsembleOutcome> {
    let members = plan
        .demo_sets
        .iter()
        .map(|demos| {
            let prompt = build_prompt(task, demos, query, backend)?;
            Ok(backend.query_distribution(&prompt, false)?.0)
        })
        .collect::<Result<Vec<_>>>()?;
    aggregate_ensemble(&members, label_ids, plan.aggregation)
}

/// Label-word probabilities measured on a content-free probe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationPrior {
    prior: Vec<f64>,
    pub probe_text: String,
    /// Optional target class distribution multiplied back in after rescaling.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    target: Option<Vec<f64>>,
}

impl CalibrationPrior {
    pub fn new(prior: Vec<f64>, probe_text: impl Into<String>) -> Self {
        Self {
            prior: prior
                .into_iter()
                .map(|p| if p.is_finite() { p.max(PRIOR_FLOOR) } else { PRIOR_FLOOR })
                .collect(),
            probe_text: probe_text.into(),
            target: None,
        }
    }

    /// Rescale toward a non-uniform class distribution (e.g. train-set frequencies).
    pub fn with_target(mut self, target: Vec<f64>) -> Result<Self> {
        if target.len() != self.prior.len() || target.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
            return Err(Error::InvalidConfig(
                "target distribution must be non-negative with one entry per class".into(),
            ));
        }
        self.target = Some(target);
        Ok(self)
    }

    pub fn prior(&self) -> &[f64] {
        &self.prior
    }
}

/// Argmax of `p(label word) / prior`, optionally times the target distribution.
pub fn contextual_calibrate(
    d: &VocabDistribution,
    prior: &CalibrationPrior,
    label_ids: &[u32],
) -> Result<usize> {
    let probs = label_probs(d, label_ids)?;
    if probs.len() != prior.prior.len() {
        return Err(Error::ShapeMismatch {
            expected: prior.prior.len(),
            actual: probs.len(),
        });
    }
    let scores: Vec<f64> = probs
        .iter()
        .zip(&prior.prior)
        .enumerate()
        .map(|(i, (p, q))| {
            let t = prior.target.as_ref().map_or(1.0, |t| t[i]);
            p / q * t
        })
        .collect();
    Ok(argmax_first(&scores))
}

/// Query the backend with the demo prefix and a content-free example.
pub fn build_calibration_prior<B: Backend + ?Sized>(
    task: &TaskSpec,
    demos: &[LabeledExample],
    backend: &B,
    probe_text: &str,
    label_ids: &[u32],
) -> Result<CalibrationPrior> {
    let mut probe = LabeledExample::new("content-free", probe_text, task.label_space[0].clone());
    if task.uses_text_pair() {
        probe.text_pair = Some(probe_text.to_string());
    }
    let prompt = build_prompt(task, demos, &probe, backend)?;
    let (d, _) = backend.query_distribution(&prompt, false)?;
    Ok(CalibrationPrior::new(label_probs(&d, label_ids)?, probe_text))
}

/// Empirical class frequencies in label-space order.
pub fn class_frequencies(examples: &[LabeledExample], label_space: &[String]) -> Vec<f64> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for e in examples {
        *counts.entry(e.label.as_str()).or_default() += 1;
    }
    let n = examples.len().max(1) as f64;
    label_space
        .iter()
        .map(|l| counts.get(l.as_str()).copied().unwrap_or(0) as f64 / n)
        .collect()
}
