//! Seeded experiment runner.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dataset::check_labels;
use super::sampling::{class_counts, sample_counts, subsample, SamplePlan, SampleScope};
use crate::backend::Backend;
use crate::baselines::{
    build_calibration_prior, class_frequencies, contextual_calibrate, icl_ensemble_predict,
    icl_predict, Aggregation, EnsemblePlan, DEFAULT_PROBE,
};
use crate::datastore::{build_store, centroid_normalize, split_demo_anchor, AnchorStore, BuildOptions};
use crate::error::{Error, Result};
use crate::neighbors::{knn_predict, DistanceKind, MaskMode, Neighbor, QueryKey, DEFAULT_K};
use crate::prompting::{build_prompt, label_token_ids, LabeledExample, TaskSpec};

/// Default cap on the number of test instances per run.
pub const DEFAULT_TEST_LIMIT: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    #[default]
    Knn,
    Icl,
    IclEnsemble,
    ContextualCalibration,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::Knn,
        Method::Icl,
        Method::IclEnsemble,
        Method::ContextualCalibration,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Knn => "knn",
            Method::Icl => "icl",
            Method::IclEnsemble => "icl-ensemble",
            Method::ContextualCalibration => "contextual-calibration",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown method `{s}`")))
    }
}

/// Everything needed to reproduce a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub task: String,
    pub method: Method,
    /// Training shots per class.
    pub m: usize,
    pub seeds: Vec<u64>,
    pub k: usize,
    pub distance: DistanceKind,
    pub mask: MaskMode,
    pub centroid: bool,
    /// Demonstrations per class for kNN, set size per class for the ensemble.
    pub demo_per_class: usize,
    pub backend: String,
    pub test_limit: Option<usize>,
    pub imbalance_lambda: f64,
    pub imbalance_scope: SampleScope,
    pub aggregation: Aggregation,
    pub probe_text: String,
    /// Contextual calibration rescales toward train-set class frequencies.
    pub trainset_prior: bool,
    /// Concurrent test-instance predictions; results do not depend on it.
    pub parallelism: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            task: String::new(),
            method: Method::Knn,
            m: 16,
            seeds: vec![0, 1, 2, 3, 4],
            k: DEFAULT_K,
            distance: DistanceKind::Kl,
            mask: MaskMode::Whole,
            centroid: false,
            demo_per_class: 1,
            backend: String::new(),
            test_limit: Some(DEFAULT_TEST_LIMIT),
            imbalance_lambda: 0.5,
            imbalance_scope: SampleScope::TrainOnly,
            aggregation: Aggregation::MeanProb,
            probe_text: DEFAULT_PROBE.to_string(),
            trainset_prior: false,
            parallelism: 1,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidConfig("k must be at least 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig("at least one seed is required".into()));
        }
        if self.m == 0 || self.demo_per_class == 0 {
            return Err(Error::InvalidConfig("m and demo_per_class must be positive".into()));
        }
        Ok(())
    }
}

/// One test-instance decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub seed: u64,
    pub instance_id: String,
    pub gold: String,
    pub predicted: String,
    pub correct: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub neighbors: Option<Vec<Neighbor>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vote_counts: Option<BTreeMap<String, usize>>,
    /// Per-class scores for the ICL-style methods, in label-space order.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_scores: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub accuracy: f64,
    pub n_test: usize,
    /// Neighbors actually used, `min(k, store size)`; kNN only.
    pub k_effective: Option<usize>,
    /// kNN had no anchors for this seed and plain ICL was used instead.
    pub fallback_to_icl: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub config: ExperimentConfig,
    pub seeds: Vec<SeedResult>,
    pub mean: f64,
    /// Population standard deviation over seeds.
    pub std: f64,
    pub audit: Vec<PredictionRecord>,
}

impl RunResult {
    pub fn per_seed_accuracy(&self) -> Vec<f64> {
        self.seeds.iter().map(|s| s.accuracy).collect()
    }
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn map_ordered<T, R, F>(items: &[T], pool: Option<&rayon::ThreadPool>, f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> Result<R> + Sync + Send,
{
    match pool {
        Some(pool) => pool.install(|| items.par_iter().map(&f).collect()),
        None => items.iter().map(f).collect(),
    }
}

/// Test instances for one seed: the first `test_limit` in pool order, or an
/// imbalanced seeded sample when the ratio applies to the test side.
fn test_set(config: &ExperimentConfig, task: &TaskSpec, pool: &[LabeledExample], seed: u64) -> Result<Vec<LabeledExample>> {
    let total = config.test_limit.unwrap_or(pool.len()).min(pool.len());
    if config.imbalance_scope.test() && config.imbalance_lambda != 0.5 {
        let counts = class_counts(task.label_space.len(), total, config.imbalance_lambda)?;
        return sample_counts(pool, &task.label_space, &counts, seed);
    }
    Ok(pool[..total].to_vec())
}

struct SeedOutcome {
    result: SeedResult,
    records: Vec<PredictionRecord>,
}

struct Runner<'a, B: ?Sized> {
    config: &'a ExperimentConfig,
    task: &'a TaskSpec,
    backend: &'a B,
    label_ids: Vec<u32>,
    pool: Option<rayon::ThreadPool>,
}

impl<B: Backend + ?Sized> Runner<'_, B> {
    fn record(&self, seed: u64, ex: &LabeledExample, predicted: String) -> PredictionRecord {
        PredictionRecord {
            seed,
            instance_id: ex.id.clone(),
            correct: predicted == ex.label,
            gold: ex.label.clone(),
            predicted,
            neighbors: None,
            vote_counts: None,
            label_scores: None,
        }
    }

    fn icl(&self, seed: u64, demos: &[LabeledExample], test: &[LabeledExample]) -> Result<Vec<PredictionRecord>> {
        map_ordered(test, self.pool.as_ref(), |ex| {
            let prompt = build_prompt(self.task, demos, ex, self.backend)?;
            let (d, _) = self.backend.query_distribution(&prompt, false)?;
            let idx = icl_predict(&d, &self.label_ids)?;
            let mut rec = self.record(seed, ex, self.task.label_space[idx].clone());
            rec.label_scores = Some(self.label_ids.iter().map(|&i| f64::from(d.probs()[i as usize])).collect());
            Ok(rec)
        })
    }

    fn knn(&self, seed: u64, store: &AnchorStore, k: usize, test: &[LabeledExample]) -> Result<Vec<PredictionRecord>> {
        let demos = &store.metadata().demos;
        let want_hidden = self.config.distance == DistanceKind::L2;
        map_ordered(test, self.pool.as_ref(), |ex| {
            let prompt = build_prompt(self.task, demos, ex, self.backend)?;
            let (d, h) = self.backend.query_distribution(&prompt, want_hidden)?;
            let query = match (&h, want_hidden) {
                (Some(h), true) => QueryKey::Hidden(h),
                _ => QueryKey::Distribution(&d),
            };
            let r = knn_predict(store, query, k, self.config.distance, self.config.mask, &self.label_ids)
                .map_err(|e| e.context(format!("instance `{}`", ex.id)))?;
            let mut rec = self.record(seed, ex, r.prediction);
            rec.neighbors = Some(r.neighbors);
            rec.vote_counts = Some(r.vote_counts);
            Ok(rec)
        })
    }

    fn predict(
        &self,
        seed: u64,
        train: &[LabeledExample],
        store: Option<&AnchorStore>,
        test: &[LabeledExample],
    ) -> Result<SeedOutcome> {
        let c = self.config;
        let task = self.task;
        let demos = match store {
            Some(s) if train.is_empty() => s.metadata().demos.as_slice(),
            _ => train,
        };
        let mut k_effective = None;
        let records = match c.method {
            Method::Knn => {
                let built;
                let store = match store {
                    Some(s) => s,
                    None => {
                        let split = split_demo_anchor(train, c.demo_per_class, seed)?;
                        if split.anchors.is_empty() {
                            let records = self.icl(seed, &split.demos, test)?;
                            return Ok(self.outcome(seed, records, None, true));
                        }
                        let opts = BuildOptions {
                            want_hidden: c.distance == DistanceKind::L2,
                            parallelism: c.parallelism,
                            seed,
                        };
                        built = build_store(task, &split, self.backend, opts)?;
                        &built
                    }
                };
                let normalized;
                let store = if c.centroid {
                    normalized = centroid_normalize(store)?;
                    &normalized
                } else {
                    store
                };
                let k = c.k.min(store.len());
                k_effective = Some(k);
                self.knn(seed, store, k, test)?
            }
            Method::Icl => self.icl(seed, demos, test)?,
            Method::IclEnsemble => {
                let plan = EnsemblePlan::partition(demos, &task.label_space, c.demo_per_class, seed, c.aggregation)?;
                map_ordered(test, self.pool.as_ref(), |ex| {
                    let out = icl_ensemble_predict(task, &plan, ex, self.backend, &self.label_ids)?;
                    let mut rec = self.record(seed, ex, task.label_space[out.prediction].clone());
                    rec.label_scores = Some(out.scores);
                    Ok(rec)
                })?
            }
            Method::ContextualCalibration => {
                let mut prior = build_calibration_prior(task, demos, self.backend, &c.probe_text, &self.label_ids)?;
                if c.trainset_prior {
                    prior = prior.with_target(class_frequencies(demos, &task.label_space))?;
                }
                map_ordered(test, self.pool.as_ref(), |ex| {
                    let prompt = build_prompt(task, demos, ex, self.backend)?;
                    let (d, _) = self.backend.query_distribution(&prompt, false)?;
                    let idx = contextual_calibrate(&d, &prior, &self.label_ids)?;
                    let mut rec = self.record(seed, ex, task.label_space[idx].clone());
                    rec.label_scores = Some(
                        self.label_ids
                            .iter()
                            .zip(prior.prior())
                            .map(|(&i, q)| f64::from(d.probs()[i as usize]) / q)
                            .collect(),
                    );
                    Ok(rec)
                })?
            }
        };
        Ok(self.outcome(seed, records, k_effective, false))
    }

    fn outcome(&self, seed: u64, records: Vec<PredictionRecord>, k_effective: Option<usize>, fallback_to_icl: bool) -> SeedOutcome {
        let n_test = records.len();
        let correct = records.iter().filter(|r| r.correct).count();
        let accuracy = if n_test == 0 { 0.0 } else { correct as f64 / n_test as f64 };
        SeedOutcome {
            result: SeedResult {
                seed,
                accuracy,
                n_test,
                k_effective,
                fallback_to_icl,
            },
            records,
        }
    }

    fn run_seed(&self, seed: u64, train_pool: &[LabeledExample], test_pool: &[LabeledExample]) -> Result<SeedOutcome> {
        let c = self.config;
        let plan = SamplePlan {
            m: c.m,
            seed,
            imbalance_lambda: if c.imbalance_scope.train() { c.imbalance_lambda } else { 0.5 },
            scope: c.imbalance_scope,
        };
        let train = subsample(train_pool, &self.task.label_space, &plan)?;
        let test = test_set(c, self.task, test_pool, seed)?;
        self.predict(seed, &train, None, &test)
    }
}

fn runner<'a, B: Backend + ?Sized>(config: &'a ExperimentConfig, task: &'a TaskSpec, backend: &'a B) -> Result<Runner<'a, B>> {
    config.validate()?;
    let pool = if config.parallelism > 1 {
        Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(config.parallelism)
                .build()
                .map_err(|e| Error::InvalidConfig(e.to_string()))?,
        )
    } else {
        None
    };
    Ok(Runner {
        config,
        task,
        backend,
        label_ids: label_token_ids(task, backend)?,
        pool,
    })
}

/// Predict every instance of `test` once, without subsampling.
///
/// kNN uses `store` when given and otherwise splits `train` and builds one.
/// The other methods use `train` as their demonstrations, falling back to the
/// store's demonstrations when `train` is empty.
pub fn predict<B: Backend + ?Sized>(
    config: &ExperimentConfig,
    task: &TaskSpec,
    train: &[LabeledExample],
    store: Option<&AnchorStore>,
    test: &[LabeledExample],
    backend: &B,
) -> Result<(SeedResult, Vec<PredictionRecord>)> {
    check_labels(task, train)?;
    check_labels(task, test)?;
    let seed = config.seeds.first().copied().unwrap_or(0);
    let out = runner(config, task, backend)?.predict(seed, train, store, test)?;
    Ok((out.result, out.records))
}

/// Run every seed of `config` and aggregate accuracy statistics.
pub fn run_experiment<B: Backend + ?Sized>(
    config: &ExperimentConfig,
    task: &TaskSpec,
    train_pool: &[LabeledExample],
    test_pool: &[LabeledExample],
    backend: &B,
) -> Result<RunResult> {
    check_labels(task, train_pool)?;
    check_labels(task, test_pool)?;
    if test_pool.is_empty() {
        return Err(Error::InsufficientData("the test pool is empty".into()));
    }
    let runner = runner(config, task, backend)?;
    let mut seeds = Vec::with_capacity(config.seeds.len());
    let mut audit = Vec::new();
    for &seed in &config.seeds {
        let out = runner
            .run_seed(seed, train_pool, test_pool)
            .map_err(|e| e.context(format!("{} m={} seed {seed}", config.method, config.m)))?;
        seeds.push(out.result);
        audit.extend(out.records);
    }
    let (mean, std) = mean_std(&seeds.iter().map(|s| s.accuracy).collect::<Vec<_>>());
    Ok(RunResult {
        config: config.clone(),
        seeds,
        mean,
        std,
        audit,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn population_std() {
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert_eq!(s, 1.0);
        assert_eq!(mean_std(&[0.5, 0.5, 0.5]), (0.5, 0.0));
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{m}\""));
        }
        assert!("noisy-channel".parse::<Method>().is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = ExperimentConfig::default();
        assert!(c.validate().is_ok());
        c.k = 0;
        assert!(c.validate().is_err());
        let c = ExperimentConfig {
            seeds: vec![],
            ..ExperimentConfig::default()
        };
        assert!(c.validate().is_err());
    }
}
