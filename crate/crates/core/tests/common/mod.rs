#![allow(dead_code)]

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use knn_prompting::backend::{Backend, BackendInfo, HiddenRepr, VocabDistribution};
use knn_prompting::prompting::{Prompt, Tokenizer};
use knn_prompting::Result;

/// Counts `query_distribution` calls on the wrapped backend.
pub struct Counting<B> {
    pub inner: B,
    calls: AtomicUsize,
}

impl<B> Counting<B> {
    pub fn new(inner: B) -> Self {
        Self {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn reset(&self) {
        self.calls.store(0, Ordering::SeqCst);
    }
}

impl<B: Tokenizer> Tokenizer for Counting<B> {
    fn count_tokens(&self, text: &str) -> Result<usize> {
        self.inner.count_tokens(text)
    }

    fn tokenize(&self, text: &str) -> Result<Vec<u32>> {
        self.inner.tokenize(text)
    }
}

impl<B: Backend> Backend for Counting<B> {
    fn info(&self) -> &BackendInfo {
        self.inner.info()
    }

    fn query_distribution(&self, prompt: &Prompt, want_hidden: bool) -> Result<(VocabDistribution, Option<HiddenRepr>)> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.query_distribution(prompt, want_hidden)
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Flat-Dirichlet sample.
pub fn random_dist(rng: &mut ChaCha8Rng, v: usize) -> VocabDistribution {
    let w: Vec<f64> = (0..v).map(|_| -rng.random::<f64>().max(1e-300).ln()).collect();
    VocabDistribution::from_weights(&w).unwrap()
}
