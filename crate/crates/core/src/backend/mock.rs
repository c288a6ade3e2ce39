//! Seeded stand-in for a language model.
//!
//! The mock reads the latent class of the query from the last class-marker
//! token after the demonstration prefix (fixtures put the marker in the
//! example text) and returns
//!
//! ```text
//! normalize((rho_c + b) * exp(noise * z(prompt) + prefix_noise * y(prefix)))
//! ```
//!
//! where `z` is a standard-normal vector keyed by the whole prompt text and
//! `y` one keyed by the demonstration prefix, i.e. the text before the last
//! occurrence of the prompt's first token. `y` models how a given
//! demonstration set tilts every output in the same way. Prompts without a
//! marker (content-free probes) use the mean prototype.
//!
//! The tokenizer is a whitespace splitter. It is adequate for budget math
//! but is not faithful to any real LLM tokenizer.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{check_response, ensure_fits, Backend, BackendInfo, HiddenRepr, VocabDistribution};
use crate::error::{Error, Result};
use crate::prompting::{Prompt, Tokenizer};

fn default_model_id() -> String {
    "mock".to_string()
}

fn default_hidden_size() -> usize {
    16
}

fn default_context_limit() -> usize {
    1024
}

/// Parameters of the mock model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockConfig {
    #[serde(default = "default_model_id")]
    pub model_id: String,
    pub vocab_size: usize,
    #[serde(default = "default_hidden_size")]
    pub hidden_size: usize,
    #[serde(default = "default_context_limit")]
    pub context_limit: usize,
    /// One prototype weight vector per latent class, normalized on load.
    pub prototypes: Vec<Vec<f64>>,
    /// Marker token identifying each latent class in prompt text.
    pub class_markers: Vec<String>,
    /// Added to every prototype before normalization; empty means zero.
    #[serde(default)]
    pub bias: Vec<f64>,
    /// Log-normal noise scale keyed by the full prompt.
    #[serde(default)]
    pub noise: f64,
    /// Log-normal noise scale keyed by the demonstration prefix.
    #[serde(default)]
    pub prefix_noise: f64,
    #[serde(default)]
    pub seed: u64,
    /// Fixed token ids for selected words; other words hash into the vocabulary.
    #[serde(default)]
    pub vocab: BTreeMap<String, u32>,
}

impl MockConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        let v = self.vocab_size;
        if v == 0 || self.hidden_size == 0 || self.context_limit == 0 {
            return bad("vocab_size, hidden_size and context_limit must be positive".into());
        }
        if self.prototypes.is_empty() {
            return bad("at least one prototype is required".into());
        }
        if self.class_markers.len() != self.prototypes.len() {
            return bad(format!(
                "{} class markers for {} prototypes",
                self.class_markers.len(),
                self.prototypes.len()
            ));
        }
        for (i, m) in self.class_markers.iter().enumerate() {
            if m.is_empty() || m.contains(char::is_whitespace) {
                return bad(format!("class marker {i} must be a single non-empty token"));
            }
            if self.class_markers[..i].contains(m) {
                return bad(format!("class marker `{m}` is repeated"));
            }
        }
        if !self.bias.is_empty() && self.bias.len() != v {
            return bad(format!("bias has length {}, vocab_size is {v}", self.bias.len()));
        }
        if self.bias.iter().any(|b| !b.is_finite()) {
            return bad("bias must be finite".into());
        }
        for (c, proto) in self.prototypes.iter().enumerate() {
            if proto.len() != v {
                return bad(format!("prototype {c} has length {}, vocab_size is {v}", proto.len()));
            }
            if proto.iter().any(|p| !p.is_finite() || *p < 0.0) {
                return bad(format!("prototype {c} has a negative or non-finite entry"));
            }
            let sum: f64 = proto.iter().sum();
            if sum <= 0.0 {
                return bad(format!("prototype {c} has zero mass"));
            }
            let weights: Vec<f64> = proto
                .iter()
                .enumerate()
                .map(|(i, p)| p / sum + self.bias_at(i))
                .collect();
            if weights.iter().any(|w| *w < 0.0) || weights.iter().sum::<f64>() <= 0.0 {
                return bad(format!("prototype {c} plus bias has negative entries or zero mass"));
            }
        }
        if !(self.noise.is_finite() && self.noise >= 0.0)
            || !(self.prefix_noise.is_finite() && self.prefix_noise >= 0.0)
        {
            return bad("noise scales must be finite and non-negative".into());
        }
        if let Some((w, id)) = self.vocab.iter().find(|(_, id)| **id as usize >= v) {
            return bad(format!("vocab entry `{w}` -> {id} is outside the vocabulary"));
        }
        Ok(())
    }

    fn bias_at(&self, i: usize) -> f64 {
        self.bias.get(i).copied().unwrap_or(0.0)
    }
}

/// Deterministic mock backend.
#[derive(Debug, Clone)]
pub struct MockBackend {
    config: MockConfig,
    info: BackendInfo,
    /// Normalized prototypes with the bias already added.
    biased: Vec<Vec<f64>>,
    /// Mean prototype with bias, used for prompts without a class marker.
    content_free: Vec<f64>,
    markers: HashMap<String, usize>,
    /// Row-major hidden_size x vocab_size projection of log-probabilities.
    projection: Vec<f32>,
}

impl MockBackend {
    pub fn new(config: MockConfig) -> Result<Self> {
        config.validate()?;
        let v = config.vocab_size;
        let normalized: Vec<Vec<f64>> = config
            .prototypes
            .iter()
            .map(|p| {
                let s: f64 = p.iter().sum();
                p.iter().map(|x| x / s).collect()
            })
            .collect();
        let with_bias = |p: &[f64]| -> Vec<f64> {
            p.iter().enumerate().map(|(i, x)| x + config.bias_at(i)).collect()
        };
        let biased = normalized.iter().map(|p| with_bias(p)).collect();
        let n = normalized.len() as f64;
        let mean: Vec<f64> = (0..v)
            .map(|i| normalized.iter().map(|p| p[i]).sum::<f64>() / n)
            .collect();
        let content_free = with_bias(&mean);
        let markers = config
            .class_markers
            .iter()
            .enumerate()
            .map(|(i, m)| (m.clone(), i))
            .collect();
        let mut rng = keyed_rng(config.seed, "projection", "");
        let scale = 1.0 / (v as f64).sqrt();
        let projection = (0..config.hidden_size * v)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                (z * scale) as f32
            })
            .collect();
        let info = BackendInfo {
            model_id: config.model_id.clone(),
            vocab_size: v,
            hidden_size: config.hidden_size,
            context_limit: config.context_limit,
        };
        Ok(Self {
            config,
            info,
            biased,
            content_free,
            markers,
            projection,
        })
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())?;
        let config: MockConfig = serde_json::from_str(&text)?;
        Self::new(config).map_err(|e| e.context(path.as_ref().display().to_string()))
    }

    pub fn config(&self) -> &MockConfig {
        &self.config
    }

    /// Latent class of the query: the last class marker after the
    /// demonstration prefix.
    pub fn latent_class(&self, text: &str) -> Option<usize> {
        text[demo_prefix(text).len()..]
            .split_whitespace()
            .filter_map(|tok| self.markers.get(tok).copied())
            .next_back()
    }

    /// Unnormalized output weights for a prompt, in f64.
    fn weights(&self, text: &str) -> Vec<f64> {
        let base = match self.latent_class(text) {
            Some(c) => &self.biased[c],
            None => &self.content_free,
        };
        let sigma = self.config.noise;
        let tau = self.config.prefix_noise;
        let mut weights = base.clone();
        if sigma > 0.0 {
            let mut rng = keyed_rng(self.config.seed, "prompt", text);
            for w in &mut weights {
                let z: f64 = StandardNormal.sample(&mut rng);
                *w *= (sigma * z).exp();
            }
        }
        if tau > 0.0 {
            let mut rng = keyed_rng(self.config.seed, "prefix", demo_prefix(text));
            for w in &mut weights {
                let y: f64 = StandardNormal.sample(&mut rng);
                *w *= (tau * y).exp();
            }
        }
        weights
    }

    fn hidden_for(&self, probs: &[f32]) -> Vec<f32> {
        let v = self.config.vocab_size;
        let logp: Vec<f64> = probs.iter().map(|&p| (f64::from(p) + 1e-12).ln()).collect();
        self.projection
            .chunks_exact(v)
            .map(|row| {
                row.iter()
                    .zip(&logp)
                    .map(|(w, l)| f64::from(*w) * l)
                    .sum::<f64>() as f32
            })
            .collect()
    }
}

/// Text before the last occurrence of the prompt's first token.
fn demo_prefix(text: &str) -> &str {
    let trimmed = text.trim_start();
    let lead = text.len() - trimmed.len();
    match trimmed.split_whitespace().next() {
        Some(first) => {
            let pos = text.rfind(first).unwrap_or(lead);
            &text[..pos]
        }
        None => "",
    }
}

fn keyed_rng(seed: u64, domain: &str, text: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(domain.as_bytes());
    h.update([0u8]);
    h.update(text.as_bytes());
    let digest: [u8; 32] = h.finalize().into();
    ChaCha8Rng::from_seed(digest)
}

fn hashed_token_id(word: &str, vocab_size: usize) -> u32 {
    let digest = Sha256::digest(word.as_bytes());
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    (u64::from_le_bytes(bytes) % vocab_size as u64) as u32
}

impl Tokenizer for MockBackend {
    fn count_tokens(&self, text: &str) -> Result<usize> {
        Ok(text.split_whitespace().count())
    }

    fn tokenize(&self, text: &str) -> Result<Vec<u32>> {
        Ok(text
            .split_whitespace()
            .map(|w| {
                self.config
                    .vocab
                    .get(w)
                    .copied()
                    .unwrap_or_else(|| hashed_token_id(w, self.config.vocab_size))
            })
            .collect())
    }
}

impl Backend for MockBackend {
    fn info(&self) -> &BackendInfo {
        &self.info
    }

    fn query_distribution(
        &self,
        prompt: &Prompt,
        want_hidden: bool,
    ) -> Result<(VocabDistribution, Option<HiddenRepr>)> {
        ensure_fits(&self.info, prompt)?;
        let dist = VocabDistribution::from_weights(&self.weights(&prompt.text))?;
        let hidden = want_hidden.then(|| self.hidden_for(dist.probs()));
        check_response(&self.info, dist.into_inner(), hidden)
    }
}
