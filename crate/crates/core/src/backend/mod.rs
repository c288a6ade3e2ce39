//! Language-model backends returning full next-token distributions.
//!
//! Two implementations share the [`Backend`] trait: [`HttpBackend`] talks to
//! the model server, [`MockBackend`] is a seeded pure function of its config
//! and the prompt text. Select one from a URI with [`connect`].

mod http;
mod mock;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prompting::{Prompt, Tokenizer};

pub use http::{HttpBackend, RetryPolicy, F32LE_CONTENT_TYPE};
pub use mock::{MockBackend, MockConfig};

/// Environment variable holding the default backend URI.
pub const BACKEND_ENV: &str = "KNNP_BACKEND_URL";

/// Tolerance on the total mass of a distribution.
pub const MASS_TOLERANCE: f64 = 1e-4;

/// A probability vector over the whole vocabulary, stored as float32.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f32>", into = "Vec<f32>")]
pub struct VocabDistribution {
    probs: Vec<f32>,
}

impl VocabDistribution {
    /// Validate and wrap a probability vector.
    pub fn new(probs: Vec<f32>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidDistribution("empty vector".into()));
        }
        let mut sum = 0.0f64;
        for (i, &p) in probs.iter().enumerate() {
            if !p.is_finite() || p < 0.0 {
                return Err(Error::InvalidDistribution(format!("entry {i} is {p}")));
            }
            sum += f64::from(p);
        }
        if (sum - 1.0).abs() > MASS_TOLERANCE {
            return Err(Error::InvalidDistribution(format!("mass {sum} is not 1")));
        }
        Ok(Self { probs })
    }

    /// Normalize non-negative weights, accumulating in f64.
    pub fn from_weights(weights: &[f64]) -> Result<Self> {
        let sum: f64 = weights.iter().sum();
        if !(sum.is_finite() && sum > 0.0) || weights.iter().any(|w| *w < 0.0) {
            return Err(Error::InvalidDistribution(format!(
                "cannot normalize weights with total {sum}"
            )));
        }
        Self::new(weights.iter().map(|w| (w / sum) as f32).collect())
    }

    pub fn probs(&self) -> &[f32] {
        &self.probs
    }

    pub fn vocab_size(&self) -> usize {
        self.probs.len()
    }

    pub fn into_inner(self) -> Vec<f32> {
        self.probs
    }
}

impl TryFrom<Vec<f32>> for VocabDistribution {
    type Error = Error;

    fn try_from(probs: Vec<f32>) -> Result<Self> {
        Self::new(probs)
    }
}

impl From<VocabDistribution> for Vec<f32> {
    fn from(d: VocabDistribution) -> Self {
        d.probs
    }
}

/// Final-position hidden state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f32>", into = "Vec<f32>")]
pub struct HiddenRepr {
    values: Vec<f32>,
}

impl HiddenRepr {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidDistribution(
                "hidden state must be non-empty and finite".into(),
            ));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

impl TryFrom<Vec<f32>> for HiddenRepr {
    type Error = Error;

    fn try_from(values: Vec<f32>) -> Result<Self> {
        Self::new(values)
    }
}

impl From<HiddenRepr> for Vec<f32> {
    fn from(h: HiddenRepr) -> Self {
        h.values
    }
}

/// Static model metadata.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendInfo {
    pub model_id: String,
    pub vocab_size: usize,
    pub hidden_size: usize,
    pub context_limit: usize,
}

impl BackendInfo {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.hidden_size == 0 || self.context_limit == 0 {
            return Err(Error::InvalidConfig(format!(
                "backend sizes must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

/// A language model exposing its full next-token distribution.
///
/// Implementations must be deterministic: identical prompts give identical
/// vectors regardless of call order or thread interleaving.
pub trait Backend: Tokenizer + Send + Sync {
    fn info(&self) -> &BackendInfo;

    /// Distribution at the final position, plus the hidden state if asked for.
    fn query_distribution(
        &self,
        prompt: &Prompt,
        want_hidden: bool,
    ) -> Result<(VocabDistribution, Option<HiddenRepr>)>;
}

impl<B: Backend + ?Sized> Tokenizer for Arc<B> {
    fn count_tokens(&self, text: &str) -> Result<usize> {
        (**self).count_tokens(text)
    }

    fn tokenize(&self, text: &str) -> Result<Vec<u32>> {
        (**self).tokenize(text)
    }
}

impl<B: Backend + ?Sized> Backend for Arc<B> {
    fn info(&self) -> &BackendInfo {
        (**self).info()
    }

    fn query_distribution(
        &self,
        prompt: &Prompt,
        want_hidden: bool,
    ) -> Result<(VocabDistribution, Option<HiddenRepr>)> {
        (**self).query_distribution(prompt, want_hidden)
    }
}

pub(crate) fn ensure_fits(info: &BackendInfo, prompt: &Prompt) -> Result<()> {
    if prompt.token_count > info.context_limit {
        return Err(Error::ContextOverflow {
            tokens: prompt.token_count,
            limit: info.context_limit,
        });
    }
    Ok(())
}

/// Boundary check applied to every vector a backend hands out.
pub(crate) fn check_response(
    info: &BackendInfo,
    probs: Vec<f32>,
    hidden: Option<Vec<f32>>,
) -> Result<(VocabDistribution, Option<HiddenRepr>)> {
    if probs.len() != info.vocab_size {
        return Err(Error::ShapeMismatch {
            expected: info.vocab_size,
            actual: probs.len(),
        });
    }
    let dist = VocabDistribution::new(probs)?;
    let hidden = match hidden {
        Some(h) if h.len() != info.hidden_size => {
            return Err(Error::ShapeMismatch {
                expected: info.hidden_size,
                actual: h.len(),
            })
        }
        Some(h) => Some(HiddenRepr::new(h)?),
        None => None,
    };
    Ok((dist, hidden))
}

/// Open a backend from a URI: `http(s)://host:port` or `mock://<config.json>`.
pub fn connect(uri: &str) -> Result<Arc<dyn Backend>> {
    if let Some(path) = uri.strip_prefix("mock://") {
        return Ok(Arc::new(MockBackend::from_path(path)?));
    }
    if uri.starts_with("http://") || uri.starts_with("https://") {
        return Ok(Arc::new(HttpBackend::connect(uri)?));
    }
    Err(Error::InvalidConfig(format!(
        "unsupported backend URI `{uri}` (expected http(s):// or mock://)"
    )))
}

/// [`connect`] using `KNNP_BACKEND_URL`.
pub fn connect_default() -> Result<Arc<dyn Backend>> {
    let uri = std::env::var(BACKEND_ENV)
        .map_err(|_| Error::InvalidConfig(format!("{BACKEND_ENV} is not set")))?;
    connect(&uri)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn distribution_invariants() {
        assert!(VocabDistribution::new(vec![0.25, 0.75]).is_ok());
        assert!(VocabDistribution::new(vec![0.5, 0.6]).is_err());
        assert!(VocabDistribution::new(vec![-0.1, 1.1]).is_err());
        assert!(VocabDistribution::new(vec![f32::NAN, 1.0]).is_err());
        assert!(VocabDistribution::new(vec![]).is_err());
        let d = VocabDistribution::from_weights(&[1.0, 3.0]).unwrap();
        assert_eq!(d.probs(), &[0.25, 0.75]);
    }

    #[test]
    fn json_deserialization_validates() {
        let ok: VocabDistribution = serde_json::from_str("[0.5,0.5]").unwrap();
        assert_eq!(ok.vocab_size(), 2);
        assert!(serde_json::from_str::<VocabDistribution>("[0.5,0.9]").is_err());
    }

    #[test]
    fn boundary_rejects_wrong_shapes() {
        let info = BackendInfo {
            model_id: "m".into(),
            vocab_size: 3,
            hidden_size: 2,
            context_limit: 8,
        };
        assert!(matches!(
            check_response(&info, vec![0.5, 0.5], None),
            Err(Error::ShapeMismatch { expected: 3, actual: 2 })
        ));
        assert!(matches!(
            check_response(&info, vec![0.2, 0.3, 0.5], Some(vec![1.0])),
            Err(Error::ShapeMismatch { expected: 2, actual: 1 })
        ));
        assert!(check_response(&info, vec![0.2, 0.3, 0.5], Some(vec![1.0, 2.0])).is_ok());
    }

    #[test]
    fn unknown_scheme() {
        assert!(matches!(connect("ftp://x"), Err(Error::InvalidConfig(_))));
    }
}
