//! Blocking HTTP client for the model server.
//!
//! Endpoints: `GET /v1/info`, `POST /v1/distribution`, `POST /v1/count_tokens`
//! and `POST /v1/tokenize`. Distributions come back either as JSON or, when
//! the server honours `Accept: application/x-f32le`, as a raw little-endian
//! float32 body.

use std::thread;
use std::time::Duration;

use log::warn;
use reqwest::blocking::{Client, Response};
use reqwest::header::{ACCEPT, CONTENT_TYPE};
use reqwest::StatusCode;
use serde::{Deserialize, Serialize};

use super::{check_response, ensure_fits, Backend, BackendInfo, HiddenRepr, VocabDistribution};
use crate::error::{Error, Result};
use crate::prompting::{Prompt, Tokenizer};

/// Content type of the raw float32 response body.
pub const F32LE_CONTENT_TYPE: &str = "application/x-f32le";

/// Retry schedule for transport failures and 5xx responses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub initial_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            initial_backoff: Duration::from_millis(200),
        }
    }
}

impl RetryPolicy {
    fn run<T>(&self, what: &str, mut f: impl FnMut() -> Result<T>) -> Result<T> {
        let mut backoff = self.initial_backoff;
        let mut attempt = 0;
        loop {
            match f() {
                Err(e) if e.is_retryable() && attempt < self.max_retries => {
                    attempt += 1;
                    warn!("{what}: {e}; retry {attempt}/{} in {backoff:?}", self.max_retries);
                    thread::sleep(backoff);
                    backoff *= 2;
                }
                other => return other,
            }
        }
    }
}

#[derive(Debug, Deserialize)]
struct InfoBody {
    model_id: String,
    vocab_size: usize,
    hidden_size: usize,
    context_limit: usize,
    #[serde(default)]
    vocab_coverage: Option<f64>,
}

#[derive(Serialize)]
struct DistributionRequest<'a> {
    prompt: &'a str,
    return_hidden: bool,
}

#[derive(Deserialize)]
struct DistributionBody {
    probs: Vec<f32>,
    #[serde(default)]
    hidden: Option<Vec<f32>>,
}

#[derive(Serialize)]
struct TextRequest<'a> {
    text: &'a str,
}

#[derive(Deserialize)]
struct CountBody {
    count: usize,
}

#[derive(Deserialize)]
struct TokenizeBody {
    ids: Vec<u32>,
}

/// Client for a running model server.
#[derive(Debug, Clone)]
pub struct HttpBackend {
    base: String,
    client: Client,
    info: BackendInfo,
    retry: RetryPolicy,
    binary: bool,
}

fn transport(e: reqwest::Error) -> Error {
    Error::BackendUnavailable(e.to_string())
}

/// Map a non-success status to an error; 5xx is retryable, 4xx is not.
fn check_status(resp: Response, what: &str) -> Result<Response> {
    let status = resp.status();
    if status.is_success() {
        return Ok(resp);
    }
    let body = resp.text().unwrap_or_default();
    if status.is_server_error() {
        Err(Error::BackendUnavailable(format!("{what}: HTTP {status}: {body}")))
    } else {
        Err(Error::InvalidConfig(format!("{what}: HTTP {status}: {body}")))
    }
}

fn decode_f32le(bytes: &[u8]) -> Result<Vec<f32>> {
    if !bytes.len().is_multiple_of(4) {
        return Err(Error::ShapeMismatch {
            expected: bytes.len() / 4 * 4,
            actual: bytes.len(),
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

impl HttpBackend {
    /// Connect with the default retry policy and perform the info handshake.
    pub fn connect(base: &str) -> Result<Self> {
        Self::connect_with(base, RetryPolicy::default())
    }

    pub fn connect_with(base: &str, retry: RetryPolicy) -> Result<Self> {
        let client = Client::builder()
            .timeout(Duration::from_secs(300))
            .build()
            .map_err(transport)?;
        let base = base.trim_end_matches('/').to_string();
        let url = format!("{base}/v1/info");
        let body: InfoBody = retry.run("GET /v1/info", || {
            let resp = client.get(&url).send().map_err(transport)?;
            check_status(resp, "GET /v1/info")?.json().map_err(transport)
        })?;
        if let Some(cov) = body.vocab_coverage {
            if cov < 1.0 {
                return Err(Error::InvalidConfig(format!(
                    "server exposes {:.1}% of the vocabulary; the full distribution is required",
                    cov * 100.0
                )));
            }
        }
        let info = BackendInfo {
            model_id: body.model_id,
            vocab_size: body.vocab_size,
            hidden_size: body.hidden_size,
            context_limit: body.context_limit,
        };
        info.validate()?;
        Ok(Self {
            base,
            client,
            info,
            retry,
            binary: true,
        })
    }

    /// Ask for the raw float32 body when no hidden state is needed (default on).
    pub fn prefer_binary(mut self, yes: bool) -> Self {
        self.binary = yes;
        self
    }

    fn post_json<Req: Serialize + ?Sized>(&self, path: &str, req: &Req) -> Result<Response> {
        let url = format!("{}{path}", self.base);
        let what = format!("POST {path}");
        self.retry.run(&what, || {
            let resp = self.client.post(&url).json(req).send().map_err(transport)?;
            check_status(resp, &what)
        })
    }
}

impl Tokenizer for HttpBackend {
    fn count_tokens(&self, text: &str) -> Result<usize> {
        let body: CountBody = self
            .post_json("/v1/count_tokens", &TextRequest { text })?
            .json()
            .map_err(transport)?;
        Ok(body.count)
    }

    fn tokenize(&self, text: &str) -> Result<Vec<u32>> {
        let body: TokenizeBody = self
            .post_json("/v1/tokenize", &TextRequest { text })
            .map_err(|e| {
                e.context("tokenize failed; pin label-word token_ids in the task file instead")
            })?
            .json()
            .map_err(transport)?;
        Ok(body.ids)
    }
}

impl Backend for HttpBackend {
    fn info(&self) -> &BackendInfo {
        &self.info
    }

    fn query_distribution(
        &self,
        prompt: &Prompt,
        want_hidden: bool,
    ) -> Result<(VocabDistribution, Option<HiddenRepr>)> {
        ensure_fits(&self.info, prompt)?;
        let url = format!("{}/v1/distribution", self.base);
        let req = DistributionRequest {
            prompt: &prompt.text,
            return_hidden: want_hidden,
        };
        let accept = if self.binary && !want_hidden {
            "application/x-f32le, application/json;q=0.5"
        } else {
            "application/json"
        };
        let (probs, hidden) = self.retry.run("POST /v1/distribution", || {
            let resp = self
                .client
                .post(&url)
                .header(ACCEPT, accept)
                .json(&req)
                .send()
                .map_err(transport)?;
            if resp.status() == StatusCode::PAYLOAD_TOO_LARGE {
                return Err(Error::ContextOverflow {
                    tokens: prompt.token_count,
                    limit: self.info.context_limit,
                });
            }
            let resp = check_status(resp, "POST /v1/distribution")?;
            let binary = resp
                .headers()
                .get(CONTENT_TYPE)
                .and_then(|v| v.to_str().ok())
                .is_some_and(|v| v.starts_with(F32LE_CONTENT_TYPE));
            if binary {
                let bytes = resp.bytes().map_err(transport)?;
                Ok((decode_f32le(&bytes)?, None))
            } else {
                let body: DistributionBody = resp.json().map_err(transport)?;
                Ok((body.probs, body.hidden))
            }
        })?;
        if want_hidden && hidden.is_none() {
            return Err(Error::InvalidConfig(
                "server did not return a hidden state".into(),
            ));
        }
        check_response(&self.info, probs, hidden)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decodes_little_endian_floats() {
        let bytes: Vec<u8> = [0.25f32, 0.75].iter().flat_map(|f| f.to_le_bytes()).collect();
        assert_eq!(decode_f32le(&bytes).unwrap(), vec![0.25, 0.75]);
        assert!(decode_f32le(&bytes[..5]).is_err());
    }

    #[test]
    fn retry_policy_stops_on_final_errors() {
        let policy = RetryPolicy {
            max_retries: 3,
            initial_backoff: Duration::from_millis(1),
        };
        let mut calls = 0;
        let r: Result<()> = policy.run("t", || {
            calls += 1;
            Err(Error::ZeroMass)
        });
        assert!(r.is_err());
        assert_eq!(calls, 1);

        let mut calls = 0;
        let r: Result<()> = policy.run("t", || {
            calls += 1;
            Err(Error::BackendUnavailable("down".into()))
        });
        assert!(r.is_err());
        assert_eq!(calls, 4);
    }
}
