//! kNN Prompting: gradient-free adaptation of a language model by
//! nearest-neighbor voting over cached next-token distributions.
//!
//! The pipeline has two passes. The *meta test* renders each labeled anchor
//! behind a fixed demonstration prefix, queries the model once and caches the
//! full distribution as a key ([`datastore`]). The *formal test* renders a
//! test instance the same way and votes among the anchors whose keys are
//! closest in KL divergence ([`neighbors`]). [`baselines`] holds the methods
//! it is compared against and [`harness`] runs seeded experiments.

pub mod backend;
pub mod baselines;
pub mod datastore;
pub mod error;
pub mod harness;
pub mod neighbors;
pub mod prompting;

pub use error::{Error, Result};
