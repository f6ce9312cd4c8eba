//! Core library for an expert-routed multimodal toy model.
//!
//! A small generalist vision encoder, a set of frozen domain-expert
//! encoders, a linear router that decides which expert (if any) to invoke,
//! and a tiny causal language model are trained in two stages on a
//! synthetic multi-domain corpus. During instruction tuning a random
//! subset of general visual tokens is attention-masked
//! (generalist-specialist collaboration masking), pushing the model to
//! read the expert tokens. The corpus is engineered so the effect is
//! measurable: general views reveal layout but redact cell values, which
//! only the matching expert view exposes.

pub mod checkpoint;
pub mod config;
pub mod datagen;
pub mod encoders;
pub mod error;
pub mod evalkit;
pub mod fusion;
pub mod gscm;
pub mod lm;
pub mod metrics;
pub mod model;
pub mod probe;
pub mod rng;
pub mod router;
pub mod stats;
pub mod tape;
pub mod teds;
pub mod tensor;
pub mod training;

pub use error::{ChimeraError, Result};
pub use tensor::Tensor;
