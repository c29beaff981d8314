//! Tabular data synthesis with language models: rows are serialized as
//! `"<feature> is <value>"` clauses, a backend model is pre-trained and
//! fine-tuned on those sentences, new rows are sampled under several
//! prompting strategies, and a backbone predictor labels and evaluates them.

pub mod backbone;
pub mod codec;
pub mod error;
pub mod fixtures;
pub mod fsutil;
pub mod lm;
pub mod metrics;
pub mod rng;
pub mod sampler;
pub mod scenarios;
pub mod table;

pub use error::{Error, Result};
