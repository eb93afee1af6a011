//! Black-box dataset inference for instruction-tuned language models.
//!
//! Given a victim instruction dataset, paired reference models (each pair a
//! non-trained model and the same model fine-tuned on the dataset) and text
//! access to a suspect model, decide whether the suspect was trained on the
//! dataset. The procedure selects *tainted* samples, those whose responses
//! move sharply toward the oracle output when a reference is fine-tuned,
//! then checks whether the suspect answers those samples more like the
//! fine-tuned references than the raw ones.

pub mod audit;
pub mod baseline;
pub mod config;
pub mod corpus;
pub mod digest;
pub mod error;
pub mod gateway;
pub mod inference;
pub mod similarity;
pub mod simkit;
pub mod store;
pub mod studies;
pub mod tokenize;

pub use error::{Error, Result};
