//! Deterministic simulator for federated prompt learning against a frozen
//! surrogate vision-language encoder.
//!
//! Clients hold few-shot image embeddings for disjoint class sets. Each
//! method learns either a fixed block of prompt vectors or a cross-attention
//! generator that turns a client's class-token embeddings into prompts; a
//! server averages client updates every round. Evaluation scores seen
//! (base) and held-out (new) classes plus withheld datasets.

pub mod encoders;
pub mod error;
pub mod eval;
pub mod fedcore;
pub mod models;
pub mod partition;
pub mod rng;
pub mod runner;
pub mod tensor;

pub use error::{Error, Result};
