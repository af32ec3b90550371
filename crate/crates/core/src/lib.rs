//! Layout-aware OCR compression.
//!
//! An OCR encoder embeds words with their 2D boxes; the OCR-Q compresses the
//! result into a fixed number of query vectors. The crate covers the
//! synthetic corpus and span masking, the three pretraining objectives, the
//! training loop with checkpoints, and the inference path that assembles
//! downstream language-model inputs and accounts their cost.

pub mod corpus;
pub mod encoder;
pub mod error;
pub mod integration;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod ocrq;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
