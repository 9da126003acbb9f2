//! Multi-task layout-aware document transformer at desk scale.
//!
//! A shared text+patch+layout transformer backbone with six task heads
//! (document classification, layout segment categorization, reading order,
//! relation extraction, segment text generation, visual QA), span-masked
//! language modeling, a mixed-dataset collective pre-training loop,
//! fine-tuning schedules, and the matching evaluation metrics. Everything
//! runs on an in-crate f64 reverse-mode autodiff engine so gradients are
//! checkable against finite differences.

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod docdata;
pub mod embeddings;
pub mod error;
pub mod finetune;
pub mod heads;
pub mod metrics;
pub mod model;
pub mod pretrain;
pub mod tensor;
pub mod tokenizer;

pub use error::{Error, Result};
