//! Core algorithms for diagnosing fine-tuned text classifiers.
//!
//! Everything in this crate is pure computation over `alloc` types: corpus
//! generation and splitting, the word-level tokenizer, the quantized
//! LoRA-adapted transformer, the training loop, the evaluation protocol,
//! data-quality audits, Shapley attribution, and attention-head analysis.
//! File formats, checkpoints, and the command-line front end live in the
//! companion `phishscope` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod attention;
pub mod audit;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod explain;
pub mod model;
pub mod report;
pub mod rng;
pub mod tensor;
pub mod tokenizer;
pub mod train;
