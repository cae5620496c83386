//! # xiehouyu-core
//!
//! Toolkit for generating and evaluating Chinese two-part allegorical
//! sayings (歇后语): corpus handling, Pinyin romanization, a
//! Pinyin-augmented encoder–decoder transformer with a three-stage training
//! recipe, an LLM prompting harness, and an NLG metric suite.

pub mod autodiff;
pub mod corpus;
pub mod error;
pub mod pinyin;
pub mod segment;
pub mod tokenizer;

pub use error::{Error, Result};
