//! Noisy self-knowledge distillation for abstractive summarization.
//!
//! A teacher encoder-decoder transformer is trained on document/summary
//! pairs; an identical student then learns from a mixture of the gold
//! summaries and the teacher's dropout-perturbed next-token distributions
//! while reading perturbed source documents.

pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod decode;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod noise;
pub mod par;
pub mod seeding;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
