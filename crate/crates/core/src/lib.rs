//! Referring-expression grounding toolkit.
//!
//! * Evaluation: strict ground-truth/prediction ingestion, IoU matching
//!   (greedy and exhaustive), instance- and image-level accuracy/F1, Pr@t,
//!   N-acc, scale-stratified accuracy and count metrics.
//! * A small reverse-mode autodiff engine over `f64` tensors.
//! * A count-aware detection decoder: number prediction head, count-indexed
//!   number queries, and number cross-attention, with two-stage training.
//! * A seeded synthetic benchmark generator for end-to-end experiments.

pub mod count;
pub mod domain;
pub mod error;
pub mod evaluate;
pub mod exec;
pub mod geometry;
pub mod io;
pub mod matching;
pub mod metrics;
pub mod ngdino;
pub mod stats;
pub mod synth;
pub mod tensor;
pub mod toy;

pub use error::{Error, Result};
