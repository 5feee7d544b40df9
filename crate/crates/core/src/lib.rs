//! Desk-scale fusion-in-decoder reader with per-passage rationale
//! classification and rationale-guided decoding, on a synthetic
//! multi-passage QA task. Everything runs on CPU with a small tape-based
//! autodiff engine; runs are deterministic given a seed.

pub mod analysis;
pub mod data;
pub mod error;
pub mod eval;
pub mod graph;
pub mod model;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
