//! Confidence-aware adversarial fine-tuning for zero-shot dual-encoder
//! classifiers, on a small f64 autodiff core.

pub mod attacks;
pub mod cli;
pub mod config;
mod container;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod tensor;
pub mod training;

pub use error::{Error, FormatError, Result};

pub(crate) fn hex(bytes: &[u8]) -> String {
    use std::fmt::Write;
    bytes.iter().fold(String::with_capacity(bytes.len() * 2), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}
