//! Integrative few-shot classification and segmentation.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense tensors, a recording tape for reverse-mode
//!   differentiation, and a finite-difference gradient checker.
//! - [`backbone`]: a small frozen CNN that emits a three-group feature pyramid.
//! - [`hypercorrelation`]: 4D cosine correlations between query and support pyramids.
//! - [`attentive_squeeze`]: the attentive squeeze layer and its brute-force oracle.
//! - [`asnet`]: multi-level fusion and the convolutional decoder.
//! - [`ifsl`]: foreground maps, occurrence and segmentation inference, and losses.
//! - [`harness`]: synthetic shape-world data, episode sampling, and metrics.
//! - [`train`]: the model wrapper, Adam, training and evaluation loops.
//! - [`verify`]: self-check suites behind `ifsl verify`.

pub mod asnet;
pub mod attentive_squeeze;
pub mod backbone;
pub mod error;
pub mod harness;
pub mod hypercorrelation;
pub mod ifsl;
pub mod mask;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
