//! Multi-class multi-task polyphonic audio event detection.
//!
//! The crate is `no_std` (it needs `alloc`) and holds everything that is pure
//! computation: a small reverse-mode autodiff engine, the power-set label
//! codec, the backbone + attention multi-task network and its multi-label
//! CRNN baseline, losses and Adam, the training loop over in-memory
//! recordings, and frame-based evaluation. Audio decoding, log-mel
//! extraction, corpus generation and file formats live in the `paed` crate.
//!
//! Axis order everywhere is `(batch, time, frequency, channel)`, row-major.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod error;
pub mod evaluation;
pub mod features;
pub mod labelspace;
pub mod model;
pub mod numerics;
pub mod training;

pub use error::{Error, Result};
pub use numerics::{NdBuffer, Precision, Real};
