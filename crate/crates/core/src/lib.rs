//! Low-latency online audio-visual captioning.
//!
//! A bi-modal Transformer captioner paired with a convolutional end detector
//! that decides, from a growing prefix of audio and visual features, when
//! enough of an event has been seen to emit its caption.

pub mod compute;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod streaming;
pub mod training;

pub use error::{Error, Result};
