//! Streaming video-dialogue language modelling at toy scale: synthetic
//! annotated streams, a small causal transformer trained to stay silent on
//! frames until a response is due, a real-time inference engine and the
//! evaluation metrics that go with it.

pub mod data;
pub mod error;
pub mod eval;
pub mod infer;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
