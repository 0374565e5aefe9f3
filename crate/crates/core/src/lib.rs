//! Universal ASR: a streaming chunked encoder-decoder and a full-sequence second pass that
//! rectifies its hypothesis, in one jointly trained model.

pub mod attention;
pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod features;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod scama;
pub mod streaming;
pub mod training;

pub use error::{Error, Result};
