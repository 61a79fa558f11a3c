//! Dual-stream text/image transformer for multimodal knowledge-graph
//! completion, relation extraction and named-entity recognition.

pub mod autograd;
pub mod data;
pub mod encoders;
pub mod error;
pub mod m_encoder;
pub mod model;
pub mod numerics;
pub mod task_heads;
pub mod training_eval;

pub use error::{Error, Result};
