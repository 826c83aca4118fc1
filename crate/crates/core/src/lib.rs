//! Temporal video grounding by direct boundary regression over position-embedded
//! query and segment features.
//!
//! The crate holds the full model stack on top of a small reverse-mode
//! differentiation engine: query and video encoders, query attention with
//! Hadamard fusion, local and global context, the regression head, losses,
//! evaluation, data handling and the training loop.

pub mod attention;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod context;
pub mod data;
pub mod error;
pub mod eval;
pub mod head;
pub mod loss;
pub mod model;
pub mod params;
pub mod report;
pub mod tensor;
pub mod text;
pub mod train;
pub mod video;

pub use error::{Error, Result};
pub use tensor::Tensor;
