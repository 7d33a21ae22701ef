//! Inference-optimization toolkit for toy decoder-only transformers.
//!
//! - [`hsd`]: entropy-gated draft/verifier decoding.
//! - [`rag`]: gradient-norm query routing, dense top-k retrieval and
//!   compositional attention.
//! - [`lobi`]: LoRA merging and calibration-driven per-block precision
//!   assignment.
//! - [`bench`]: the end-to-end pipeline, synthetic tasks and metrics.

pub mod bench;
pub mod error;
pub mod hsd;
pub mod lobi;
pub mod model;
pub mod quant;
pub mod rag;
pub mod tensor;

pub use error::{HolaError, Result};
pub use tensor::Tensor;
