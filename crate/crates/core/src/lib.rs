//! Feature-space denoising reconstruction for unified multi-class defect
//! detection.
//!
//! Features extracted from normal images are projected to tokens, corrupted
//! by a stochastically selected perturbation, and reconstructed by an
//! encoder-decoder whose stacks fuse every layer output with the stack
//! input before a parameter-free standardization. At test time the
//! per-location L2 distance between extracted and reconstructed features is
//! the anomaly score.

pub mod alloc;
pub mod checkpoint;
pub mod codec;
pub mod data;
pub mod error;
pub mod frontend;
pub mod kernels;
pub mod ops;
pub mod perturb;
pub mod rng;
pub mod scoring;
pub mod tape;
pub mod tensor;
pub mod tokens;
pub mod train;

pub use error::{Error, Result};
pub use tape::{Gradients, NodeId, Tape};
pub use tensor::{DType, Element, Tensor};
