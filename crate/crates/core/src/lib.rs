//! MorphFC token-mixing backbone: chunked fully-connected layers for images
//! and video, assembled into hierarchical classification models, with a
//! minimal reverse-mode autodiff engine, brute-force reference
//! implementations, MAC/parameter accounting, and a small training harness.

pub mod checkpoint;
pub mod error;
pub mod forward;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod oracle;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Dtype, Scalar, Tape, Tensor, Var};
