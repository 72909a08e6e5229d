//! Strip-convolution building blocks, a decoupled oriented-detection head,
//! rotated-box geometry and detection evaluation.

pub mod diagnostics;
pub mod dota;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod head;
pub mod image;
pub mod nn;
pub mod strip;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
