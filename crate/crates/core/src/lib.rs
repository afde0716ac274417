//! Training-free geometric image editing on a desk-scale diffusion backbone.

pub mod attention;
pub mod backbone;
pub mod bench;
pub mod error;
pub mod geometry;
pub mod imaging;
pub mod instruction;
pub mod metrics;
pub mod pipeline;
pub mod sampler;
pub mod tensor;

pub use error::{Error, Result};
pub use imaging::{ImageBuffer, MaskBuffer};
