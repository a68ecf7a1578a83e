//! Block-reusing CTC/attention speech Transformer with adapter modules.

pub mod analysis;
pub mod autodiff;
pub mod corpus;
pub mod ctc;
pub mod decode;
pub mod error;
pub mod features;
pub mod gradcheck;
pub mod model;
pub mod presets;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
