//! Class-aware regularization for semantic segmentation features, together
//! with the decoder pieces it is paired with: synced axial attention and
//! enhanced joint pyramid upsampling. Everything runs on a small tape-based
//! reverse-mode autodiff engine over `f64` tensors.

pub mod autodiff;
pub mod car;
pub mod centers;
pub mod ejpu;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod saa;
pub mod tensor;

pub use autodiff::{Graph, Grads, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
