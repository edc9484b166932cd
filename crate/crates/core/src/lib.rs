//! Multi-task W-shaped 3D convolutional network: shared encoder, twin
//! decoders for reconstruction and segmentation, a pathology classification
//! head and a multi-scale outcome prediction branch, trained end to end with
//! a constrained weighted loss. Includes a synthetic phantom generator,
//! training/evaluation harness and Grad-CAM explanations.

pub mod checkpoint;
pub mod error;
pub mod explain;
pub mod kernels;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod par;
pub mod phantom;
pub mod scalar;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod v3d;

#[cfg(test)]
pub(crate) mod test_oracles;

pub use error::Error;
pub use scalar::Scalar;
pub use tape::{Activation, Tape, TensorId};
pub use tensor::Tensor;
