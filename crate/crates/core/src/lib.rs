//! CSDN: a two-stream (shallow detail + deep semantic) convolutional network
//! for real-time segmentation of intravascular ultrasound frames.

pub mod autodiff;
pub(crate) mod codec;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod labels;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod parallel;
pub mod tensor;
pub mod train;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use labels::LabelMap;
pub use model::{count_parameters, Csdn, ForwardOptions, NetworkConfig};
pub use tensor::{DType, Scalar, Shape, Tensor};
