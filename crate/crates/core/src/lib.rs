//! SegResMamba: a 3D segmentation network mixing convolutions with
//! tri-oriented selective state-space (Mamba) layers, together with the small
//! autodiff engine it runs on, a synthetic-data training harness, a static
//! cost analyzer and the binary file formats used by the CLI.

pub mod config;
pub mod cost;
pub mod counter;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod model;
pub mod nn;
pub mod parallel;
pub mod pipeline;
pub mod ssm;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{no_grad, Tensor};
