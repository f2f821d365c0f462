//! Reference kernels for 3D multi-scale deformable self-attention, the
//! encoder stack built on it, and a miniature hybrid CNN-transformer
//! segmentation network. Every operation carries an explicit analytic
//! backward pass that is verified against central finite differences.

pub mod bench;
pub mod conv;
pub mod detrans;
pub mod dmsa;
pub mod error;
pub mod gradcheck;
pub mod pe;
pub mod rng;
pub mod sample;
pub mod scalar;
pub mod seq;
pub mod tensor;
pub mod toy;
pub mod vanilla;
pub mod vten;

pub use error::{Error, Result};
pub use scalar::{Dtype, Scalar};
