//! Frequency-aware vignetting removal.
//!
//! An image is split by a Laplacian pyramid; a transformer branch with
//! cascaded fusion transformers and layer attention corrects the
//! low-frequency residual, while activation-free gated blocks refine each
//! high-frequency band during reconstruction.
//!
//! All numerics are generic over [`Scalar`] (`f32` or `f64`); the aliases at
//! the crate root pin the common choices.

pub mod acem;
pub mod autograd;
pub mod checkpoint;
pub mod daft;
pub mod data;
pub mod error;
pub mod harness;
pub mod hcam;
pub mod image;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod nn;
pub mod params;
pub mod pyramid;
pub mod resample;
pub mod scalar;
pub mod tensor;

pub use autograd::{Grads, Tape, Var};
pub use error::{Error, Result};
pub use image::Image;
pub use params::{ParamStore, Bound};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Image32 = Image<f32>;
pub type Image64 = Image<f64>;
pub type DeVigNet32 = model::DeVigNet<f32>;
pub type DeVigNet64 = model::DeVigNet<f64>;
