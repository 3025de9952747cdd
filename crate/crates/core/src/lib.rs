//! Scalable face codec.
//!
//! A base layer carries a compact learned face feature that can be decoded
//! on its own for verification; an optional enhancement layer carries the
//! residual between the source image and a texture generated from that
//! feature. Everything numeric is generic over [`Scalar`] (`f32` or `f64`);
//! the aliases below pin the precision used by the trained models.

pub mod autodiff;
pub mod base_extractor;
pub mod bitstream;
pub mod coding;
pub mod enhancement_codec;
pub mod error;
pub mod eval;
pub mod feature_codec;
pub mod image_io;
pub mod nn;
pub mod pipeline;
pub mod prob;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod texture_generator;
pub mod train;
pub mod transforms;

pub use error::{DecodeError, Error, Result};
pub use scalar::Scalar;
pub use tensor::{ImageTensor, Tensor};

pub type Image32 = ImageTensor<f32>;
pub type Image64 = ImageTensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
