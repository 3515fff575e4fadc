//! Deformable image registration with Coordinate Translators.
//!
//! The crate is organized bottom-up:
//!
//! - [`autodiff`]: a small tape-based reverse-mode AD engine over dense tensors.
//! - [`gradsuite`]: finite-difference checks of every differentiable operation.
//! - [`grid`]: sampling grids (identity, composition, displacements, Jacobians).
//! - [`coordtrans`]: positional encoding and the Coordinate Translator.
//! - [`encoder`]: the Siamese convolutional feature pyramid.
//! - [`model`]: the coarse-to-fine im2grid network and its training loss.
//!
//! Metrics, synthetic data, file formats and training live in the sibling
//! crates `im2grid-metrics`, `im2grid-synth`, `im2grid-volume-io` and
//! `im2grid-train`.
//!
//! All numerics are generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below name the `f32` instantiations used by training and the file formats.

pub mod autodiff;
pub mod coordtrans;
pub mod encoder;
pub mod error;
pub mod gradsuite;
pub mod grid;
pub mod model;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Graph32 = autodiff::Graph<f32>;
pub type Graph64 = autodiff::Graph<f64>;
pub type Grid32 = grid::SamplingGrid<f32>;
pub type Grid64 = grid::SamplingGrid<f64>;
pub type Model32 = model::Im2Grid<f32>;
pub type Model64 = model::Im2Grid<f64>;
