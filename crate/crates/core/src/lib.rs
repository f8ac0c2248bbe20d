//! Autofocus convolutional networks for volumetric segmentation.
//!
//! An autofocus layer runs one shared 3D kernel at several dilation rates in
//! parallel and fuses the branch outputs per voxel with softmax attention
//! predicted by a small convolutional head. This crate provides the tensor
//! and reverse-mode autodiff machinery, the layer zoo (dilated conv, ASPP,
//! autofocus, batch norm, residual), the Basic/AFN-n/ASPP model family with
//! receptive-field and parameter accounting, soft dice training, and a
//! synthetic phantom generator for end-to-end checks.

pub mod autodiff;
mod codec;
pub mod conv;
pub mod data;
pub mod error;
pub mod exec;
pub mod layers;
pub mod loss;
pub mod models;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use exec::Exec;
pub use tensor::Tensor;
