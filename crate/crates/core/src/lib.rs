//! Model extraction against image-to-image translation GANs, at desk scale.
//!
//! The crate bundles everything the extraction pipeline needs: a small
//! define-by-run autodiff engine, the orthonormal Haar transform and its
//! high-frequency regulariser, toy Pix2Pix/CycleGAN backbones, Adam with
//! sharpness-aware (SAM) GAN steps, a procedural victim oracle with a query
//! budget, and evaluation metrics.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod conv;
pub mod error;
pub mod experiment;
pub mod gan;
pub mod io;
pub mod linalg;
pub mod metrics;
pub mod sam;
pub mod tensor;
pub mod train;
pub mod victim;
pub mod wavelet;

pub use error::{Error, Result};
pub use tensor::Tensor;
