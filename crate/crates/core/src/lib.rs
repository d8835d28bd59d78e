//! Probabilistic component-wise spatial canonicalization.
//!
//! A localization network regresses bounded Gaussian posteriors over
//! rotation, log-scale and shear from image tokens; sampled transforms are
//! inverted and used to rectify the input before classification. Everything
//! differentiable runs on the small reverse-mode engine in [`autodiff`].

pub mod affine;
pub mod autodiff;
pub mod databench;
pub mod error;
pub mod image_io;
pub mod localization;
pub mod nn;
pub mod objective;
pub mod pipeline;
pub mod tensor;
pub mod verify;
pub mod warp;

pub use error::{Error, Result};
pub use tensor::Tensor;
