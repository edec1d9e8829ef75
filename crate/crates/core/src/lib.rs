//! Frequency-aware RGB-event single object tracking.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`], [`autodiff`], [`gradcheck`], [`params`]: a small double
//!   precision tensor engine with reverse-mode differentiation.
//! - [`gradsuite`]: finite-difference checks of every learnable component.
//! - [`event`]: event streams, time surfaces, cropping and a synthetic
//!   sequence generator.
//! - [`spectral`]: one-sided DFT and dynamic Fourier filtering.
//! - [`wavelet`]: learnable Haar transforms and wavelet edge refinement.
//! - [`backbone`]: token embedding and the hybrid transformer stack.
//! - [`head`]: center-based box head and the composite training loss.
//! - [`model`]: the assembled tracker with crop geometry and checkpoints.
//! - [`eval`]: success/precision metrics, tracking loop, toy training.

pub mod autodiff;
pub mod backbone;
pub mod bbox;
pub mod error;
pub mod eval;
pub mod event;
pub mod gradcheck;
pub mod gradsuite;
pub mod head;
pub mod model;
pub mod params;
pub mod spectral;
pub mod tensor;
pub mod wavelet;

pub use error::{Error, Result};
pub use tensor::{ComplexTensor, Tensor};
