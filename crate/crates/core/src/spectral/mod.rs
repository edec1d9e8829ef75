//! Token-axis Fourier transforms and dynamic Fourier filtering.

pub mod dff;
pub mod dft;

pub use dff::{DffConfig, SpectralFilterBank};
pub use dft::{dft_1d, idft_1d};
