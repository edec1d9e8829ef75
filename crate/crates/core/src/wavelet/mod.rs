//! Learnable single-level Haar wavelets along the token axis and the
//! event-token refinement block built on them.

mod dwf;
mod haar;
mod wer;

pub use dwf::{DwfConfig, DwfParams};
pub use haar::{dwt, idwt, WaveletKernel, WaveletState};
pub use wer::{WerBlock, WerConfig};
