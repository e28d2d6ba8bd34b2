//! Runtime for a low frame-rate neural audio codec: HiFi-GAN style encoder
//! and decoder, finite scalar quantization, a packed token bitstream and
//! causal streaming inference.

pub mod bitstream;
pub mod codec;
mod bytes;
pub mod config;
pub mod dsp;
pub mod error;
pub mod fsq;
mod gemm;
pub mod generator;
pub mod metrics;
pub mod streaming;
pub mod wav;
pub mod weights;

pub use error::{Error, Result};
