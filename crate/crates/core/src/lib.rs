//! Wavelet-augmented variational autoencoder.
//!
//! The encoder runs a spatial convolutional branch alongside a frequency
//! branch: the input is split into four Haar sub-bands, each band passes
//! through the same convolutional encoder, and the encoded bands are
//! recombined by the inverse transform before being added to the spatial
//! features. Everything runs on a small tape-based autodiff engine.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod container;
mod conv;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod training;
pub mod wavelet;

pub use autodiff::{Activation, OpKind, Tape, Var};
pub use error::{Error, Result};
pub use model::{Architecture, ModelConfig, Vae};
pub use tensor::{Float, Tensor};
pub use wavelet::{dwt2, idwt2, SubBandSet};
