//! Core of the zigan-forge few-shot glyph style-transfer toolkit.
//!
//! Everything in here is pure computation over in-memory buffers: the tensor
//! and reverse-mode autograd engine, the encoder/decoder generators and CAM
//! discriminators, the training objectives, the optimizer loop and the
//! evaluation metrics. File formats, font rasterization and the command line
//! live in the `zigan-forge` companion crate.
#![no_std]
#![deny(unsafe_code)]
extern crate alloc;

pub mod error;
pub mod evaluation;
pub mod glyph;
pub mod graph;
pub mod losses;
pub mod networks;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod training;

mod kernels;

pub use error::{Error, Result};
pub use tensor::Tensor;
