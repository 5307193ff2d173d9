//! Host side of zigan: font rasterization, style corpora, PNG and CSV
//! output, checkpoints, evaluation reports and the `zigan` command line.
//! The numerical work lives in `zigan-core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod error;
pub mod imageio;
pub mod losslog;
pub mod pipeline;
pub mod render;

pub use error::{ForgeError, Result};
