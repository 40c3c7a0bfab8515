//! Dual recurrent attention for grid-world visual question answering.
//!
//! Everything runs on a small define-by-run autodiff engine over dense f64
//! tensors. The crate covers the full pipeline: synthetic scene and question
//! generation, recurrent and convolutional attention units, compact bilinear
//! fusion, training with Adam, evaluation with consensus-style accuracy, and
//! ablation sweeps. All randomness flows through named ChaCha streams so
//! every run is reproducible bitwise from one seed.

pub mod ablation;
pub mod adam;
pub mod attention;
pub mod checkpoint;
pub mod data;
pub mod dataio;
pub mod error;
pub mod export;
pub mod fft;
pub mod fusion;
pub mod gradcheck;
pub mod init;
pub mod layers;
pub mod metric;
pub mod model;
pub mod params;
pub mod rng;
pub mod suite;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
