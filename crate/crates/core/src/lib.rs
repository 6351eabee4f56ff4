//! Invertible multi-boundary consistency distillation on toy 2-D diffusion
//! models.
//!
//! The crate trains a small ε-prediction teacher on Gaussian-mixture data,
//! distills its classifier-free guidance into a guidance-embedded network,
//! and then distills forward (encoding) and reverse (decoding) consistency
//! students over a multi-boundary timestep plan. Everything runs in `f64`
//! on the CPU with a purpose-built reverse-mode autodiff.

pub mod autodiff;
pub mod boundaries;
pub mod checkpoint;
pub mod data;
pub mod denoiser;
pub mod distill;
pub mod editing;
pub mod error;
pub mod gradcheck;
pub mod inversion;
pub mod optim;
pub mod oracle;
pub mod rng;
pub mod schedule;
pub mod solver;
pub mod stats;
pub mod teacher;
pub mod tensor;
pub mod train;

pub use error::{IcdError, Result};
pub use tensor::Tensor;
