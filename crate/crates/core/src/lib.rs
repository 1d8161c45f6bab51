//! Desk-scale latent diffusion with two-pass subject-masked image-prompt
//! inference.

pub mod attention;
pub mod cli;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod io;
pub mod mask;
pub mod model;
pub mod pipeline;
pub mod sampler;
pub mod selftest;
pub mod tensor;
pub mod trainer;
pub mod unet;
pub mod weights;

pub use error::{Error, Result};
pub use tensor::Tensor;
