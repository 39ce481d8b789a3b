//! Convolutional networks whose first layer synthesizes its kernels from
//! learnable Gabor parameters `(ω, θ, ψ, σ)`, built and trained from scratch
//! in `f64`.

pub mod data;
pub mod error;
pub mod gabor;
pub mod gradcheck;
pub mod layers;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{CheckpointError, Error, Result};
pub use gabor::{GaborParamSet, GaborParams};
pub use tensor::Tensor4;
