//! Desk-scale stochastic video prediction with hybrid warping.
//!
//! The crate is organized as a small stack: a reverse-mode tensor tape at
//! the bottom, differentiable warping kernels and MobileNet-style layers on
//! top of it, recurrent Gaussian latent predictors, the full prediction
//! model with its decomposed variational loss, plus a synthetic sprite
//! dataset generator, image-quality metrics, and an architecture cost
//! analyzer.

pub mod conv;
pub mod data;
pub mod error;
pub mod flops;
pub mod gradcheck;
pub mod latent;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod rng;
pub mod scalar;
pub mod tape;
pub mod tensor;
pub mod verify;
pub mod warp;

pub use conv::ConvPath;
pub use error::{Error, Result};
pub use params::ParameterStore;
pub use rng::CounterRng;
pub use scalar::Scalar;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
