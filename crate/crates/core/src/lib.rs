//! Terahertz-style image super-resolution: synthetic degradation, U-shaped
//! and J-shaped restoration networks with hand-written gradients, training
//! with Adam and cosine annealing, and classical baselines.

pub mod datapipe;
pub mod degradation;
pub mod error;
pub mod evalkit;
pub mod image;
pub mod jnet;
pub mod netops;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use image::{BitDepth, ImageTensor};
pub use rng::SeededRng;
pub use tensor::{FeatureMap, Scalar};
