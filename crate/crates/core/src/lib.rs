//! Domain-adaptive crowd density estimation.
//!
//! A fully-convolutional counter is trained on a labelled source domain and
//! adapted to an unlabelled target domain with pixel-wise feature
//! discriminators, a density-map discriminator, a multi-scale consistency
//! loss and a residual map refiner.

pub mod autograd;
pub mod checkpoint;
pub mod conv;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod networks;
pub mod params;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
