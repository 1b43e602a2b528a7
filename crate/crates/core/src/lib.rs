//! Discriminator-guided adversarial anomaly detection.
//!
//! An encoder/decoder pair is trained against a joint `(x, z)` discriminator that
//! also predicts which geometric transformation was applied to its input. The
//! generator learns to restore transformed images to the normal pose, and test
//! images are scored by reconstruction error in image and latent space.

pub mod autograd;
pub mod checkpoint;
pub mod data_io;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod networks;
pub mod optim;
pub mod pretext;
pub mod scoring;
pub mod tensor;
pub mod trainer;

pub use error::{DgadError, Result};
pub use tensor::{Real, Tensor};
