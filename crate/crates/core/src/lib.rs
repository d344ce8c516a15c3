//! Similarity attention and mining: train Siamese/triplet/quadruplet
//! embedding models, explain their predictions with gradient-based attention
//! maps computed directly from the learned embedding, and feed those maps
//! back into training as a mining objective.

pub mod attention;
pub mod checkpoint;
pub mod data;
pub mod encoder;
pub mod error;
pub mod losses;
pub mod mining;
pub mod optim;
pub mod train;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{GradientSet, Tensor, TensorId};
