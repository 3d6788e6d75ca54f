//! Association model, its loss, training loop and gradient checking.

pub mod attention;
pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod model;
pub mod train;

pub use layers::Parameters;
pub use loss::{loss, parental_softmax, probabilities, LossConfig};
pub use model::{Model, ModelConfig};
