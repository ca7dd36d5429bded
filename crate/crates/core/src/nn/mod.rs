//! Small neural-network toolkit over candle tensors: seeded parameter
//! storage, layers used by the classifier and GAN networks, and optimizers
//! with serializable state.

mod layers;
mod optim;
mod params;

pub use layers::{instance_norm, leaky_relu, reflection_pad2d, Conv, ConvTranspose, Dense};
pub use optim::{Adam, SgdMomentum};
pub use params::ParamStore;
