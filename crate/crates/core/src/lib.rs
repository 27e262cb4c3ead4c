pub mod autograd;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::{Dims, Element, Tensor};
