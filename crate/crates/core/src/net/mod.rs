mod layers;
mod scalar;
mod tensor;

pub use layers::*;
pub use scalar::Scalar;
pub use tensor::Tensor5;
mod wnet;
pub use wnet::*;
mod gradcheck;
pub use gradcheck::*;
mod checkpoint;
pub use checkpoint::*;
