pub mod content;
pub mod error;
pub mod gradcheck;
pub mod optim;
pub mod pipeline;
pub mod selfcheck;
pub mod sketch;
pub mod style;
pub mod tensor;
pub mod tensorfile;
pub mod vgg;

pub use error::{Error, Result};
pub use tensor::{Shape, Tensor};
