pub mod decoder;
pub mod encoder;
pub mod error;
pub mod io;
pub mod loss;
pub mod model;
pub mod nn;
pub mod partition;
pub mod preprocess;
pub mod selftest;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use partition::Partition;
pub use tensor::{Element, MemoryMeter, Mode, Tape, Tensor};
