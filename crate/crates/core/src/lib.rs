pub mod data;
pub mod engine;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod model;
pub mod objective;
pub mod par;
pub mod selftest;
pub mod tape;
pub mod tensor;

pub use error::{Error, ErrorKind, Result};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
