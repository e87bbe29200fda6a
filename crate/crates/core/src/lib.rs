pub mod error;
pub mod check;
pub mod data;
pub mod distill;
pub mod frames;
pub mod model;
pub mod probe;
pub mod tensor;
pub mod views;

pub use error::{Error, Result};
pub use frames::Frames;
