pub mod decoder;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod generator;
pub mod geometry;
pub mod inputs;
pub mod model;
pub mod mtos;
pub mod nn;
pub mod scene;

pub use error::{Error, Result};
