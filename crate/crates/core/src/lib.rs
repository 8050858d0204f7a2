pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod image;
pub mod model;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod vq;

pub use error::{Error, Result};
pub use image::Image;
