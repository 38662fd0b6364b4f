#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod gradcheck;
pub mod graph;
pub mod real;
pub mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use real::Real;
pub use tensor::Tensor;
pub mod encoder;
pub mod error;
pub mod image;
pub mod inference;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod restore;
pub mod scenes;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
pub use image::Image;
pub use model::{Model, ModelConfig};
