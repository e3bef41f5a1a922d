#![no_std]

extern crate alloc;

pub mod audio;
pub mod connector;
pub mod corpus;
pub mod encoders;
pub mod ctc;
pub mod decoder;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod real;
pub mod rng;
pub mod tensor;
pub mod training;
pub mod vocab;

pub use error::{Error, Result};
pub use real::Real;
pub use tensor::Tensor;
