//! Progressive binary→n-ary relational learning for 3D object grounding.

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod encoders;
pub mod error;
pub mod extract;
pub mod grounding;
pub mod model;
pub mod nn;
pub mod prl;
pub mod report;
pub mod scene;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
