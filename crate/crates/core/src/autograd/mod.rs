//! Minimal reverse-mode automatic differentiation over [`Matrix`](crate::tensor::Matrix) values.

mod adam;
pub mod gradcheck;
mod params;
mod tape;

pub use adam::Adam;
pub use params::{Grads, ParamId, ParamStore};
pub use tape::{sigmoid, Gradients, Tape, Var, LAYER_NORM_EPS};
