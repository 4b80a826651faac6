//! Differentiable numerical core.

pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod optim;
mod params;
mod tape;
mod tensor;

pub use params::{ModelParams, ParamId, Parameter};
pub use tape::{Gradients, Mode, Tape, Var};
pub use tensor::Tensor;
