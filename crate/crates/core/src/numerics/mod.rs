//! Dense tensors with reverse-mode automatic differentiation.

mod params;
mod tape;
mod tensor;

pub use params::{BoundParams, ParamStore};
pub use tape::{Activation, BinaryKind, Tape, Var};
pub use tensor::Tensor;
