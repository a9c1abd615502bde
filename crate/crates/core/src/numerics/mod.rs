//! Dense tensors and a reverse-mode differentiation tape.

pub mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use params::{Bindings, Param, ParamId, ParamKind, ParamStore};
pub use tape::{Activation, Gradients, Tape, Var};
pub(crate) use tensor::standard_normal;
pub use tensor::Tensor;
