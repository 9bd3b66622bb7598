//! Tape-based reverse-mode automatic differentiation for small convolutional
//! networks on the CPU.
//!
//! Every gradient computed by [`Tape::grad`] is recorded on the same tape, so
//! second-order quantities (gradient penalties, Hessian-vector products) come
//! for free. Tensors are dense, row-major and `f32` or `f64`.

pub mod check;
pub mod conv;
mod float;
mod tape;
mod tensor;

pub use conv::ConvGeom;
pub use float::Float;
pub use tape::{Tape, Var};
pub use tensor::{numel, Tensor};
