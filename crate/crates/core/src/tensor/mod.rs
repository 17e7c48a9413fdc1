//! Dense tensors with reverse-mode automatic differentiation.
//!
//! Values live in [`Tensor`]; operations on a [`Tape`] produce [`Var`]
//! handles that remember how each value was computed, so
//! [`Tape::backward`] can replay adjoints in reverse order.

mod array;
mod conv;
mod elementwise;
mod gradcheck;
pub(crate) mod linalg;
mod nn;
mod params;
mod real;
mod reduce;
mod shape_ops;
mod tape;

pub use array::Tensor;
pub use conv::conv_out_extent;
pub use gradcheck::grad_check;
pub use params::{BoundParams, Initializer, Param, ParamStore};
pub use real::Real;
pub use tape::{Gradients, Tape, Var};
