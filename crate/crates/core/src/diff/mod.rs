//! Dense arrays, a reverse-mode tape, and named trainable parameters.

mod array;
pub mod check;
mod param;
mod tape;

pub use array::{broadcast_shape, Array};
pub use param::{Bound, ParamId, ParamStore, Parameter};
pub use tape::{sigmoid, softplus, tril_len, Gradients, Tape, Var};
