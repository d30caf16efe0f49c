//! Minimal learning substrate: tensors, a recording tape, a two-layer MLP and Adam.

pub mod adam;
pub mod mlp;
pub mod tape;
pub mod tensor;

pub use adam::{AdamState, StepInfo};
pub use mlp::{Mlp, MlpVars};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
