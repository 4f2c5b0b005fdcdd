//! A small CPU tensor library with reverse-mode autodiff.
//!
//! Tensors are always four dimensional (`N × C × H × W`). Operations are
//! recorded on a [`Tape`]; parameters live in a [`ParamStore`] and are updated
//! by [`Adam`]. All kernels are generic over [`Element`] so gradient checks can
//! run in `f64` while training uses `f32`.

pub mod element;
pub mod error;
pub mod kernels;
pub mod param;
pub mod tape;
pub mod tensor;

pub use element::{cst, Element};
pub use error::{Result, TensorError};
pub use param::{he_uniform, Adam, AdamConfig, ParamEntry, ParamId, ParamKind, ParamStore};
pub use tape::{finite_difference, Gradients, Tape, Var};
pub use kernels::BatchStats;
pub use tensor::Tensor;
