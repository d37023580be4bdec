//! Reverse-mode differentiation over dense `f64` matrices.
//!
//! The crate supplies the handful of primitives a small transformer policy
//! needs (affine maps, layer norm, gelu/tanh/sigmoid, masked blockwise
//! attention, row gathers) together with Adam and a binary checkpoint
//! container. All kernels are single-threaded and compute each output row
//! independently, so identical rows give bit-identical results regardless
//! of batch composition.

pub mod adam;
pub mod checkpoint;
pub mod error;
pub mod graph;
pub mod nn;
pub mod params;
pub mod tensor;

pub use adam::{adam_step, AdamConfig};
pub use checkpoint::Checkpoint;
pub use error::{AutodiffError, CheckpointError};
pub use graph::{softmax_in_place, AttentionLayout, Gradients, Graph, Var};
pub use params::{truncated_normal, AdamSlots, ParamId, ParamStore};
pub use tensor::Tensor;
