//! Tensor autodiff engine with three differentiation strategies for
//! element-wise subchains: plain back-propagation, recomputation, and forward
//! mode nested inside the backward pass.

pub mod engine;
pub mod error;
pub mod fad;
pub mod gradcheck;
pub mod ledger;
pub mod modeling;
pub mod ops;
pub mod program;
pub mod recompute;
pub mod static_graph;
pub mod store;
pub mod tape;
pub mod tensor;

pub use engine::{Engine, EngineConfig, Gradients, Mode};
pub use error::{Error, Result};
pub use ops::{OpKind, Operand};
pub use tensor::{Shape, TensorId};
