//! Numeric core: dense tensors, a reverse-mode graph, AdamW, and
//! finite-difference gradient checking.
//!
//! Everything here is generic over [`Scalar`]; the rest of the crate uses the
//! f64 aliases from the crate root. Forward math lives in [`kernels`] as pure
//! functions; [`Graph`] ops call the same kernels, so the trained path and the
//! evaluation path compute identical numbers.

pub mod fd;
pub mod graph;
pub mod kernels;
pub mod optim;
pub mod scalar;
pub mod tensor;

pub use fd::{finite_difference_check, FdReport};
pub use graph::{reverse_mode_gradients, Graph, Var};
pub use kernels::channel_layernorm;
pub use optim::{adamw_step, AdamwConfig, Param, ParamSet};
pub use scalar::Scalar;
pub use tensor::Tensor;
