//! Dense row-major tensors and a tape-based reverse-mode differentiation
//! engine.
//!
//! Everything is generic over [`Scalar`] so the same model code can train in
//! `f32` and be gradient-checked in `f64`.

mod contract;
mod error;
pub mod gradcheck;
pub mod opcheck;
mod param;
mod scalar;
mod tape;
mod tensor;

pub use contract::{contract, ContractSpec};
pub use error::{NumericsError, Result};
pub use gradcheck::{finite_diff_check, BlockReport, BlockStatus, FdOptions, FdReport};
pub use param::{ParamId, ParamStore, Parameter};
pub use scalar::{DType, Scalar};
pub use tape::{backward, BackwardReport, Gradients, Tape, Var};
pub use tensor::{BinaryOp, PoolMode, Tensor, UnaryOp};
