//! Dense tensors, the primitive kernel set, reverse-mode differentiation
//! and element-count allocation accounting.

pub mod alloc;
pub mod gradcheck;
pub mod tape;
pub mod tensor;

pub use alloc::{AllocCounter, CounterGuard};
pub use gradcheck::{finite_diff_check, finite_diff_check_coords, rel_err, GradCheckReport};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{BinaryOp, ReduceOp, Tensor, UnaryOp};
