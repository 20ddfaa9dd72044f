//! Minimal reverse-mode differentiation over dense `f64` matrices: exactly
//! the operations the encoder needs, each with a hand-derived backward rule.

mod tape;
mod tensor;

pub use tape::{smooth_l1, Tape, Var};
pub use tensor::{matmul_plain, Tensor};
