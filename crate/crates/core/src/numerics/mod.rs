//! Dense double-precision tensors, a reverse-mode tape, time convolution
//! and a finite-difference gradient checker.

mod conv;
pub mod gradcheck;
mod tape;
mod tensor;

pub use conv::convolve_time;
pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport, Probe};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{matmul, softmax, Tensor};
