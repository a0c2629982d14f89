//! Tape-based reverse-mode differentiation and a finite-difference checker.

mod gradcheck;
mod tape;

pub use gradcheck::{
    analytic_grads, grad_check, Differentiable, FdPrecision, Stencil, GradCheckConfig, GradCheckReport,
};
pub use tape::{AttnKernel, Gradients, Tape, Var};
