//! Minimal reverse-mode automatic differentiation over dense f64 arrays.
//!
//! Computations are recorded on a [`Tape`] as a topologically ordered list of
//! primitive operations. The backward pass *emits new tape nodes* for every
//! vector-Jacobian product instead of writing into adjoint buffers, so the
//! result of [`grad`] is itself differentiable. That is how surface normals
//! (a spatial gradient of the SDF) stay differentiable with respect to the
//! network parameters.
//!
//! A tape is single-owner: it is not `Send`/`Sync` and must not be shared
//! across threads. Independent tapes may run in parallel.

mod check;
mod tape;

pub use check::{central_difference_grad, finite_difference_check};
pub use tape::{backward, concat_cols, grad, DiffError, Op, Tape, Var};

#[cfg(test)]
mod tests;
