//! Dense tensors, a reverse-mode tape, the network primitives built on it,
//! Adam, a finite-difference gradient checker and the checkpoint container.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod kernels;
pub mod params;
pub mod tape;
pub mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::Container;
pub use gradcheck::{grad_check, grad_check_sampled, GradCheckReport};
pub use params::{Binding, Param, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Real, Tensor};

/// Default tolerance below which a row sum counts as degenerate.
pub const ROW_NORMALIZE_EPS: Real = 1e-6;

/// Row-normalizes a plain matrix (no tape).
pub fn row_normalize(a: &Tensor, eps: Real) -> crate::Result<Tensor> {
    let mut tape = Tape::new();
    let v = tape.constant(a.clone());
    let out = tape.row_normalize(v, eps)?;
    Ok(tape.value(out).clone())
}

/// Applies `f` to `x` on a fresh tape without tracking gradients.
pub fn eval<F>(x: &Tensor, f: F) -> crate::Result<Tensor>
where
    F: FnOnce(&mut Tape, Var) -> crate::Result<Var>,
{
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let out = f(&mut tape, v)?;
    Ok(tape.value(out).clone())
}
