//! Tape-based reverse-mode automatic differentiation over dense tensors.
//!
//! Graphs are built per step (define-by-run). Primitives take shapes that
//! already agree: the only implicit expansion is none at all; leading-axis
//! [`Tape::broadcast`] and general [`Tape::expand`] are explicit ops.

mod tape;
mod tensor;

use thiserror::Error;

pub use tape::{sigmoid, softplus, tanh, Gradients, Tape, Unary, Var};
pub use tensor::{Profile, Real, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("{op}: {message}")]
    InvalidArgument { op: &'static str, message: String },
}

/// Compares reverse-mode gradients of `f` at `x` against central finite
/// differences with the given step, in the 64-bit profile.
///
/// Returns `max_i |analytic_i - numeric_i| / max(1, |numeric_i|)`. A
/// non-scalar output of `f` is summed first.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, step: f64) -> Result<f64, DiffError>
where
    F: Fn(&Tape<f64>, Var) -> Result<Var, DiffError>,
{
    let all: Vec<usize> = (0..x.len()).collect();
    grad_check_at(f, x, step, &all)
}

/// [`grad_check`] restricted to the listed components of `x`.
pub fn grad_check_at<F>(f: F, x: &Tensor<f64>, step: f64, components: &[usize]) -> Result<f64, DiffError>
where
    F: Fn(&Tape<f64>, Var) -> Result<Var, DiffError>,
{
    let scalar = |tape: &Tape<f64>, out: Var| -> Var {
        if tape.value(out).len() == 1 {
            out
        } else {
            tape.sum(out)
        }
    };
    let tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let out = f(&tape, xv)?;
    let loss = scalar(&tape, out);
    let grads = tape.backward(loss)?;
    let analytic = grads
        .get(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let eval = |probe: Tensor<f64>| -> Result<f64, DiffError> {
        let tape = Tape::new();
        let v = tape.constant(probe);
        let out = f(&tape, v)?;
        let loss = scalar(&tape, out);
        let value = tape.value(loss).item();
        Ok(value)
    };

    let mut worst: f64 = 0.0;
    for &i in components {
        let mut plus = x.clone();
        plus.data_mut()[i] += step;
        let mut minus = x.clone();
        minus.data_mut()[i] -= step;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * step);
        let err = (analytic.data()[i] - numeric).abs() / numeric.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}
