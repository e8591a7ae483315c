//! Reverse-mode autodiff: tensors, the tape, and a finite-difference check
//! harness used by the rest of the crate to validate gradients.

mod tape;
mod tensor;

pub use tape::{Gradients, Tape};
pub use tensor::Tensor;


use crate::error::Result;

/// Step size for central finite differences in gradient checks.
pub const GRAD_CHECK_EPS: f64 = 1e-5;
/// Acceptance threshold for the max relative error of a gradient check.
pub const GRAD_CHECK_THRESHOLD: f64 = 1e-4;

/// Named, trainable tensor. `grad` mirrors `value`'s shape and is filled in by
/// the training loop after each backward sweep.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Parameter { name: name.into(), value, grad }
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }
}

/// Compare the reverse-mode gradient of a scalar-valued function against
/// central finite differences with step `eps`.
///
/// Returns the max over coordinates of
/// `|analytic - (f(x+eps) - f(x-eps)) / (2 eps)| / max(1, |analytic|)`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&Tape, &Tensor) -> Result<Tensor>,
{
    let tape = Tape::new();
    let xt = tape.leaf(x)?;
    let loss = f(&tape, &xt)?;
    let grads = tape.backward(&loss)?;
    let analytic = grads.wrt(&xt).unwrap_or_else(|| Tensor::zeros(x.shape()));

    let eval = |data: Vec<f64>| -> Result<f64> {
        let t = Tape::new();
        let xt = t.leaf(&Tensor::from_shape(x.shape().to_vec(), data)?)?;
        f(&t, &xt)?.item()
    };

    let mut max_rel = 0.0f64;
    for i in 0..x.len() {
        let mut plus = x.data().to_vec();
        plus[i] += eps;
        let mut minus = x.data().to_vec();
        minus[i] -= eps;
        let fd = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let a = analytic.data()[i];
        let rel = (a - fd).abs() / a.abs().max(1.0);
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}
