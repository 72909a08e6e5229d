//! Pointwise activations and binary elementwise operations.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use libm::erf;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Elementwise {
    Relu,
    Gelu,
    Add,
    Mul,
}

impl Elementwise {
    pub fn is_binary(self) -> bool {
        matches!(self, Elementwise::Add | Elementwise::Mul)
    }
}

/// Standard normal CDF.
#[inline]
pub fn phi(x: f64) -> f64 {
    0.5 * (1.0 + erf(x * FRAC_1_SQRT_2))
}

/// `x·Φ(x)` with the exact Gaussian CDF.
#[inline]
pub fn gelu(x: f64) -> f64 {
    x * phi(x)
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    phi(x) + x * (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

#[inline]
pub fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

pub fn elementwise(op: Elementwise, a: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    match (op, b) {
        (Elementwise::Relu, None) => Ok(a.map(relu)),
        (Elementwise::Gelu, None) => Ok(a.map(gelu)),
        (Elementwise::Add, Some(b)) => a.zip_map(b, |x, y| x + y),
        (Elementwise::Mul, Some(b)) => a.zip_map(b, |x, y| x * y),
        (op, _) => Err(Error::Shape(format!(
            "{op:?} takes {} operand(s)",
            if op.is_binary() { 2 } else { 1 }
        ))),
    }
}

/// Gradients of an elementwise op with respect to its operand(s).
pub fn elementwise_backward(
    op: Elementwise,
    grad_out: &Tensor,
    a: &Tensor,
    b: Option<&Tensor>,
) -> Result<(Tensor, Option<Tensor>)> {
    grad_out.expect_same_dims(a)?;
    match (op, b) {
        (Elementwise::Relu, None) => Ok((
            grad_out.zip_map(a, |g, x| if x > 0.0 { g } else { 0.0 })?,
            None,
        )),
        (Elementwise::Gelu, None) => Ok((grad_out.zip_map(a, |g, x| g * gelu_grad(x))?, None)),
        (Elementwise::Add, Some(b)) => {
            b.expect_same_dims(a)?;
            Ok((grad_out.clone(), Some(grad_out.clone())))
        }
        (Elementwise::Mul, Some(b)) => Ok((
            grad_out.zip_map(b, |g, y| g * y)?,
            Some(grad_out.zip_map(a, |g, x| g * x)?),
        )),
        (op, _) => Err(Error::Shape(format!("bad operand count for {op:?}"))),
    }
}
