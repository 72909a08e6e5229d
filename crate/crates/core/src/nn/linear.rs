//! Fully connected layers over flattened per-sample activations.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct LinearParams {
    /// `(out_dim, in_dim, 1, 1)`.
    pub weight: Tensor,
    /// `(1, out_dim, 1, 1)`.
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LinearParams {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            weight: Tensor::zeros([out_dim, in_dim, 1, 1]),
            bias: Tensor::zeros([1, out_dim, 1, 1]),
        }
    }

    pub fn init<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, std: f64, rng: &mut R) -> Self {
        Self {
            weight: Tensor::trunc_normal([out_dim, in_dim, 1, 1], std, rng),
            bias: Tensor::zeros([1, out_dim, 1, 1]),
        }
    }

    pub fn from_rows(rows: &[Vec<f64>], bias: Vec<f64>) -> Result<Self> {
        let out_dim = rows.len();
        let in_dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != in_dim) || bias.len() != out_dim {
            return Err(Error::Shape("ragged linear weight rows".into()));
        }
        Ok(Self {
            weight: Tensor::from_vec([out_dim, in_dim, 1, 1], rows.concat())?,
            bias: Tensor::vector(bias),
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

fn check(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<(usize, usize, usize)> {
    let [n, c, h, w] = x.dims();
    let [dout, din, kh, kw] = weight.dims();
    if kh != 1 || kw != 1 {
        return Err(Error::Shape(format!("linear weight dims {:?}", weight.dims())));
    }
    if c * h * w != din {
        return Err(Error::Shape(format!(
            "linear expects {din} features per sample, got {}",
            c * h * w
        )));
    }
    if bias.len() != dout {
        return Err(Error::Shape("linear bias length mismatch".into()));
    }
    Ok((n, din, dout))
}

/// `y = W·x + b` per sample; `x` is flattened per sample, `y` is `(N, out, 1, 1)`.
pub fn linear_forward(x: &Tensor, p: &LinearParams) -> Result<Tensor> {
    linear_forward_parts(x, &p.weight, &p.bias)
}

pub(crate) fn linear_forward_parts(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (n, din, dout) = check(x, weight, bias)?;
    let mut out = Tensor::zeros([n, dout, 1, 1]);
    let ws = weight.data();
    let bs = bias.data();
    let xs = x.data();
    let od = out.data_mut();
    for b in 0..n {
        let row = &xs[b * din..(b + 1) * din];
        for o in 0..dout {
            let wr = &ws[o * din..(o + 1) * din];
            od[b * dout + o] = bs[o] + wr.iter().zip(row).map(|(a, v)| a * v).sum::<f64>();
        }
    }
    Ok(out)
}

pub fn linear_backward(grad_out: &Tensor, x: &Tensor, p: &LinearParams) -> Result<LinearGrads> {
    linear_backward_parts(grad_out, x, &p.weight, &p.bias)
}

pub(crate) fn linear_backward_parts(
    grad_out: &Tensor,
    x: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
) -> Result<LinearGrads> {
    let (n, din, dout) = check(x, weight, bias)?;
    if grad_out.len() != n * dout {
        return Err(Error::Shape(format!(
            "linear backward: grad has {} values, expected {}",
            grad_out.len(),
            n * dout
        )));
    }
    let mut gin = Tensor::zeros(x.dims());
    let mut gw = Tensor::zeros(weight.dims());
    let mut gb = Tensor::zeros(bias.dims());
    let ws = weight.data();
    let xs = x.data();
    let gs = grad_out.data();
    for b in 0..n {
        let row = &xs[b * din..(b + 1) * din];
        for o in 0..dout {
            let g = gs[b * dout + o];
            if g == 0.0 {
                continue;
            }
            gb.data_mut()[o] += g;
            let gwr = &mut gw.data_mut()[o * din..(o + 1) * din];
            for (d, v) in gwr.iter_mut().zip(row) {
                *d += g * v;
            }
            let gir = &mut gin.data_mut()[b * din..(b + 1) * din];
            for (d, wv) in gir.iter_mut().zip(&ws[o * din..(o + 1) * din]) {
                *d += g * wv;
            }
        }
    }
    Ok(LinearGrads {
        input: gin,
        weight: gw,
        bias: gb,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_weight_passes_input() {
        let p = LinearParams::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]], vec![0.0, 0.0]).unwrap();
        let x = Tensor::from_vec([2, 2, 1, 1], vec![0.5, -1.0, 3.0, 4.0]).unwrap();
        assert_eq!(linear_forward(&x, &p).unwrap(), x);
    }

    #[test]
    fn zero_input_gives_bias() {
        let p = LinearParams::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]], vec![0.25, -1.0]).unwrap();
        let y = linear_forward(&Tensor::zeros([1, 2, 1, 1]), &p).unwrap();
        assert_eq!(y.data(), &[0.25, -1.0]);
    }

    #[test]
    fn hand_matrix_product() {
        let p = LinearParams::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]], vec![0.0, 0.0]).unwrap();
        let y = linear_forward(&Tensor::from_vec([1, 2, 1, 1], vec![1.0, 1.0]).unwrap(), &p).unwrap();
        assert_eq!(y.data(), &[3.0, 7.0]);
    }

    #[test]
    fn flattens_spatial_input_and_rejects_mismatch() {
        let p = LinearParams::zeros(8, 3);
        assert_eq!(
            linear_forward(&Tensor::zeros([4, 2, 2, 2]), &p).unwrap().dims(),
            [4, 3, 1, 1]
        );
        assert!(linear_forward(&Tensor::zeros([1, 3, 1, 1]), &p).is_err());
    }
}
