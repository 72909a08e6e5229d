//! Per-channel standardization with an affine transform.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    /// Statistics computed from the current batch.
    BatchStats,
    /// Stored running statistics.
    Frozen,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormParams {
    pub scale: Tensor,
    pub shift: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

impl NormParams {
    pub fn new(c: usize) -> Self {
        Self {
            scale: Tensor::full([1, c, 1, 1], 1.0),
            shift: Tensor::zeros([1, c, 1, 1]),
            running_mean: Tensor::zeros([1, c, 1, 1]),
            running_var: Tensor::full([1, c, 1, 1], 1.0),
        }
    }

    pub fn channels(&self) -> usize {
        self.scale.len()
    }

    /// Learnable scalars (scale and shift).
    pub fn param_count(&self) -> usize {
        self.scale.len() + self.shift.len()
    }

    /// Exponential moving update of the running statistics.
    pub fn update_running(&mut self, stats: &NormStats, momentum: f64) {
        for (r, m) in self.running_mean.data_mut().iter_mut().zip(&stats.mean) {
            *r = (1.0 - momentum) * *r + momentum * m;
        }
        for (r, v) in self.running_var.data_mut().iter_mut().zip(&stats.var) {
            *r = (1.0 - momentum) * *r + momentum * v;
        }
    }
}

/// Statistics used by one forward pass, kept for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub mode: NormMode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormGrads {
    pub input: Tensor,
    pub scale: Tensor,
    pub shift: Tensor,
}

fn check(x: &Tensor, scale: &Tensor, shift: &Tensor, mode: NormMode) -> Result<()> {
    let [n, c, h, w] = x.dims();
    if scale.len() != c || shift.len() != c {
        return Err(Error::Shape(format!(
            "norm has {} channels, input has {c}",
            scale.len()
        )));
    }
    if mode == NormMode::BatchStats && n * h * w < 2 {
        return Err(Error::Shape(
            "batch statistics need at least two values per channel".into(),
        ));
    }
    Ok(())
}

/// Where the standardization statistics come from.
#[derive(Debug, Clone, Copy)]
pub enum NormSource<'a> {
    Batch,
    Frozen { mean: &'a [f64], var: &'a [f64] },
}

impl NormSource<'_> {
    pub fn mode(&self) -> NormMode {
        match self {
            NormSource::Batch => NormMode::BatchStats,
            NormSource::Frozen { .. } => NormMode::Frozen,
        }
    }
}

pub fn normalize_channels(x: &Tensor, p: &NormParams, mode: NormMode) -> Result<(Tensor, NormStats)> {
    let source = match mode {
        NormMode::BatchStats => NormSource::Batch,
        NormMode::Frozen => NormSource::Frozen {
            mean: p.running_mean.data(),
            var: p.running_var.data(),
        },
    };
    normalize_parts(x, &p.scale, &p.shift, source)
}

pub(crate) fn normalize_parts(
    x: &Tensor,
    scale: &Tensor,
    shift: &Tensor,
    source: NormSource<'_>,
) -> Result<(Tensor, NormStats)> {
    let mode = source.mode();
    check(x, scale, shift, mode)?;
    let [n, c, h, w] = x.dims();
    let plane = h * w;
    let count = (n * plane) as f64;
    let xs = x.data();
    let (mean, var) = match source {
        NormSource::Frozen { mean, var } => {
            if mean.len() != c || var.len() != c {
                return Err(Error::Shape("running statistics length mismatch".into()));
            }
            (mean.to_vec(), var.to_vec())
        }
        NormSource::Batch => {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ch in 0..c {
                let mut s = 0.0;
                for b in 0..n {
                    s += xs[(b * c + ch) * plane..(b * c + ch + 1) * plane].iter().sum::<f64>();
                }
                let m = s / count;
                let mut v = 0.0;
                for b in 0..n {
                    v += xs[(b * c + ch) * plane..(b * c + ch + 1) * plane]
                        .iter()
                        .map(|x| (x - m) * (x - m))
                        .sum::<f64>();
                }
                mean[ch] = m;
                var[ch] = v / count;
            }
            (mean, var)
        }
    };
    let mut out = Tensor::zeros(x.dims());
    let od = out.data_mut();
    for ch in 0..c {
        let inv = 1.0 / (var[ch] + NORM_EPS).sqrt();
        let a = scale.data()[ch] * inv;
        let sh = shift.data()[ch] - a * mean[ch];
        for b in 0..n {
            let r = (b * c + ch) * plane..(b * c + ch + 1) * plane;
            for (o, v) in od[r.clone()].iter_mut().zip(&xs[r]) {
                *o = a * v + sh;
            }
        }
    }
    Ok((out, NormStats { mean, var, mode }))
}

pub fn normalize_channels_backward(
    grad_out: &Tensor,
    x: &Tensor,
    p: &NormParams,
    stats: &NormStats,
) -> Result<NormGrads> {
    normalize_backward_parts(grad_out, x, &p.scale, stats)
}

pub(crate) fn normalize_backward_parts(
    grad_out: &Tensor,
    x: &Tensor,
    scale: &Tensor,
    stats: &NormStats,
) -> Result<NormGrads> {
    check(x, scale, scale, stats.mode)?;
    grad_out.expect_same_dims(x)?;
    let [n, c, h, w] = x.dims();
    let plane = h * w;
    let count = (n * plane) as f64;
    let xs = x.data();
    let gs = grad_out.data();
    let mut gin = Tensor::zeros(x.dims());
    let mut gscale = Tensor::zeros(scale.dims());
    let mut gshift = Tensor::zeros(scale.dims());
    for ch in 0..c {
        let inv = 1.0 / (stats.var[ch] + NORM_EPS).sqrt();
        let m = stats.mean[ch];
        let mut sum_g = 0.0;
        let mut sum_gx = 0.0;
        for b in 0..n {
            let r = (b * c + ch) * plane..(b * c + ch + 1) * plane;
            for (g, v) in gs[r.clone()].iter().zip(&xs[r]) {
                sum_g += g;
                sum_gx += g * (v - m) * inv;
            }
        }
        gshift.data_mut()[ch] = sum_g;
        gscale.data_mut()[ch] = sum_gx;
        let gamma = scale.data()[ch];
        let gi = gin.data_mut();
        for b in 0..n {
            let r = (b * c + ch) * plane..(b * c + ch + 1) * plane;
            for ((d, g), v) in gi[r.clone()].iter_mut().zip(&gs[r.clone()]).zip(&xs[r]) {
                *d = match stats.mode {
                    NormMode::Frozen => gamma * inv * g,
                    NormMode::BatchStats => {
                        let xhat = (v - m) * inv;
                        gamma * inv * (g - sum_g / count - xhat * sum_gx / count)
                    }
                };
            }
        }
    }
    Ok(NormGrads {
        input: gin,
        scale: gscale,
        shift: gshift,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_channel_maps_to_shift() {
        let mut p = NormParams::new(1);
        p.shift.data_mut()[0] = 0.75;
        p.scale.data_mut()[0] = 3.0;
        let x = Tensor::full([2, 1, 3, 3], 4.2);
        let (y, _) = normalize_channels(&x, &p, NormMode::BatchStats).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.75));
    }

    #[test]
    fn standardized_channel_is_nearly_unchanged() {
        let x = Tensor::from_vec([1, 1, 2, 2], vec![1.0, -1.0, 1.0, -1.0]).unwrap();
        let (y, _) = normalize_channels(&x, &NormParams::new(1), NormMode::BatchStats).unwrap();
        assert!(y.max_abs_diff(&x).unwrap() < 1e-4);
    }

    #[test]
    fn two_values_standardize_to_unit() {
        let x = Tensor::from_vec([1, 1, 1, 2], vec![1.0, 3.0]).unwrap();
        let (y, stats) = normalize_channels(&x, &NormParams::new(1), NormMode::BatchStats).unwrap();
        assert_eq!(stats.mean, vec![2.0]);
        assert_eq!(stats.var, vec![1.0]);
        let s = 1.0 / (1.0 + NORM_EPS).sqrt();
        assert!((y.data()[0] + s).abs() < 1e-15 && (y.data()[1] - s).abs() < 1e-15);
    }

    #[test]
    fn frozen_uses_running_stats() {
        let mut p = NormParams::new(1);
        p.running_mean.data_mut()[0] = 1.0;
        p.running_var.data_mut()[0] = 4.0 - NORM_EPS;
        let x = Tensor::from_vec([1, 1, 1, 1], vec![5.0]).unwrap();
        let (y, _) = normalize_channels(&x, &p, NormMode::Frozen).unwrap();
        assert!((y.data()[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn single_value_batch_stats_rejected() {
        let x = Tensor::zeros([1, 1, 1, 1]);
        assert!(normalize_channels(&x, &NormParams::new(1), NormMode::BatchStats).is_err());
    }
}
