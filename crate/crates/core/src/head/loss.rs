use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::params::HeadOutputs;
use crate::tensor::Tensor;

pub const SMOOTH_L1_BETA: f64 = 1.0 / 9.0;

pub fn smooth_l1(x: f64, beta: f64) -> f64 {
    let a = x.abs();
    if a < beta {
        0.5 * x * x / beta
    } else {
        a - 0.5 * beta
    }
}

pub fn smooth_l1_grad(x: f64, beta: f64) -> f64 {
    if x.abs() < beta {
        x / beta
    } else {
        x.signum()
    }
}

/// Target of one RoI: class index (the last index is background) and, for
/// matched RoIs, the `(dx, dy, dw, dh, dθ)` regression target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadTarget {
    pub label: usize,
    pub deltas: Option<[f64; 5]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub cls: f64,
    pub loc: f64,
    pub angle: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            cls: 1.0,
            loc: 1.0,
            angle: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub cls: f64,
    pub loc: f64,
    pub angle: f64,
    pub total: f64,
    /// Gradient of `total` with respect to each prediction.
    pub grad: HeadOutputs,
}

/// Mean cross-entropy and summed-coordinate smooth-L1 terms, all averaged over the RoIs.
pub fn detection_loss(preds: &HeadOutputs, targets: &[HeadTarget], weights: LossWeights) -> Result<LossReport> {
    let [n, k1, _, _] = preds.cls.dims();
    if n != targets.len() || preds.loc.dims() != [n, 4, 1, 1] || preds.theta.dims() != [n, 1, 1, 1] {
        return Err(Error::Shape(format!(
            "{n} predictions with {} targets, loc {:?}, theta {:?}",
            targets.len(),
            preds.loc.dims(),
            preds.theta.dims()
        )));
    }
    for (name, t) in [("class logits", &preds.cls), ("box deltas", &preds.loc), ("angle", &preds.theta)] {
        if !t.all_finite() {
            return Err(Error::NonFinite(name.into()));
        }
    }
    if n == 0 {
        return Err(Error::Shape("no predictions".into()));
    }
    let inv = 1.0 / n as f64;
    let mut g_cls = Tensor::zeros(preds.cls.dims());
    let mut g_loc = Tensor::zeros(preds.loc.dims());
    let mut g_theta = Tensor::zeros(preds.theta.dims());
    let (mut cls, mut loc, mut angle) = (0.0, 0.0, 0.0);
    for (i, t) in targets.iter().enumerate() {
        if t.label >= k1 {
            return Err(Error::Config(format!("label {} outside {k1} classes", t.label)));
        }
        let logits = &preds.cls.data()[i * k1..(i + 1) * k1];
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
        let lse = m + z.ln();
        cls += lse - logits[t.label];
        for (j, l) in logits.iter().enumerate() {
            let p = (l - lse).exp();
            let y = (j == t.label) as u8 as f64;
            g_cls.data_mut()[i * k1 + j] = weights.cls * inv * (p - y);
        }
        if let Some(d) = t.deltas {
            if d.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("regression target".into()));
            }
            for c in 0..4 {
                let r = preds.loc.data()[i * 4 + c] - d[c];
                loc += smooth_l1(r, SMOOTH_L1_BETA);
                g_loc.data_mut()[i * 4 + c] = weights.loc * inv * smooth_l1_grad(r, SMOOTH_L1_BETA);
            }
            let r = preds.theta.data()[i] - d[4];
            angle += smooth_l1(r, SMOOTH_L1_BETA);
            g_theta.data_mut()[i] = weights.angle * inv * smooth_l1_grad(r, SMOOTH_L1_BETA);
        }
    }
    let (cls, loc, angle) = (cls * inv, loc * inv, angle * inv);
    Ok(LossReport {
        cls,
        loc,
        angle,
        total: weights.cls * cls + weights.loc * loc + weights.angle * angle,
        grad: HeadOutputs {
            cls: g_cls,
            loc: g_loc,
            theta: g_theta,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn preds(n: usize, k1: usize) -> HeadOutputs {
        HeadOutputs {
            cls: Tensor::zeros([n, k1, 1, 1]),
            loc: Tensor::zeros([n, 4, 1, 1]),
            theta: Tensor::zeros([n, 1, 1, 1]),
        }
    }

    #[test]
    fn uniform_logits_over_16() {
        let r = detection_loss(&preds(3, 16), &[HeadTarget { label: 4, deltas: None }; 3], LossWeights::default()).unwrap();
        assert!((r.cls - 16f64.ln()).abs() < 1e-12);
        assert_eq!((r.loc, r.angle), (0.0, 0.0));
    }

    #[test]
    fn exact_regression_is_free() {
        let mut p = preds(1, 2);
        let d = [0.1, -0.2, 0.3, 0.05, -0.4];
        p.loc.data_mut().copy_from_slice(&d[..4]);
        p.theta.data_mut()[0] = d[4];
        let r = detection_loss(&p, &[HeadTarget { label: 0, deltas: Some(d) }], LossWeights::default()).unwrap();
        assert_eq!((r.loc, r.angle), (0.0, 0.0));
        assert!(r.grad.loc.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn smooth_l1_is_c1_at_beta() {
        let b = SMOOTH_L1_BETA;
        let (lo, hi) = (b * (1.0 - 1e-12), b * (1.0 + 1e-12));
        assert!((smooth_l1(lo, b) - smooth_l1(hi, b)).abs() < 1e-12);
        assert!((smooth_l1_grad(lo, b) - smooth_l1_grad(hi, b)).abs() < 1e-10);
        assert_eq!(smooth_l1(b, b), 0.5 * b);
    }

    #[test]
    fn loss_gradient_matches_differences() {
        let mut p = preds(2, 3);
        p.cls.data_mut().copy_from_slice(&[0.3, -1.0, 0.2, 1.5, 0.1, -0.7]);
        p.loc.data_mut().copy_from_slice(&[0.5, 0.01, -0.3, 0.2, 0.0, 0.0, 1.0, -1.0]);
        p.theta.data_mut().copy_from_slice(&[0.4, -0.02]);
        let t = [
            HeadTarget { label: 2, deltas: Some([0.0, 0.05, 0.0, 0.0, 0.1]) },
            HeadTarget { label: 0, deltas: Some([0.3, -0.2, 0.2, 0.0, 0.0]) },
        ];
        let w = LossWeights { cls: 1.0, loc: 2.0, angle: 0.5 };
        let r = detection_loss(&p, &t, w).unwrap();
        let eps = 1e-6;
        let nudged = |which: usize, i: usize, d: f64| {
            let mut q = p.clone();
            let slot = [&mut q.cls, &mut q.loc, &mut q.theta].into_iter().nth(which).unwrap();
            slot.data_mut()[i] += d;
            detection_loss(&q, &t, w).unwrap().total
        };
        for (which, g) in [&r.grad.cls, &r.grad.loc, &r.grad.theta].into_iter().enumerate() {
            for i in 0..g.len() {
                let num = (nudged(which, i, eps) - nudged(which, i, -eps)) / (2.0 * eps);
                assert!((num - g.data()[i]).abs() < 1e-6, "{which}/{i}: {num} vs {}", g.data()[i]);
            }
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut p = preds(1, 2);
        assert!(detection_loss(&p, &[HeadTarget { label: 2, deltas: None }], LossWeights::default()).is_err());
        p.cls.data_mut()[0] = f64::NAN;
        assert!(matches!(
            detection_loss(&p, &[HeadTarget { label: 0, deltas: None }], LossWeights::default()),
            Err(Error::NonFinite(_))
        ));
    }
}
