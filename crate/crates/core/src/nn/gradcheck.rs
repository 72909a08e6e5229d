//! Central finite-difference verification of tape gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::tape::{Tape, Var};
use crate::nn::{Module, TensorRole};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    /// `max |analytic − numeric| / max(1, |analytic|, |numeric|)` over everything checked.
    pub max_rel_error: f64,
    /// Worst error per tensor, parameters by name then `"input"`.
    pub per_tensor: Vec<(String, f64)>,
    pub checked: usize,
    /// Entries left out because the perturbation flipped a ReLU.
    pub skipped: usize,
}

impl GradcheckReport {
    pub fn worst(&self) -> Option<&(String, f64)> {
        self.per_tensor
            .iter()
            .max_by(|a, b| a.1.total_cmp(&b.1))
    }
}

fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / 1f64.max(a.abs()).max(n.abs())
}

/// Checks every learnable parameter of `model` and every element of `input`.
///
/// The scalar under test is `⟨f(x), g⟩` for a fixed random projection `g`
/// drawn from `seed`, so one backward pass yields the full analytic gradient.
pub fn gradcheck<M, F>(model: &mut M, input: &Tensor, eps: f64, seed: u64, f: F) -> Result<GradcheckReport>
where
    M: Module,
    F: for<'a> Fn(&'a M, &mut Tape<'a>, Var) -> Result<Var>,
{
    if !(eps > 0.0 && eps < 0.1) {
        return Err(Error::Config(format!("gradcheck eps {eps} outside (0, 0.1)")));
    }
    let mut bad = None;
    model.visit("", &mut |name, t, role| {
        if role == TensorRole::Learnable && bad.is_none() && !t.all_finite() {
            bad = Some(name.to_string());
        }
    });
    if let Some(name) = bad {
        return Err(Error::NonFinite(name));
    }
    if !input.all_finite() {
        return Err(Error::NonFinite("input".into()));
    }

    // Analytic pass.
    let (projection, pattern, analytic_params, analytic_input) = {
        let mut tape = Tape::new();
        let x = tape.input(input.clone());
        let out = f(model, &mut tape, x)?;
        let out_t = tape.value(out);
        if !out_t.all_finite() {
            return Err(Error::NonFinite("forward output".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let projection = Tensor::randn(out_t.dims(), 1.0, &mut rng);
        let pattern = tape.relu_pattern();
        let grads = tape.backward(out, projection.clone())?;
        let mut per_param = Vec::new();
        model.visit("", &mut |name, t, role| {
            if role == TensorRole::Learnable {
                let g = grads
                    .wrt_param(t)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(t.dims()));
                per_param.push((name.to_string(), g));
            }
        });
        let gx = grads
            .wrt(x)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(input.dims()));
        (projection, pattern, per_param, gx)
    };
    for (name, g) in &analytic_params {
        if !g.all_finite() {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
    }

    // Objective value, or None when the ReLU pattern differs from the analytic pass.
    let objective = |model: &M, x: &Tensor| -> Result<Option<f64>> {
        let mut tape = Tape::new();
        let xv = tape.input(x.clone());
        let out = f(model, &mut tape, xv)?;
        let v = tape.value(out).dot(&projection)?;
        if !v.is_finite() {
            return Err(Error::NonFinite("perturbed forward".into()));
        }
        Ok((tape.relu_pattern() == pattern).then_some(v))
    };

    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        per_tensor: Vec::new(),
        checked: 0,
        skipped: 0,
    };
    for (k, (name, analytic)) in analytic_params.iter().enumerate() {
        let mut worst: f64 = 0.0;
        for j in 0..analytic.len() {
            let original = nudge(model, k, j, None);
            nudge(model, k, j, Some(original + eps));
            let plus = objective(model, input);
            nudge(model, k, j, Some(original - eps));
            let minus = objective(model, input);
            nudge(model, k, j, Some(original));
            let (Some(plus), Some(minus)) = (plus?, minus?) else {
                report.skipped += 1;
                continue;
            };
            let numeric = (plus - minus) / (2.0 * eps);
            worst = worst.max(rel_error(analytic.data()[j], numeric));
            report.checked += 1;
        }
        report.max_rel_error = report.max_rel_error.max(worst);
        report.per_tensor.push((name.clone(), worst));
    }
    let mut worst: f64 = 0.0;
    let mut x = input.clone();
    for j in 0..x.len() {
        let original = x.data()[j];
        x.data_mut()[j] = original + eps;
        let plus = objective(model, &x)?;
        x.data_mut()[j] = original - eps;
        let minus = objective(model, &x)?;
        x.data_mut()[j] = original;
        let (Some(plus), Some(minus)) = (plus, minus) else {
            report.skipped += 1;
            continue;
        };
        let numeric = (plus - minus) / (2.0 * eps);
        worst = worst.max(rel_error(analytic_input.data()[j], numeric));
        report.checked += 1;
    }
    report.max_rel_error = report.max_rel_error.max(worst);
    report.per_tensor.push(("input".into(), worst));
    Ok(report)
}

/// Reads (and optionally overwrites) element `j` of the `k`-th learnable tensor.
fn nudge<M: Module>(model: &mut M, k: usize, j: usize, value: Option<f64>) -> f64 {
    let mut seen = 0;
    let mut old = f64::NAN;
    model.visit_mut("", &mut |_, t, role| {
        if role != TensorRole::Learnable {
            return;
        }
        if seen == k {
            old = t.data()[j];
            if let Some(v) = value {
                t.data_mut()[j] = v;
            }
        }
        seen += 1;
    });
    old
}
