//! Analytic-vs-finite-difference gradient comparison in double precision.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autograd::{grad, Var};
use crate::tensor::Tensor;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Denominator floor of the relative error, so that entries whose true
/// gradient is ~0 are judged on absolute error instead.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradReport {
    pub label: String,
    pub step: f64,
    /// max over all checked entries of `|analytic - numeric| / max(|analytic|, |numeric|, REL_FLOOR)`
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub n_checked: usize,
    /// Per-input maximum relative error.
    pub per_input: BTreeMap<String, f64>,
}

impl GradReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("GradReport serialises")
    }
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Checks `d sum(f(inputs)) / d inputs` against central differences.
///
/// `f` is evaluated with differentiable leaves for the analytic pass and with
/// constants for every perturbed evaluation.
pub fn check<F>(label: &str, inputs: &[(&str, Tensor<f64>)], step: f64, f: F) -> GradReport
where
    F: Fn(&[Var<f64>]) -> Var<f64>,
{
    let leaves: Vec<Var<f64>> = inputs.iter().map(|(_, t)| Var::leaf(t.clone())).collect();
    let loss = f(&leaves).sum_all();
    let analytic = grad(&loss, &leaves, false);

    let eval = |vals: &[Tensor<f64>]| -> f64 {
        let vars: Vec<Var<f64>> = vals.iter().map(|t| Var::constant(t.clone())).collect();
        f(&vars).value().sum_all()
    };

    let base: Vec<Tensor<f64>> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let mut report = GradReport {
        label: label.to_string(),
        step,
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        n_checked: 0,
        per_input: BTreeMap::new(),
    };
    for (k, (name, t)) in inputs.iter().enumerate() {
        let mut worst: f64 = 0.0;
        for i in 0..t.len() {
            let mut vals = base.clone();
            vals[k].data_mut()[i] = t.data()[i] + step;
            let up = eval(&vals);
            vals[k].data_mut()[i] = t.data()[i] - step;
            let down = eval(&vals);
            let numeric = (up - down) / (2.0 * step);
            let a = analytic[k].value().data()[i];
            let rel = rel_error(a, numeric);
            worst = worst.max(rel);
            report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
            report.n_checked += 1;
        }
        report.max_rel_error = report.max_rel_error.max(worst);
        report.per_input.insert(name.to_string(), worst);
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let x = Tensor::from_f64(&[3], &[0.5, -1.0, 2.0]);
        let r = check("square", &[("x", x)], FD_STEP, |v| v[0].square());
        assert!(r.max_rel_error < 1e-8, "{r:?}");
        assert_eq!(r.n_checked, 3);
        let back: GradReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // leaky_relu at exactly 0 has a kink; a finite difference straddles it.
        let x = Tensor::from_f64(&[1], &[0.0]);
        let r = check("kink", &[("x", x)], FD_STEP, |v| v[0].leaky_relu(0.2));
        assert!(r.max_rel_error > 0.1);
    }
}
