//! Finite-difference verification of backward gradients.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{Node, Parameter};

/// Per-parameter outcome of a gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub name: String,
    /// Max over coordinates of |analytic − central difference| relative to
    /// `max(|analytic|, |difference|, 1e-6)`.
    pub max_rel_dev: f64,
}

/// Outcome of [`grad_check`] over a parameter set.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub rtol: f64,
    pub pass: bool,
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(
            f,
            "grad_check: {} (rtol {:.1e})",
            if self.pass { "PASS" } else { "FAIL" },
            self.rtol
        )?;
        for e in &self.entries {
            writeln!(f, "  {:40} max rel dev {:.3e}", e.name, e.max_rel_dev)?;
        }
        Ok(())
    }
}

/// Compares backward gradients of the scalar `f()` against central finite
/// differences for every coordinate of every parameter.
///
/// `f` must rebuild its graph from the parameters' *current* values on each
/// call — the checker perturbs one coordinate at a time (±`h`), re-evaluates,
/// and restores. The report passes iff every relative deviation is ≤ `rtol`.
pub fn grad_check<F>(f: F, params: &[Parameter], h: f64, rtol: f64) -> Result<GradCheckReport>
where
    F: Fn() -> Result<Node>,
{
    if h <= 0.0 || rtol <= 0.0 {
        return Err(Error::validation(format!(
            "grad_check needs positive h and rtol, got h={h}, rtol={rtol}"
        )));
    }

    for p in params {
        p.zero_grad();
    }
    let root = f()?;
    let root_shape = root.shape();
    if root.value().numel() != 1 {
        return Err(Error::NonScalarRoot { shape: root_shape });
    }
    root.backward()?;

    let analytic: Vec<Tensor> = params
        .iter()
        .map(|p| {
            p.grad()
                .unwrap_or_else(|| Tensor::zeros(p.value().shape()))
        })
        .collect();

    let eval = |params_f: &F| -> Result<f64> { params_f()?.scalar_value() };

    let mut entries = Vec::with_capacity(params.len());
    let mut pass = true;
    for (p, ad) in params.iter().zip(&analytic) {
        let base = p.value();
        let mut max_rel = 0.0_f64;
        for i in 0..base.numel() {
            let orig = base.data()[i];

            let mut plus = base.clone();
            plus.data_mut()[i] = orig + h;
            p.set_value(plus);
            let f_plus = eval(&f)?;

            let mut minus = base.clone();
            minus.data_mut()[i] = orig - h;
            p.set_value(minus);
            let f_minus = eval(&f)?;

            p.set_value(base.clone());

            let fd = (f_plus - f_minus) / (2.0 * h);
            let a = ad.data()[i];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
            max_rel = max_rel.max(rel);
        }
        pass &= max_rel <= rtol;
        entries.push(GradCheckEntry { name: p.name().to_string(), max_rel_dev: max_rel });
    }

    Ok(GradCheckReport { entries, rtol, pass })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ad::Parameter;
    use crate::tensor::Tensor;

    #[test]
    fn quadratic_passes_and_wrong_rule_fails() {
        let p = Parameter::new("p", Tensor::vector(vec![0.7, -1.3]));

        // f = sum(p^2): analytic gradient 2p.
        let p1 = p.clone();
        let report = grad_check(
            move || Ok(p1.node().pow_const(2.0).sum_all()),
            std::slice::from_ref(&p),
            1e-5,
            1e-5,
        )
        .unwrap();
        assert!(report.pass, "{report}");

        // Same value, deliberately wrong derivative (3x instead of 2x).
        let p2 = p.clone();
        let report = grad_check(
            move || Ok(p2.node().custom_unary(|x| x * x, |x| 3.0 * x).sum_all()),
            &[p],
            1e-5,
            1e-5,
        )
        .unwrap();
        assert!(!report.pass, "wrong backward rule must fail: {report}");
    }
}
