//! Finite-difference oracles for verifying analytic gradients.
//!
//! These only ever evaluate the forward pass, so they stay independent of the
//! backward rules they check.

use crate::error::Result;
use crate::tensor::{no_grad, Scalar, Tensor};

/// Relative error with an absolute floor on the denominator so that entries
/// whose true gradient is ~0 are judged on absolute error instead.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Central differences `(f(x+h) - f(x-h)) / 2h` for every element of `param`.
/// The parameter is restored bit-exactly afterwards.
pub fn central_difference<T: Scalar>(
    param: &Tensor<T>,
    h: f64,
    mut eval: impl FnMut() -> Result<f64>,
) -> Result<Vec<f64>> {
    let n = param.numel();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let orig = param.data()[i];
        param.update_data(|d| d[i] = T::of(orig.as_f64() + h));
        let plus = no_grad(&mut eval);
        param.update_data(|d| d[i] = T::of(orig.as_f64() - h));
        let minus = no_grad(&mut eval);
        param.update_data(|d| d[i] = orig);
        out.push((plus? - minus?) / (2.0 * h));
    }
    Ok(out)
}

/// Worst disagreement between analytic and numeric gradients.
#[derive(Debug, Clone, Default)]
pub struct GradReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub checked: usize,
}

impl GradReport {
    pub fn absorb(&mut self, name: &str, analytic: &[f64], numeric: &[f64], floor: f64) {
        for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
            let e = relative_error(a, n, floor);
            if self.checked == 0 || e > self.max_rel_error {
                self.max_rel_error = e;
                self.worst_param = name.to_string();
                self.worst_index = i;
            }
            self.checked += 1;
        }
    }
}

/// Compares backward-pass gradients of `loss` against central differences
/// for each named parameter.
pub fn check_gradients<T: Scalar>(
    params: &[(&str, &Tensor<T>)],
    h: f64,
    floor: f64,
    loss: impl Fn() -> Result<Tensor<T>>,
) -> Result<GradReport> {
    for (_, p) in params {
        p.zero_grad();
    }
    loss()?.backward()?;
    let mut report = GradReport::default();
    for (name, p) in params {
        let analytic: Vec<f64> = p
            .grad()
            .unwrap_or_else(|| vec![T::zero(); p.numel()])
            .iter()
            .map(|v| v.as_f64())
            .collect();
        let numeric = central_difference(p, h, || Ok(loss()?.item().as_f64()))?;
        report.absorb(name, &analytic, &numeric, floor);
    }
    Ok(report)
}
