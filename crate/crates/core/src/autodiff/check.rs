//! Finite-difference verification of reverse-mode gradients.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Outcome of one gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|analytic − numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_error: f64,
    /// `(input, element)` where the largest error occurred.
    pub worst: (usize, usize),
    pub checked: usize,
}

/// Denominator floor so that gradients that are zero on both sides compare equal.
pub const REL_FLOOR: f64 = 1e-6;

/// Compares the tape's gradients of `Σ wᵢ·outᵢ`, for fixed pseudo-random
/// weights `w`, with central differences of step `h` in every input element.
///
/// `build` must be a pure function of its inputs.
pub fn check_gradients(
    inputs: &[Tensor],
    build: impl Fn(&mut Graph, &[Var]) -> Result<Var>,
    h: f64,
) -> Result<GradCheckReport> {
    let scalar = |values: &[Tensor], grads: bool| -> Result<(f64, Graph, Var, Vec<Var>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| if grads { g.variable(t) } else { g.param(t, false) }).collect();
        let out = build(&mut g, &vars)?;
        let n = g.value(out).len();
        let flat = g.reshape(out, &[1, n])?;
        let w = g.constant(Tensor::from_fn(&[n, 1], |i| 0.5 + ((i * 7919) % 13) as f64 / 13.0));
        let loss = g.matmul(flat, w)?;
        Ok((g.value(loss)[0], g, loss, vars))
    };
    let (_, mut g, loss, vars) = scalar(inputs, true)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();
    let mut report = GradCheckReport { max_rel_error: 0.0, worst: (0, 0), checked: 0 };
    let mut probe = inputs.to_vec();
    for i in 0..inputs.len() {
        for e in 0..inputs[i].numel() {
            let x0 = inputs[i].data()[e];
            probe[i].data_mut()[e] = x0 + h;
            let up = scalar(&probe, false)?.0;
            probe[i].data_mut()[e] = x0 - h;
            let down = scalar(&probe, false)?.0;
            probe[i].data_mut()[e] = x0;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[i][e];
            if !(numeric.is_finite() && a.is_finite()) {
                return Err(Error::Data(format!("non-finite gradient at input {i}, element {e}")));
            }
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (i, e);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
