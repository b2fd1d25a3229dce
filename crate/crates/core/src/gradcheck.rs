//! Central finite-difference verification of tape gradients.

use crate::autograd::{Tape, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Worst-case disagreement between analytic and numeric gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    /// `max_i |analytic - numeric| / max(|analytic|, |numeric|, 1e-6)`.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// `(input index, flat element index)` of the worst relative error.
    pub worst: (usize, usize),
    pub checked: usize,
}

/// Compares the gradient of the scalar `f(inputs)` against central
/// differences with the given step, perturbing every input element.
pub fn check_gradients<T, F>(inputs: &[Tensor<T>], step: f64, f: F) -> GradReport
where
    T: Scalar,
    F: for<'t> Fn(&'t Tape<T>, &[Var<'t, T>]) -> Var<'t, T>,
{
    check_gradients_at(inputs, step, |i, n| (0..n).map(move |j| (i, j)).collect(), f)
}

/// Like [`check_gradients`] but only at the `(input, element)` positions
/// produced by `positions(input_index, input_len)`.
pub fn check_gradients_at<T, F, P>(inputs: &[Tensor<T>], step: f64, positions: P, f: F) -> GradReport
where
    T: Scalar,
    F: for<'t> Fn(&'t Tape<T>, &[Var<'t, T>]) -> Var<'t, T>,
    P: Fn(usize, usize) -> Vec<(usize, usize)>,
{
    let analytic: Vec<Tensor<T>> = {
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&tape, &vars);
        let grads = tape.backward(out);
        vars.iter().map(|&v| grads.get_or_zeros(v)).collect()
    };
    let eval = |perturbed: &[Tensor<T>]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<_> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        let value = f(&tape, &vars).value().item().as_f64();
        value
    };

    let mut report = GradReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    let mut work: Vec<Tensor<T>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for (ii, j) in positions(i, input.len()) {
            debug_assert_eq!(ii, i);
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + T::lit(step);
            let plus = eval(&work);
            work[i].data_mut()[j] = orig - T::lit(step);
            let minus = eval(&work);
            work[i].data_mut()[j] = orig;

            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[i].data()[j].as_f64();
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(1e-6);
            report.checked += 1;
            report.max_abs_err = report.max_abs_err.max(abs);
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = (i, j);
            }
        }
    }
    report
}
