//! Finite-difference gradient checking in 64-bit mode.
//!
//! The numeric side evaluates the function twice per element with central
//! differences and never touches the tape, so it stays independent of the
//! backward pass it is checking.

use super::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// Worst relative error found by [`check_gradients`].
#[derive(Debug, Clone, Copy)]
pub struct GradReport {
    pub max_rel_error: f64,
    pub worst_input: usize,
    pub worst_element: usize,
}

/// Compares analytic gradients of `f` against central finite differences
/// for every element of every input, returning the worst relative error.
///
/// `f` must rebuild its graph from the given leaves on each call. Relative
/// error uses an absolute floor so near-zero gradient pairs compare sanely.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], f: F) -> GradReport
where
    F: Fn(&[Tensor<f64>]) -> Tensor<f64>,
{
    for t in inputs {
        assert!(t.requires_grad(), "gradcheck inputs must require gradients");
        t.zero_grad();
    }
    let loss = f(inputs);
    assert_eq!(loss.numel(), 1, "gradcheck expects a scalar loss");
    loss.backward().expect("backward on scalar loss");
    let analytic: Vec<Vec<f64>> = inputs.iter().map(|t| t.grad()).collect();

    let mut report = GradReport {
        max_rel_error: 0.0,
        worst_input: 0,
        worst_element: 0,
    };
    for (ti, t) in inputs.iter().enumerate() {
        let base = t.to_vec();
        for ei in 0..base.len() {
            let mut plus = base.clone();
            plus[ei] += DEFAULT_STEP;
            t.set_data(&plus);
            let up = f(inputs).item();
            let mut minus = base.clone();
            minus[ei] -= DEFAULT_STEP;
            t.set_data(&minus);
            let down = f(inputs).item();
            t.set_data(&base);
            let numeric = (up - down) / (2.0 * DEFAULT_STEP);
            let a = analytic[ti][ei];
            let denom = a.abs().max(numeric.abs()).max(1e-3);
            let rel = (a - numeric).abs() / denom;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_input = ti;
                report.worst_element = ei;
            }
        }
        t.zero_grad();
    }
    report
}

/// Asserts the finite-difference check passes at the default tolerance.
pub fn assert_gradients_close<F>(inputs: &[Tensor<f64>], f: F, label: &str)
where
    F: Fn(&[Tensor<f64>]) -> Tensor<f64>,
{
    let report = check_gradients(inputs, f);
    assert!(
        report.max_rel_error < DEFAULT_TOLERANCE,
        "{label}: finite-difference mismatch {:.3e} at input {} element {}",
        report.max_rel_error,
        report.worst_input,
        report.worst_element
    );
}

/// Deterministic uniform values in [lo, hi) for building check fixtures.
pub fn uniform_tensor(
    rng: &mut impl rand::Rng,
    shape: &[usize],
    lo: f64,
    hi: f64,
) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::param(shape, data)
}
