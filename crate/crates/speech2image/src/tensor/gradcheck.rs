//! Central finite-difference verification of tape gradients.
//!
//! Runs in f64 so that discretization error dominates rounding error and a
//! failure points at the tape, not at float noise.

use super::Tensor;

/// Max relative error between tape gradients and central finite differences
/// of `f` at `inputs`. `f` must be a pure function of its inputs.
///
/// The error metric is |analytic - numeric| / max(|analytic|, |numeric|, 1),
/// i.e. absolute near zero and relative for large gradients.
pub fn max_grad_error<F>(inputs: &[Vec<f64>], shapes: &[&[usize]], f: F, eps: f64) -> f64
where
    F: Fn(&[Tensor<f64>]) -> Tensor<f64>,
{
    assert_eq!(inputs.len(), shapes.len());
    let leaves: Vec<Tensor<f64>> = inputs
        .iter()
        .zip(shapes)
        .map(|(v, s)| Tensor::from_vec(v.clone(), s).requires_grad())
        .collect();
    let loss = f(&leaves);
    assert_eq!(loss.numel(), 1, "gradcheck target must be scalar");
    let refs: Vec<&Tensor<f64>> = leaves.iter().collect();
    let grads = loss.grad_wrt(&refs, false).expect("grad_wrt failed");

    // Plain leaves: nothing records through them, but functions that open
    // their own tape internally (gradient penalties) still work.
    let eval = |vals: &[Vec<f64>]| -> f64 {
        let leaves: Vec<Tensor<f64>> = vals
            .iter()
            .zip(shapes)
            .map(|(v, s)| Tensor::from_vec(v.clone(), s))
            .collect();
        f(&leaves).item()
    };

    let mut worst = 0.0f64;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads[i].to_vec();
        for j in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[i][j] += eps;
            let mut minus = inputs.to_vec();
            minus[i][j] -= eps;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * eps);
            let a = analytic[j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            if err > worst {
                worst = err;
            }
        }
    }
    worst
}

/// Convenience wrapper asserting the error bound used throughout the crate.
pub fn assert_grads<F>(inputs: &[Vec<f64>], shapes: &[&[usize]], f: F, tol: f64)
where
    F: Fn(&[Tensor<f64>]) -> Tensor<f64>,
{
    let err = max_grad_error(inputs, shapes, &f, 1e-3);
    assert!(err < tol, "gradient check failed: max rel error {err:.3e} >= {tol:.1e}");
}

/// Random values in [-1, 1] shifted away from zero, handy for ops with kinks
/// or domain restrictions at the origin.
pub fn sample_away_from_zero(rng: &mut crate::rng::Rng, n: usize, min_abs: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let v = rng.uniform(min_abs, 1.0);
            if rng.next_f64() < 0.5 {
                -v
            } else {
                v
            }
        })
        .collect()
}
