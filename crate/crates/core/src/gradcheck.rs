//! Central finite-difference gradient checks.

use crate::autograd::{Graph, Var};
use crate::tensor::Tensor;

/// Worst relative error between `analytic` and central differences of `eval`
/// around `input`, over `coords` (all coordinates when empty).
///
/// Relative error is `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn compare(
    analytic: &Tensor,
    input: &Tensor,
    coords: &[usize],
    step: f64,
    eval: impl Fn(&Tensor) -> f64,
) -> f64 {
    assert_eq!(analytic.shape(), input.shape());
    let all: Vec<usize> = (0..input.numel()).collect();
    let coords = if coords.is_empty() { &all[..] } else { coords };
    let mut worst: f64 = 0.0;
    for &i in coords {
        let mut plus = input.clone();
        plus.data_mut()[i] += step;
        let mut minus = input.clone();
        minus.data_mut()[i] -= step;
        let numeric = (eval(&plus) - eval(&minus)) / (2.0 * step);
        let a = analytic.data()[i];
        let denom = a.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max((a - numeric).abs() / denom);
    }
    worst
}

/// Check the gradient of the scalar function `f` with respect to its input.
pub fn check_input(
    f: &dyn Fn(&Graph, &Var) -> Var,
    input: &Tensor,
    coords: &[usize],
    step: f64,
) -> f64 {
    let g = Graph::new();
    let x = g.leaf(input.clone());
    let y = f(&g, &x);
    let analytic = g.backward(&y).get_or_zeros(&x);
    compare(&analytic, input, coords, step, |t| {
        let g = Graph::inference();
        let x = g.constant(t.clone());
        f(&g, &x).value().item()
    })
}

/// Evenly spread coordinate sample of `count` indices out of `n`.
pub fn spread(n: usize, count: usize) -> Vec<usize> {
    if count >= n {
        return (0..n).collect();
    }
    (0..count).map(|i| (i * n) / count + (i * 7919) % (n / count).max(1)).collect()
}
