//! Training objective: SmoothL1 plus a weighted SSIM term.

use std::rc::Rc;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::resample::AxisResample;
use crate::tensor::Tensor;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
pub const SMOOTH_L1_BETA: f64 = 1.0;

/// Mean SSIM over all valid window positions, channels and batch items.
///
/// Uses a separable Gaussian window of odd `window` taps in "valid" mode.
pub fn ssim_var(x: &Var, y: &Var, window: usize) -> Result<Var> {
    if x.shape() != y.shape() {
        return Err(Error::Structure(format!(
            "ssim inputs differ: {:?} vs {:?}",
            x.shape(),
            y.shape()
        )));
    }
    let (_, _, h, w) = x.dims4();
    if h < window || w < window {
        return Err(Error::Precondition(format!(
            "ssim window {window} does not fit a {h}x{w} image"
        )));
    }
    let rows = Rc::new(AxisResample::gaussian_valid(h, window, SSIM_SIGMA));
    let cols = Rc::new(AxisResample::gaussian_valid(w, window, SSIM_SIGMA));
    let blur = |v: &Var| v.resample(&rows, &cols);
    let mx = blur(x);
    let my = blur(y);
    let mxy = mx.mul(&my);
    let sxx = blur(&x.square()).sub(&mx.square());
    let syy = blur(&y.square()).sub(&my.square());
    let sxy = blur(&x.mul(y)).sub(&mxy);
    let num = mxy.mul_scalar(2.0).add_scalar(SSIM_C1).mul(&sxy.mul_scalar(2.0).add_scalar(SSIM_C2));
    let den = mx
        .square()
        .add(&my.square())
        .add_scalar(SSIM_C1)
        .mul(&sxx.add(&syy).add_scalar(SSIM_C2));
    Ok(num.div(&den).mean())
}

/// Window used by the loss: the standard 11 taps, shrunk to the largest odd
/// size that fits images smaller than that.
pub fn loss_window(h: usize, w: usize) -> usize {
    let side = h.min(w).min(SSIM_WINDOW);
    if side.is_multiple_of(2) {
        side - 1
    } else {
        side
    }
}

/// Loss value with its two components (as plain numbers, for logging).
pub struct LossParts {
    pub total: Var,
    pub l1: f64,
    pub ssim_term: f64,
}

/// `SmoothL1(pred, target) + lambda * (1 - SSIM(pred, target))`.
pub fn fsenet_loss(pred: &Var, target: &Tensor, lambda: f64) -> Result<LossParts> {
    if pred.shape() != target.shape() {
        return Err(Error::Structure(format!(
            "prediction {:?} and target {:?} differ",
            pred.shape(),
            target.shape()
        )));
    }
    let l1 = pred.smooth_l1_mean(target, SMOOTH_L1_BETA);
    let l1_value = l1.value().item();
    if lambda == 0.0 {
        return Ok(LossParts {
            total: l1,
            l1: l1_value,
            ssim_term: 0.0,
        });
    }
    let (_, _, h, w) = pred.dims4();
    let t = pred.graph().constant(target.clone());
    let ssim_term = ssim_var(pred, &t, loss_window(h, w))?.mul_scalar(-1.0).add_scalar(1.0);
    let ssim_value = ssim_term.value().item();
    Ok(LossParts {
        total: l1.add(&ssim_term.mul_scalar(lambda)),
        l1: l1_value,
        ssim_term: ssim_value,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Graph;
    use crate::gradcheck::check_input;
    use rand::{Rng, SeedableRng};

    fn rand_image_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen::<f64>())
    }

    #[test]
    fn identical_inputs_give_zero_loss() {
        for (h, w) in [(8, 8), (16, 24), (32, 32)] {
            let t = rand_image_tensor(&[1, 3, h, w], 1);
            let g = Graph::inference();
            let parts = fsenet_loss(&g.constant(t.clone()), &t, 0.4).unwrap();
            assert_eq!(parts.total.value().item(), 0.0);
            assert_eq!(parts.ssim_term, 0.0);
        }
    }

    #[test]
    fn constant_offset_is_half_squared() {
        let g = Graph::inference();
        let pred = g.full(&[1, 3, 16, 16], 0.5);
        let target = Tensor::full(&[1, 3, 16, 16], 0.6);
        let parts = fsenet_loss(&pred, &target, 0.0).unwrap();
        let d: f64 = 0.6 - 0.5;
        assert!((parts.total.value().item() - 0.5 * d * d).abs() < 1e-15);
        assert!((parts.total.value().item() - 0.005).abs() < 1e-12);
    }

    #[test]
    fn loss_is_positive_for_different_inputs() {
        let a = rand_image_tensor(&[1, 3, 12, 12], 2);
        let b = rand_image_tensor(&[1, 3, 12, 12], 3);
        let g = Graph::inference();
        assert!(fsenet_loss(&g.constant(a), &b, 0.4).unwrap().total.value().item() > 0.0);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let target = rand_image_tensor(&[1, 3, 8, 8], 4);
        let pred = rand_image_tensor(&[1, 3, 8, 8], 5);
        let f = |_: &Graph, v: &Var| fsenet_loss(v, &target, 0.4).unwrap().total;
        let err = check_input(&f, &pred, &[], 1e-4);
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn rejects_mismatched_shapes() {
        let g = Graph::inference();
        let err = fsenet_loss(&g.full(&[1, 3, 8, 8], 0.0), &Tensor::zeros(&[1, 3, 8, 9]), 0.4);
        assert!(matches!(err, Err(Error::Structure(_))));
    }

    #[test]
    fn window_shrinks_for_small_images() {
        assert_eq!(loss_window(512, 512), 11);
        assert_eq!(loss_window(8, 8), 7);
        assert_eq!(loss_window(9, 30), 9);
    }
}
