//! Full network: pyramid split, low-frequency deshading, contour-gated bands,
//! and reconstruction.

use std::rc::Rc;

use crate::autograd::{Graph, Var};
use crate::config::FsenetConfig;
use crate::error::{Error, Result};
use crate::highfreq::HighFreqBranch;
use crate::image::{Image, PadSpec};
use crate::lowfreq::LowFreqBranch;
use crate::nn::{init_rng, Bound, Builder, ParameterStore};
use crate::resample::AxisResample;
use crate::tensor::Tensor;

/// Network definition plus its parameters.
#[derive(Debug, Clone)]
pub struct Fsenet {
    pub config: FsenetConfig,
    pub params: ParameterStore,
    pub low: LowFreqBranch,
    pub high: HighFreqBranch,
}

/// Everything computed by one forward pass, before clamping.
pub struct ForwardOutput {
    pub output: Var,
    pub low_in: Var,
    pub low_out: Var,
    pub contours: Vec<Var>,
}

fn ops(rows: AxisResample, cols: AxisResample) -> (Rc<AxisResample>, Rc<AxisResample>) {
    (Rc::new(rows), Rc::new(cols))
}

fn pyr_down(x: &Var) -> Var {
    let (_, _, h, w) = x.dims4();
    let (r, c) = ops(AxisResample::pyr_down(h), AxisResample::pyr_down(w));
    x.resample(&r, &c)
}

fn pyr_up(x: &Var) -> Var {
    let (_, _, h, w) = x.dims4();
    let (r, c) = ops(AxisResample::pyr_up(h), AxisResample::pyr_up(w));
    x.resample(&r, &c)
}

/// Differentiable Laplacian split of an `N x C x H x W` batch; sides must be
/// divisible by `2^depth`.
pub fn decompose_var(x: &Var, depth: usize) -> (Vec<Var>, Var) {
    let mut highs = Vec::with_capacity(depth);
    let mut cur = x.clone();
    for _ in 0..depth {
        let down = pyr_down(&cur);
        highs.push(cur.sub(&pyr_up(&down)));
        cur = down;
    }
    (highs, cur)
}

pub fn reconstruct_var(highs: &[Var], low: &Var) -> Var {
    let mut cur = low.clone();
    for band in highs.iter().rev() {
        cur = pyr_up(&cur).add(band);
    }
    cur
}

impl Fsenet {
    /// Randomly initialized network seeded by `config.seed`.
    pub fn new(config: FsenetConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParameterStore::new();
        let mut rng = init_rng(config.seed);
        let mut b = Builder::new(&mut params, &mut rng);
        let low = LowFreqBranch::new(&mut b, "low", &config)?;
        let high = HighFreqBranch::new(&mut b, "high", &config)?;
        Ok(Fsenet {
            config,
            params,
            low,
            high,
        })
    }

    /// A network that reproduces its input: the low branch head is zero (so
    /// only the global residual remains), the contour is constant 1, and every
    /// refinement head is zero.
    pub fn identity(config: FsenetConfig) -> Result<Self> {
        let mut net = Self::new(config)?;
        net.set_identity();
        Ok(net)
    }

    pub fn set_identity(&mut self) {
        self.low.head.zero(&mut self.params, 0.0);
        self.high.set_identity(&mut self.params);
    }

    pub fn parameter_count(&self) -> usize {
        self.params.total_count()
    }

    /// Scalar parameter counts of the low- and high-frequency branches.
    pub fn branch_counts(&self) -> (usize, usize) {
        let mut low = 0;
        let mut high = 0;
        for (name, t) in self.params.iter() {
            if name.starts_with("low.") {
                low += t.numel();
            } else {
                high += t.numel();
            }
        }
        (low, high)
    }

    /// Forward pass on a batch of any size. Padding and cropping happen inside
    /// the graph; the result is not clamped.
    pub fn forward_full(&self, p: &Bound, x: &Var) -> Result<ForwardOutput> {
        let (_, c, h, w) = x.dims4();
        if c != 3 {
            return Err(Error::Structure(format!("expected a 3-channel image, got {c} channels")));
        }
        let pad = PadSpec::for_multiple(h, w, self.config.pad_factor());
        let padded = if pad.is_zero() {
            x.clone()
        } else {
            let (r, cc) = ops(pad.row_op(h), pad.col_op(w));
            x.resample(&r, &cc)
        };
        let (highs, low_in) = decompose_var(&padded, self.config.depth);
        let low_out = self.low.forward(p, &low_in)?;
        let (gated, contours) = self.high.forward(p, &low_in, &low_out, &highs)?;
        let mut output = reconstruct_var(&gated, &low_out);
        if !pad.is_zero() {
            let (_, _, ph, pw) = output.dims4();
            let (r, cc) = ops(AxisResample::crop(ph, pad.top, h), AxisResample::crop(pw, pad.left, w));
            output = output.resample(&r, &cc);
        }
        Ok(ForwardOutput {
            output,
            low_in,
            low_out,
            contours,
        })
    }

    pub fn forward_var(&self, p: &Bound, x: &Var) -> Result<Var> {
        Ok(self.forward_full(p, x)?.output)
    }

    /// Inference on one image without the final clamp.
    pub fn forward_unclamped(&self, img: &Image) -> Result<Image> {
        if img.channels() != 3 {
            return Err(Error::Structure(format!(
                "expected a 3-channel image, got {} channels",
                img.channels()
            )));
        }
        let g = Graph::inference();
        let p = Bound::new(&g, &self.params);
        let y = self.forward_var(&p, &g.constant(Tensor::from_image(img)))?;
        Ok(y.into_value().to_image(0))
    }

    /// Inference on one image, clamped to `[0, 1]`.
    pub fn forward(&self, img: &Image) -> Result<Image> {
        Ok(self.forward_unclamped(img)?.clamp01())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_input, spread};
    use crate::loss::fsenet_loss;
    use crate::pyramid;
    use rand::{Rng, SeedableRng};

    fn random_image(h: usize, w: usize, seed: u64) -> Image {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(h, w, 3, |_, _, _| rng.gen::<f64>())
    }

    #[test]
    fn graph_pyramid_matches_image_pyramid() {
        let img = random_image(16, 24, 1);
        let stack = pyramid::decompose(&img, 2).unwrap();
        let g = Graph::inference();
        let (highs, low) = decompose_var(&g.constant(Tensor::from_image(&img)), 2);
        for (a, b) in highs.iter().zip(&stack.highs) {
            assert!(a.value().to_image(0).max_abs_diff(b) < 1e-12);
        }
        assert!(low.value().to_image(0).max_abs_diff(&stack.low) < 1e-12);
        let back = reconstruct_var(&highs, &low);
        assert!(back.value().to_image(0).max_abs_diff(&img) < 1e-12);
    }

    #[test]
    fn output_keeps_odd_input_size() {
        let net = Fsenet::new(FsenetConfig::toy()).unwrap();
        let out = net.forward(&random_image(37, 53, 2)).unwrap();
        assert_eq!(out.dims(), (37, 53, 3));
        assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn identity_network_reproduces_input() {
        let net = Fsenet::identity(FsenetConfig::toy()).unwrap();
        for (i, (h, w)) in [(32, 32), (45, 70)].into_iter().enumerate() {
            let img = random_image(h, w, 10 + i as u64);
            let out = net.forward_unclamped(&img).unwrap();
            assert!(out.max_abs_diff(&img) < 1e-5);
        }
    }

    #[test]
    fn rejects_gray_input() {
        let net = Fsenet::new(FsenetConfig::toy()).unwrap();
        assert!(matches!(net.forward(&Image::new(16, 16, 1)), Err(Error::Structure(_))));
    }

    #[test]
    fn forward_is_deterministic() {
        let net = Fsenet::new(FsenetConfig::toy()).unwrap();
        let img = random_image(32, 32, 3);
        assert_eq!(net.forward(&img).unwrap(), net.forward(&img).unwrap());
        let again = Fsenet::new(FsenetConfig::toy()).unwrap();
        assert_eq!(net.forward(&img).unwrap(), again.forward(&img).unwrap());
    }

    #[test]
    fn branch_counts_add_up() {
        let net = Fsenet::new(FsenetConfig::toy()).unwrap();
        let (low, high) = net.branch_counts();
        assert_eq!(low + high, net.parameter_count());
        assert!(low > 0 && high > 0);
    }

    #[test]
    fn full_model_input_gradient() {
        let mut cfg = FsenetConfig::toy();
        cfg.trm_dilations = vec![1, 2];
        cfg.spp_grids = vec![1, 2];
        let net = Fsenet::new(cfg).unwrap();
        let target = Tensor::from_image(&random_image(16, 16, 4));
        let x = Tensor::from_image(&random_image(16, 16, 5));
        let f = |g: &Graph, v: &Var| {
            let p = Bound::new(g, &net.params);
            fsenet_loss(&net.forward_var(&p, v).unwrap(), &target, 0.4).unwrap().total
        };
        let err = check_input(&f, &x, &spread(x.numel(), 24), 1e-4);
        assert!(err < 1e-3, "{err}");
    }
}
