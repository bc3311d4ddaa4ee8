//! High-frequency branch: a learned contour gates each band, and the contour is
//! carried to finer bands by upsampling plus a refinement network.

use crate::autograd::{ConvGeometry, Var};
use crate::config::FsenetConfig;
use crate::error::{Error, Result};
use crate::nn::{adaptive_avg_pool, upsample_bilinear, Bound, Builder, Conv2d, ParameterStore, SqueezeExcite};

/// `band * contour` with the single-channel contour broadcast over channels.
pub fn gate_band(band: &Var, contour: &Var) -> Result<Var> {
    let (n, _, h, w) = band.dims4();
    if contour.shape() != [n, 1, h, w] {
        return Err(Error::Structure(format!(
            "contour {:?} does not match band {:?}",
            contour.shape(),
            band.shape()
        )));
    }
    Ok(band.mul_spatial(contour))
}

/// Two `3 x 3` convolutions with a GELU between them, plus identity.
#[derive(Debug, Clone)]
pub struct ResBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

impl ResBlock {
    pub fn new(b: &mut Builder, name: &str, channels: usize) -> Result<Self> {
        let mut b = b.sub(name);
        Ok(ResBlock {
            conv1: Conv2d::same(&mut b, "conv1", channels, channels, 3)?,
            conv2: Conv2d::same(&mut b, "conv2", channels, channels, 3)?,
        })
    }

    pub fn forward(&self, p: &Bound, x: &Var) -> Var {
        let h = self.conv1.forward(p, x).gelu();
        x.add(&self.conv2.forward(p, &h))
    }
}

/// Predicts the gating contour for the coarsest band from the low band before
/// and after deshading and the band itself.
#[derive(Debug, Clone)]
pub struct ContourNet {
    pub stem: Conv2d,
    pub blocks: Vec<ResBlock>,
    pub head: Conv2d,
}

impl ContourNet {
    pub fn new(b: &mut Builder, name: &str, channels: usize, blocks: usize) -> Result<Self> {
        let mut b = b.sub(name);
        Ok(ContourNet {
            stem: Conv2d::same(&mut b, "stem", 9, channels, 3)?,
            blocks: (0..blocks)
                .map(|i| ResBlock::new(&mut b, &format!("block{i}"), channels))
                .collect::<Result<_>>()?,
            head: Conv2d::new(&mut b, "head", channels, 1, 1, ConvGeometry::default(), true)?,
        })
    }

    pub fn forward(&self, p: &Bound, low_in: &Var, low_out: &Var, band: &Var) -> Result<Var> {
        let (n, c, h, w) = band.dims4();
        if c != 3 || low_in.dims4().1 != 3 || low_in.shape() != low_out.shape() {
            return Err(Error::Structure(format!(
                "contour inputs must be 3-channel with matching low bands, got {:?}, {:?}, {:?}",
                low_in.shape(),
                low_out.shape(),
                band.shape()
            )));
        }
        let (ln, _, lh, lw) = low_in.dims4();
        if ln != n || 2 * lh != h || 2 * lw != w {
            return Err(Error::Structure(format!(
                "band {h}x{w} must be twice the low band {lh}x{lw}"
            )));
        }
        let x = Var::concat_channels(&[
            &upsample_bilinear(low_in, h, w),
            &upsample_bilinear(low_out, h, w),
            band,
        ]);
        let mut x = self.stem.forward(p, &x).gelu();
        for blk in &self.blocks {
            x = blk.forward(p, &x);
        }
        Ok(self.head.forward(p, &x))
    }
}

/// Multi-grid average pooling fused back into the features.
///
/// Equivalent to concatenating `x` with every upsampled pooled level and fusing
/// with one `1 x 1` convolution: the fusion weights are split per level and
/// applied before upsampling, which commutes with channel mixing.
#[derive(Debug, Clone)]
pub struct Spp {
    pub grids: Vec<usize>,
    pub reduce: Vec<Conv2d>,
    pub fuse_levels: Vec<Conv2d>,
    pub fuse_input: Conv2d,
}

impl Spp {
    pub fn new(b: &mut Builder, name: &str, channels: usize, grids: &[usize]) -> Result<Self> {
        let hidden = (channels / 4).max(1);
        let one = ConvGeometry::default();
        let mut b = b.sub(name);
        let mut reduce = Vec::new();
        let mut fuse_levels = Vec::new();
        for &g in grids {
            reduce.push(Conv2d::new(&mut b, &format!("reduce{g}"), channels, hidden, 1, one, true)?);
            fuse_levels.push(Conv2d::new(&mut b, &format!("fuse{g}"), hidden, channels, 1, one, false)?);
        }
        Ok(Spp {
            grids: grids.to_vec(),
            reduce,
            fuse_levels,
            fuse_input: Conv2d::new(&mut b, "fuse_input", channels, channels, 1, one, true)?,
        })
    }

    /// Grid sizes that fit the given plane; larger grids are skipped.
    pub fn active_grids(&self, h: usize, w: usize) -> Vec<usize> {
        self.grids.iter().copied().filter(|&g| g <= h && g <= w).collect()
    }

    pub fn forward(&self, p: &Bound, x: &Var) -> Var {
        let (_, _, h, w) = x.dims4();
        let mut out = self.fuse_input.forward(p, x);
        for ((&g, reduce), fuse) in self.grids.iter().zip(&self.reduce).zip(&self.fuse_levels) {
            if g > h || g > w {
                continue;
            }
            let level = reduce.forward(p, &adaptive_avg_pool(x, g, g)).gelu();
            let level = fuse.forward(p, &level);
            out = out.add(&upsample_bilinear(&level, h, w));
        }
        out
    }
}

/// Dilated convolutions with squeeze-and-excitation aggregation, then SPP.
#[derive(Debug, Clone)]
pub struct Trm {
    pub dilated: Vec<Conv2d>,
    pub aggregate: Vec<SqueezeExcite>,
    pub compress: Vec<Conv2d>,
    pub spp: Spp,
}

impl Trm {
    pub fn new(
        b: &mut Builder,
        name: &str,
        channels: usize,
        dilations: &[usize],
        se_reduction: usize,
        grids: &[usize],
    ) -> Result<Self> {
        let mut b = b.sub(name);
        let mut dilated = Vec::new();
        let mut aggregate = Vec::new();
        let mut compress = Vec::new();
        for (i, &r) in dilations.iter().enumerate() {
            let geo = ConvGeometry {
                padding: r,
                dilation: r,
                ..Default::default()
            };
            dilated.push(Conv2d::new(&mut b, &format!("dilated{i}"), channels, channels, 3, geo, true)?);
            aggregate.push(SqueezeExcite::new(&mut b, &format!("se{i}"), 2 * channels, se_reduction)?);
            compress.push(Conv2d::same(&mut b, &format!("compress{i}"), 2 * channels, channels, 3)?);
        }
        Ok(Trm {
            dilated,
            aggregate,
            compress,
            spp: Spp::new(&mut b, "spp", channels, grids)?,
        })
    }

    pub fn forward(&self, p: &Bound, x: &Var) -> Var {
        let mut cur = x.clone();
        for ((conv, se), compress) in self.dilated.iter().zip(&self.aggregate).zip(&self.compress) {
            let d = conv.forward(p, &cur).gelu();
            let node = se.forward(p, &Var::concat_channels(&[&cur, &d]));
            cur = compress.forward(p, &node).gelu();
        }
        self.spp.forward(p, &cur)
    }
}

/// Upsamples a contour by two and refines it, keeping the upsampled contour as
/// a residual path.
#[derive(Debug, Clone)]
pub struct ContourExpander {
    pub stem: Conv2d,
    pub trm: Trm,
    pub head: Conv2d,
}

impl ContourExpander {
    pub fn new(b: &mut Builder, name: &str, cfg: &FsenetConfig) -> Result<Self> {
        let c = cfg.high_channels;
        let mut b = b.sub(name);
        Ok(ContourExpander {
            stem: Conv2d::same(&mut b, "stem", 1, c, 3)?,
            trm: Trm::new(&mut b, "trm", c, &cfg.trm_dilations, cfg.se_reduction, &cfg.spp_grids)?,
            head: Conv2d::new(&mut b, "head", c, 1, 1, ConvGeometry::default(), true)?,
        })
    }

    pub fn forward(&self, p: &Bound, contour: &Var) -> Var {
        let (_, _, h, w) = contour.dims4();
        let up = upsample_bilinear(contour, 2 * h, 2 * w);
        let f = self.stem.forward(p, &up).gelu();
        let f = self.trm.forward(p, &f);
        self.head.forward(p, &f).add(&up)
    }
}

/// Contour learning plus one expander per finer level (or one shared).
#[derive(Debug, Clone)]
pub struct HighFreqBranch {
    pub contour: ContourNet,
    pub expanders: Vec<ContourExpander>,
    pub shared: bool,
}

impl HighFreqBranch {
    pub fn new(b: &mut Builder, name: &str, cfg: &FsenetConfig) -> Result<Self> {
        let mut b = b.sub(name);
        let contour = ContourNet::new(&mut b, "contour", cfg.contour_channels, cfg.contour_blocks)?;
        let count = match (cfg.depth, cfg.share_refinement) {
            (1, _) => 0,
            (_, true) => 1,
            (d, false) => d - 1,
        };
        let expanders = (0..count)
            .map(|i| ContourExpander::new(&mut b, &format!("expand{i}"), cfg))
            .collect::<Result<_>>()?;
        Ok(HighFreqBranch {
            contour,
            expanders,
            shared: cfg.share_refinement,
        })
    }

    /// Expander used to go from band `level + 1` to band `level`.
    fn expander(&self, level: usize) -> &ContourExpander {
        if self.shared {
            &self.expanders[0]
        } else {
            &self.expanders[level]
        }
    }

    /// Gate every band; `highs[0]` is the finest. Returns the gated bands and
    /// the contour used for each.
    pub fn forward(&self, p: &Bound, low_in: &Var, low_out: &Var, highs: &[Var]) -> Result<(Vec<Var>, Vec<Var>)> {
        let depth = highs.len();
        if depth == 0 {
            return Err(Error::Structure("no high-frequency bands".into()));
        }
        let mut contour = self.contour.forward(p, low_in, low_out, &highs[depth - 1])?;
        let mut gated = vec![gate_band(&highs[depth - 1], &contour)?];
        let mut contours = vec![contour.clone()];
        for level in (0..depth - 1).rev() {
            contour = self.expander(level).forward(p, &contour);
            gated.push(gate_band(&highs[level], &contour)?);
            contours.push(contour.clone());
        }
        gated.reverse();
        contours.reverse();
        Ok((gated, contours))
    }

    /// Contour head to zero weights with bias 1, and every refinement head to zero.
    pub fn set_identity(&self, store: &mut ParameterStore) {
        self.contour.head.zero(store, 1.0);
        for e in &self.expanders {
            e.head.zero(store, 0.0);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Graph;
    use crate::gradcheck::{check_input, spread};
    use crate::nn::init_rng;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};

    fn rand_tensor(shape: &[usize], seed: u64, scale: f64) -> Tensor {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-scale..scale))
    }

    fn build<T>(seed: u64, f: impl FnOnce(&mut Builder) -> Result<T>) -> (ParameterStore, T) {
        let mut store = ParameterStore::new();
        let mut rng = init_rng(seed);
        let m = f(&mut Builder::new(&mut store, &mut rng)).unwrap();
        (store, m)
    }

    #[test]
    fn gate_band_cases() {
        let g = Graph::inference();
        let band = g.constant(rand_tensor(&[1, 3, 8, 8], 1, 1.0));
        let one = g.full(&[1, 1, 8, 8], 1.0);
        assert_eq!(gate_band(&band, &one).unwrap().value(), band.value());
        let zero = g.full(&[1, 1, 8, 8], 0.0);
        assert!(gate_band(&band, &zero).unwrap().value().data().iter().all(|&v| v == 0.0));
        let ct = rand_tensor(&[1, 1, 8, 8], 2, 1.0);
        let out = gate_band(&band, &g.constant(ct.clone())).unwrap();
        for c in 0..3 {
            for i in 0..64 {
                assert_eq!(out.value().data()[c * 64 + i], band.value().data()[c * 64 + i] * ct.data()[i]);
            }
        }
        assert!(matches!(gate_band(&band, &g.full(&[1, 1, 4, 8], 1.0)), Err(Error::Structure(_))));
    }

    #[test]
    fn gate_band_is_bilinear() {
        let g = Graph::inference();
        let b = rand_tensor(&[1, 3, 6, 6], 3, 1.0);
        let c = rand_tensor(&[1, 1, 6, 6], 4, 1.0);
        let (sa, sb) = (1.7, -0.6);
        let lhs = gate_band(&g.constant(b.map(|v| sa * v)), &g.constant(c.map(|v| sb * v))).unwrap();
        let rhs = gate_band(&g.constant(b), &g.constant(c)).unwrap().value().map(|v| sa * sb * v);
        assert!(lhs.value().max_abs_diff(&rhs) < 1e-12);
    }

    #[test]
    fn contour_shape_and_identity_init() {
        let (mut store, net) = build(5, |b| ContourNet::new(b, "contour", 16, 3));
        net.head.zero(&mut store, 0.75);
        let g = Graph::inference();
        let p = Bound::new(&g, &store);
        let low = g.constant(rand_tensor(&[1, 3, 64, 64], 6, 1.0));
        let low2 = g.constant(rand_tensor(&[1, 3, 64, 64], 7, 1.0));
        let band = g.constant(rand_tensor(&[1, 3, 128, 128], 8, 1.0));
        let c = net.forward(&p, &low, &low2, &band).unwrap();
        assert_eq!(c.shape(), &[1, 1, 128, 128]);
        assert!(c.value().data().iter().all(|&v| v == 0.75));
        let bad = g.constant(Tensor::zeros(&[1, 3, 100, 128]));
        assert!(matches!(net.forward(&p, &low, &low2, &bad), Err(Error::Structure(_))));
    }

    #[test]
    fn contour_gradient() {
        let (store, net) = build(9, |b| ContourNet::new(b, "contour", 4, 2));
        let low_out = rand_tensor(&[1, 3, 4, 4], 10, 1.0);
        let band = rand_tensor(&[1, 3, 8, 8], 11, 1.0);
        let f = |g: &Graph, v: &Var| {
            let p = Bound::new(g, &store);
            net.forward(&p, v, &g.constant(low_out.clone()), &g.constant(band.clone()))
                .unwrap()
                .square()
                .sum()
        };
        let err = check_input(&f, &rand_tensor(&[1, 3, 4, 4], 12, 1.0), &[], 1e-4);
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn dilated_impulse_support() {
        for rate in [1usize, 2, 4, 8] {
            let size = 4 * rate + 3;
            let mid = size / 2;
            let g = Graph::inference();
            let x = Tensor::from_fn(&[1, 1, size, size], |i| if i == mid * size + mid { 1.0 } else { 0.0 });
            let geo = ConvGeometry { padding: rate, dilation: rate, ..Default::default() };
            let y = g.constant(x).conv2d(&g.full(&[1, 1, 3, 3], 1.0), None, geo);
            let nz: Vec<(usize, usize)> = (0..size * size)
                .filter(|&i| y.value().data()[i] != 0.0)
                .map(|i| (i / size, i % size))
                .collect();
            let (ys, xs): (Vec<_>, Vec<_>) = nz.iter().cloned().unzip();
            let width = xs.iter().max().unwrap() - xs.iter().min().unwrap() + 1;
            let height = ys.iter().max().unwrap() - ys.iter().min().unwrap() + 1;
            assert_eq!((width, height), (2 * rate + 1, 2 * rate + 1));
            // nine taps, with holes between them once rate > 1
            assert_eq!(nz.len(), 9);
        }
    }

    #[test]
    fn trm_preserves_shape() {
        let cfg = FsenetConfig::toy();
        let (store, trm) = build(13, |b| Trm::new(b, "trm", 4, &cfg.trm_dilations, 4, &cfg.spp_grids));
        let g = Graph::inference();
        let p = Bound::new(&g, &store);
        let y = trm.forward(&p, &g.constant(rand_tensor(&[1, 4, 128, 128], 14, 1.0)));
        assert_eq!(y.shape(), &[1, 4, 128, 128]);
    }

    #[test]
    fn spp_constant_input_gives_constant_planes() {
        let (store, spp) = build(15, |b| Spp::new(b, "spp", 4, &[1, 2, 4, 8]));
        let g = Graph::inference();
        let p = Bound::new(&g, &store);
        let x = Tensor::from_fn(&[1, 4, 64, 64], |i| (i / 4096) as f64 * 0.3 - 0.2);
        let y = spp.forward(&p, &g.constant(x));
        assert_eq!(y.shape(), &[1, 4, 64, 64]);
        for plane in y.value().data().chunks(4096) {
            assert!(plane.iter().all(|v| (v - plane[0]).abs() < 1e-12));
        }
    }

    #[test]
    fn spp_global_level_is_channel_mean() {
        let g = Graph::inference();
        let t = rand_tensor(&[1, 3, 9, 7], 16, 1.0);
        let pooled = adaptive_avg_pool(&g.constant(t.clone()), 1, 1);
        for c in 0..3 {
            let mut acc = 0.0;
            for i in 0..63 {
                acc += t.data()[c * 63 + i];
            }
            assert!((pooled.value().data()[c] - acc / 63.0).abs() < 1e-12);
        }
    }

    #[test]
    fn spp_skips_oversized_grids() {
        let (store, spp) = build(17, |b| Spp::new(b, "spp", 4, &[1, 2, 4, 8]));
        assert_eq!(spp.active_grids(6, 20), vec![1, 2, 4]);
        let g = Graph::inference();
        let p = Bound::new(&g, &store);
        let y = spp.forward(&p, &g.constant(rand_tensor(&[1, 4, 6, 20], 18, 1.0)));
        assert_eq!(y.shape(), &[1, 4, 6, 20]);
    }

    #[test]
    fn expander_doubles_and_keeps_constants_at_identity() {
        let cfg = FsenetConfig::toy();
        let (mut store, e) = build(19, |b| ContourExpander::new(b, "e", &cfg));
        e.head.zero(&mut store, 0.0);
        let g = Graph::inference();
        let p = Bound::new(&g, &store);
        let y = e.forward(&p, &g.full(&[1, 1, 16, 16], 0.6));
        assert_eq!(y.shape(), &[1, 1, 32, 32]);
        assert!(y.value().data().iter().all(|&v| (v - 0.6).abs() < 1e-12));
    }

    #[test]
    fn expander_gradient() {
        let mut cfg = FsenetConfig::toy();
        cfg.trm_dilations = vec![1, 2];
        cfg.spp_grids = vec![1, 2];
        let (store, e) = build(20, |b| ContourExpander::new(b, "e", &cfg));
        let f = |g: &Graph, v: &Var| {
            let p = Bound::new(g, &store);
            e.forward(&p, v).square().sum()
        };
        let x = rand_tensor(&[1, 1, 4, 4], 21, 1.0);
        let err = check_input(&f, &x, &spread(16, 16), 1e-4);
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn branch_gates_every_band() {
        let mut cfg = FsenetConfig::toy();
        cfg.depth = 3;
        let (mut store, branch) = build(22, |b| HighFreqBranch::new(b, "high", &cfg));
        assert_eq!(branch.expanders.len(), 2);
        branch.set_identity(&mut store);
        let g = Graph::inference();
        let p = Bound::new(&g, &store);
        let highs: Vec<Var> = [32, 16, 8]
            .iter()
            .enumerate()
            .map(|(i, &s)| g.constant(rand_tensor(&[1, 3, s, s], 30 + i as u64, 1.0)))
            .collect();
        let low = g.constant(rand_tensor(&[1, 3, 4, 4], 40, 1.0));
        let (gated, contours) = branch.forward(&p, &low, &low, &highs).unwrap();
        for ((gb, b), c) in gated.iter().zip(&highs).zip(&contours) {
            assert_eq!(c.dims4().2, b.dims4().2);
            assert!(gb.value().max_abs_diff(b.value()) < 1e-12);
        }
        cfg.share_refinement = true;
        let (_, shared) = build(22, |b| HighFreqBranch::new(b, "high", &cfg));
        assert_eq!(shared.expanders.len(), 1);
    }

    #[test]
    fn branch_gradient_at_toy_scale() {
        let mut cfg = FsenetConfig::toy();
        cfg.trm_dilations = vec![1, 2];
        cfg.spp_grids = vec![1, 2];
        cfg.contour_channels = 4;
        let (store, branch) = build(23, |b| HighFreqBranch::new(b, "high", &cfg));
        let low_in = rand_tensor(&[1, 3, 4, 4], 24, 1.0);
        let low_out = rand_tensor(&[1, 3, 4, 4], 25, 1.0);
        let h0 = rand_tensor(&[1, 3, 16, 16], 26, 1.0);
        let f = |g: &Graph, v: &Var| {
            let p = Bound::new(g, &store);
            let highs = vec![g.constant(h0.clone()), v.clone()];
            let (gated, _) = branch
                .forward(&p, &g.constant(low_in.clone()), &g.constant(low_out.clone()), &highs)
                .unwrap();
            gated[0].square().sum().add(&gated[1].square().sum())
        };
        let x = rand_tensor(&[1, 3, 8, 8], 27, 1.0);
        let err = check_input(&f, &x, &spread(x.numel(), 48), 1e-4);
        assert!(err < 1e-3, "{err}");
    }
}
