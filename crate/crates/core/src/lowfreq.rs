//! Low-frequency branch: axial-attention blocks, attention alignment across
//! layers, and a UNet of gated deformable blocks.

use crate::autograd::{AttentionAxis, ConvGeometry, Var};
use crate::config::FsenetConfig;
use crate::error::{Error, Result};
use crate::nn::{
    global_avg_pool, upsample_bilinear, Bound, Builder, Conv2d, Conv3x3, LayerNorm2d, ParamId,
    ParameterStore,
};

fn check_channels(x: &Var, expect: usize, what: &str) -> Result<()> {
    let (_, c, _, _) = x.dims4();
    if c != expect {
        return Err(Error::Config(format!("{what} expects {expect} channels, got {c}")));
    }
    Ok(())
}

fn conv1x1(b: &mut Builder, name: &str, cin: usize, cout: usize) -> Result<Conv2d> {
    Conv2d::new(b, name, cin, cout, 1, ConvGeometry::default(), true)
}

/// Height attention, width attention and a local merge, each residual, followed
/// by a depth-wise convolutional feed-forward stage.
#[derive(Debug, Clone)]
pub struct DatBlock {
    pub channels: usize,
    pub heads: usize,
    pub norm_h: LayerNorm2d,
    pub qkv_h: Conv2d,
    pub proj_h: Conv2d,
    pub norm_w: LayerNorm2d,
    pub qkv_w: Conv2d,
    pub proj_w: Conv2d,
    pub merge: Conv2d,
    pub norm_ffn: LayerNorm2d,
    pub ffn_in: Conv2d,
    pub ffn_dw: Conv2d,
    pub ffn_out: Conv2d,
}

impl DatBlock {
    pub fn new(b: &mut Builder, name: &str, channels: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !channels.is_multiple_of(heads) {
            return Err(Error::Config(format!("{heads} heads do not divide {channels} channels")));
        }
        let c = channels;
        let mut b = b.sub(name);
        Ok(DatBlock {
            channels,
            heads,
            norm_h: LayerNorm2d::new(&mut b, "norm_h", c)?,
            qkv_h: conv1x1(&mut b, "qkv_h", c, 3 * c)?,
            proj_h: conv1x1(&mut b, "proj_h", c, c)?,
            norm_w: LayerNorm2d::new(&mut b, "norm_w", c)?,
            qkv_w: conv1x1(&mut b, "qkv_w", c, 3 * c)?,
            proj_w: conv1x1(&mut b, "proj_w", c, c)?,
            merge: Conv2d::depthwise3(&mut b, "merge", c)?,
            norm_ffn: LayerNorm2d::new(&mut b, "norm_ffn", c)?,
            ffn_in: conv1x1(&mut b, "ffn_in", c, 2 * c)?,
            ffn_dw: Conv2d::depthwise3(&mut b, "ffn_dw", 2 * c)?,
            ffn_out: conv1x1(&mut b, "ffn_out", 2 * c, c)?,
        })
    }

    /// Zero the attention output projections and the feed-forward output.
    pub fn zero_output(&self, store: &mut ParameterStore) {
        self.proj_h.zero(store, 0.0);
        self.proj_w.zero(store, 0.0);
        self.ffn_out.zero(store, 0.0);
    }

    pub fn forward(&self, p: &Bound, x: &Var) -> Result<Var> {
        check_channels(x, self.channels, "axial attention block")?;
        let qkv = self.qkv_h.forward(p, &self.norm_h.forward(p, x));
        let x = x.add(&self.proj_h.forward(p, &qkv.axial_attention(self.heads, AttentionAxis::Height)));
        let qkv = self.qkv_w.forward(p, &self.norm_w.forward(p, &x));
        let x = x.add(&self.proj_w.forward(p, &qkv.axial_attention(self.heads, AttentionAxis::Width)));
        let x = x.add(&self.merge.forward(p, &x));
        let h = self.ffn_in.forward(p, &self.norm_ffn.forward(p, &x));
        let h = self.ffn_dw.forward(p, &h).gelu();
        Ok(x.add(&self.ffn_out.forward(p, &h)))
    }
}

/// Attention across `layers` stacked feature maps with a learnable temperature.
#[derive(Debug, Clone)]
pub struct TaaBlock {
    pub layers: usize,
    pub channels: usize,
    pub pre: Conv2d,
    pub q: Conv2d,
    pub k: Conv2d,
    pub v: Conv2d,
    pub alpha: ParamId,
    pub post: Conv2d,
    pub proj: Conv2d,
}

/// Intermediate results of a [`TaaBlock`].
pub struct TaaOutput {
    /// Fused features with `layers * channels` channels.
    pub fused: Var,
    /// Row-normalized `layers x layers` attention, shape `N x layers x layers`.
    pub attention: Var,
    /// Projection back to `channels`.
    pub output: Var,
}

impl TaaBlock {
    pub fn new(b: &mut Builder, name: &str, layers: usize, channels: usize, alpha_init: f64) -> Result<Self> {
        if layers == 0 {
            return Err(Error::Config("alignment block needs at least one layer".into()));
        }
        let nc = layers * channels;
        let mut b = b.sub(name);
        Ok(TaaBlock {
            layers,
            channels,
            pre: conv1x1(&mut b, "pre", nc, nc)?,
            q: Conv2d::depthwise3(&mut b, "q", nc)?,
            k: Conv2d::depthwise3(&mut b, "k", nc)?,
            v: Conv2d::depthwise3(&mut b, "v", nc)?,
            alpha: b.constant("alpha", &[1], alpha_init)?,
            post: conv1x1(&mut b, "post", nc, nc)?,
            proj: conv1x1(&mut b, "proj", nc, channels)?,
        })
    }

    pub fn forward_full(&self, p: &Bound, features: &[&Var]) -> Result<TaaOutput> {
        if features.len() != self.layers {
            return Err(Error::Structure(format!(
                "alignment block expects {} feature maps, got {}",
                self.layers,
                features.len()
            )));
        }
        let shape = features[0].shape().to_vec();
        if features.iter().any(|f| f.shape() != shape.as_slice()) {
            return Err(Error::Structure("alignment inputs differ in shape".into()));
        }
        check_channels(features[0], self.channels, "alignment block")?;
        let (n, c, h, w) = features[0].dims4();
        let layers = self.layers;
        let f_in = Var::concat_channels(features);
        let t = self.pre.forward(p, &f_in);
        let as_rows = |v: Var| v.reshape(&[n, layers, c * h * w]);
        let q = as_rows(self.q.forward(p, &t));
        let k = as_rows(self.k.forward(p, &t));
        let v = as_rows(self.v.forward(p, &t));
        let attention = q.matmul(&k, false, true).div_by_scalar_var(p.var(self.alpha)).softmax_last();
        // rows of the result hold (V A)^T, i.e. layer j mixes the value layers by column j of A
        let mixed = attention.matmul(&v, true, false).reshape(&[n, layers * c, h, w]);
        let fused = self.post.forward(p, &mixed).add(&f_in);
        let output = self.proj.forward(p, &fused);
        Ok(TaaOutput {
            fused,
            attention,
            output,
        })
    }

    pub fn forward(&self, p: &Bound, features: &[&Var]) -> Result<Var> {
        Ok(self.forward_full(p, features)?.output)
    }
}

/// `first_half * second_half` along channels.
pub fn simple_gate(x: &Var) -> Result<Var> {
    let (_, c, _, _) = x.dims4();
    if c % 2 != 0 {
        return Err(Error::Structure(format!("simple gate needs even channels, got {c}")));
    }
    Ok(x.slice_channels(0, c / 2).mul(&x.slice_channels(c / 2, c / 2)))
}

/// Simplified channel attention: `x` scaled per channel by `W pool(x) + b`.
pub fn sca(x: &Var, weight: &Var, bias: Option<&Var>) -> Var {
    let s = global_avg_pool(x).conv2d(weight, bias, ConvGeometry::default());
    x.mul_channel(&s)
}

/// Normalized gated block with a deformable convolution.
#[derive(Debug, Clone)]
pub struct DfeBlock {
    pub channels: usize,
    pub norm: LayerNorm2d,
    pub expand: Conv2d,
    pub dw: Conv2d,
    pub deform: Conv3x3,
    pub sca: Conv2d,
    pub out: Conv2d,
}

impl DfeBlock {
    pub fn new(b: &mut Builder, name: &str, channels: usize, deformable: bool) -> Result<Self> {
        let c = channels;
        let mut b = b.sub(name);
        Ok(DfeBlock {
            channels,
            norm: LayerNorm2d::new(&mut b, "norm", c)?,
            expand: conv1x1(&mut b, "expand", c, 2 * c)?,
            dw: Conv2d::depthwise3(&mut b, "dw", 2 * c)?,
            deform: Conv3x3::new(&mut b, "deform", 2 * c, 2 * c, deformable)?,
            sca: conv1x1(&mut b, "sca", c, c)?,
            out: conv1x1(&mut b, "out", c, c)?,
        })
    }

    pub fn zero_output(&self, store: &mut ParameterStore) {
        self.out.zero(store, 0.0);
    }

    pub fn forward(&self, p: &Bound, x: &Var) -> Result<Var> {
        check_channels(x, self.channels, "gated block")?;
        let y = self.expand.forward(p, &self.norm.forward(p, x));
        let y = self.deform.forward(p, &self.dw.forward(p, &y));
        let y = simple_gate(&y)?;
        let y = sca(&y, p.var(self.sca.weight), self.sca.bias.map(|b| p.var(b)));
        Ok(x.add(&self.out.forward(p, &y)))
    }
}

/// Encoder-decoder of [`DfeBlock`]s; channels double at every coarser level.
#[derive(Debug, Clone)]
pub struct DfeUnet {
    pub levels: usize,
    pub encoders: Vec<Vec<DfeBlock>>,
    pub downs: Vec<Conv2d>,
    pub middle: Vec<DfeBlock>,
    pub ups: Vec<Conv2d>,
    pub decoders: Vec<Vec<DfeBlock>>,
}

impl DfeUnet {
    pub fn new(
        b: &mut Builder,
        name: &str,
        channels: usize,
        levels: usize,
        blocks: usize,
        deformable: bool,
    ) -> Result<Self> {
        if levels == 0 {
            return Err(Error::Config("UNet needs at least one level".into()));
        }
        let mut b = b.sub(name);
        let stack = |b: &mut Builder, name: String, c: usize| -> Result<Vec<DfeBlock>> {
            (0..blocks)
                .map(|i| DfeBlock::new(b, &format!("{name}.{i}"), c, deformable))
                .collect()
        };
        let mut encoders = Vec::new();
        let mut downs = Vec::new();
        let mut ups = Vec::new();
        let mut decoders = Vec::new();
        for l in 0..levels - 1 {
            let c = channels << l;
            encoders.push(stack(&mut b, format!("enc{l}"), c)?);
            let geo = ConvGeometry {
                stride: 2,
                ..Default::default()
            };
            downs.push(Conv2d::new(&mut b, &format!("down{l}"), c, 2 * c, 2, geo, true)?);
            ups.push(conv1x1(&mut b, &format!("up{l}"), 2 * c, c)?);
            decoders.push(stack(&mut b, format!("dec{l}"), c)?);
        }
        let middle = stack(&mut b, "middle".into(), channels << (levels - 1))?;
        Ok(DfeUnet {
            levels,
            encoders,
            downs,
            middle,
            ups,
            decoders,
        })
    }

    pub fn blocks(&self) -> impl Iterator<Item = &DfeBlock> {
        self.encoders
            .iter()
            .flatten()
            .chain(&self.middle)
            .chain(self.decoders.iter().flatten())
    }

    pub fn forward(&self, p: &Bound, x: &Var) -> Result<Var> {
        let (_, _, h, w) = x.dims4();
        let factor = 1 << (self.levels - 1);
        if h % factor != 0 || w % factor != 0 {
            return Err(Error::Precondition(format!(
                "UNet input {h}x{w} is not divisible by {factor}"
            )));
        }
        let run = |blocks: &[DfeBlock], mut x: Var| -> Result<Var> {
            for blk in blocks {
                x = blk.forward(p, &x)?;
            }
            Ok(x)
        };
        let mut skips = Vec::new();
        let mut cur = x.clone();
        for (enc, down) in self.encoders.iter().zip(&self.downs) {
            cur = run(enc, cur)?;
            skips.push(cur.clone());
            cur = down.forward(p, &cur);
        }
        cur = run(&self.middle, cur)?;
        for ((dec, up), skip) in self.decoders.iter().zip(&self.ups).zip(skips).rev() {
            let (_, _, sh, sw) = skip.dims4();
            cur = up.forward(p, &upsample_bilinear(&cur, sh, sw)).add(&skip);
            cur = run(dec, cur)?;
        }
        Ok(cur)
    }
}

/// The full low-frequency network mapping the pyramid base to its deshaded version.
#[derive(Debug, Clone)]
pub struct LowFreqBranch {
    pub stem: Conv2d,
    pub dat_in: Vec<DatBlock>,
    pub taa_in: TaaBlock,
    pub unet: DfeUnet,
    pub dat_out: Vec<DatBlock>,
    pub taa_out: TaaBlock,
    pub head: Conv2d,
}

impl LowFreqBranch {
    pub fn new(b: &mut Builder, name: &str, cfg: &FsenetConfig) -> Result<Self> {
        let c = cfg.base_channels;
        let mut b = b.sub(name);
        let dats = |b: &mut Builder, prefix: &str| -> Result<Vec<DatBlock>> {
            (0..cfg.dat_blocks)
                .map(|i| DatBlock::new(b, &format!("{prefix}{i}"), c, cfg.heads))
                .collect()
        };
        Ok(LowFreqBranch {
            stem: Conv2d::same(&mut b, "stem", 3, c, 3)?,
            dat_in: dats(&mut b, "dat_in")?,
            taa_in: TaaBlock::new(&mut b, "taa_in", cfg.dat_blocks, c, cfg.alpha_init)?,
            unet: DfeUnet::new(&mut b, "unet", c, cfg.unet_levels, cfg.unet_blocks, cfg.deformable)?,
            dat_out: dats(&mut b, "dat_out")?,
            taa_out: TaaBlock::new(&mut b, "taa_out", cfg.dat_blocks, c, cfg.alpha_init)?,
            head: Conv2d::same(&mut b, "head", c, 3, 3)?,
        })
    }

    fn dat_stage(blocks: &[DatBlock], p: &Bound, x: &Var) -> Result<Vec<Var>> {
        let mut outs: Vec<Var> = Vec::with_capacity(blocks.len());
        for blk in blocks {
            let input = outs.last().unwrap_or(x);
            let y = blk.forward(p, input)?;
            outs.push(y);
        }
        Ok(outs)
    }

    /// `low` is `N x 3 x h x w`; the result has the same shape and includes a
    /// global residual from `low`.
    pub fn forward(&self, p: &Bound, low: &Var) -> Result<Var> {
        check_channels(low, 3, "low-frequency branch")?;
        let x = self.stem.forward(p, low);
        let feats = Self::dat_stage(&self.dat_in, p, &x)?;
        let x = self.taa_in.forward(p, &feats.iter().collect::<Vec<_>>())?;
        let x = self.unet.forward(p, &x)?;
        let feats = Self::dat_stage(&self.dat_out, p, &x)?;
        let x = self.taa_out.forward(p, &feats.iter().collect::<Vec<_>>())?;
        Ok(self.head.forward(p, &x).add(low))
    }
}
