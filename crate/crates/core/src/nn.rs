//! Named parameter storage and the basic layers built on top of it.
//!
//! Parameters live in `f64` but are always kept on the `f32` grid, so that a
//! checkpoint written as 32-bit floats restores them bit-exactly.

use std::collections::HashMap;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{ConvGeometry, Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::resample::AxisResample;
use crate::tensor::Tensor;

/// Round to the nearest `f32` value.
#[inline]
pub fn to_f32_grid(v: f64) -> f64 {
    v as f32 as f64
}

/// Handle to one tensor in a [`ParameterStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Ordered collection of uniquely named parameter tensors.
#[derive(Debug, Clone, Default)]
pub struct ParameterStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, mut value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Structure(format!("duplicate parameter name {name}")));
        }
        value.data_mut().iter_mut().for_each(|v| *v = to_f32_grid(*v));
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(value);
        Ok(ParamId(self.tensors.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn total_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Replace a tensor's values; the shape must not change.
    pub fn assign(&mut self, id: ParamId, values: &[f64]) -> Result<()> {
        let t = &mut self.tensors[id.0];
        if values.len() != t.numel() {
            return Err(Error::Structure(format!(
                "parameter {} expects {} values, got {}",
                self.names[id.0],
                t.numel(),
                values.len()
            )));
        }
        for (d, &v) in t.data_mut().iter_mut().zip(values) {
            *d = to_f32_grid(v);
        }
        Ok(())
    }

    pub fn fill(&mut self, id: ParamId, value: f64) {
        let n = self.tensors[id.0].numel();
        self.assign(id, &vec![value; n]).expect("same length");
    }

    /// Mutable access for optimizers, which must keep values on the `f32` grid.
    pub(crate) fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }
}

/// Parameters placed into a graph for one forward pass.
pub struct Bound {
    graph: Graph,
    vars: Vec<Var>,
}

impl Bound {
    /// Bind every parameter as a tracked leaf (when the graph records) or a constant.
    pub fn new(graph: &Graph, store: &ParameterStore) -> Self {
        let vars = store
            .tensors
            .iter()
            .map(|t| {
                if graph.is_recording() {
                    graph.leaf(t.clone())
                } else {
                    graph.constant(t.clone())
                }
            })
            .collect();
        Bound {
            graph: graph.clone(),
            vars,
        }
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn var(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }

    /// Substitute the variable used for one parameter, e.g. a perturbed copy in
    /// a finite-difference check.
    pub fn replace(&mut self, id: ParamId, var: Var) {
        assert_eq!(var.shape(), self.vars[id.0].shape(), "replacement must keep the shape");
        self.vars[id.0] = var;
    }

    /// Gradient of every parameter in store order (zeros when unused).
    pub fn gradients(&self, grads: &Gradients) -> Vec<Tensor> {
        self.vars.iter().map(|v| grads.get_or_zeros(v)).collect()
    }
}

/// Registers parameters under a name prefix with seeded initialization.
pub struct Builder<'a> {
    store: &'a mut ParameterStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> Builder<'a> {
    pub fn new(store: &'a mut ParameterStore, rng: &'a mut ChaCha8Rng) -> Self {
        Builder {
            store,
            rng,
            prefix: String::new(),
        }
    }

    /// A builder whose parameter names are nested under `name`.
    pub fn sub(&mut self, name: impl std::fmt::Display) -> Builder<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Builder {
            store: &mut *self.store,
            rng: &mut *self.rng,
            prefix,
        }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<ParamId> {
        let full = self.full_name(name);
        self.store.add(full, Tensor::full(shape, value))
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<ParamId> {
        let full = self.full_name(name);
        let rng = &mut *self.rng;
        let t = Tensor::from_fn(shape, |_| rng.gen_range(-bound..=bound));
        self.store.add(full, t)
    }
}

/// Seeded generator for parameter initialization.
pub fn init_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// 2-D convolution layer.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub geometry: ConvGeometry,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Conv2d {
    /// Uniform initialization in `±1/sqrt(fan_in)` for weights and bias.
    pub fn new(
        b: &mut Builder,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        geometry: ConvGeometry,
        bias: bool,
    ) -> Result<Self> {
        if !cin.is_multiple_of(geometry.groups) || !cout.is_multiple_of(geometry.groups) {
            return Err(Error::Config(format!(
                "{name}: {cin}->{cout} channels not divisible by {} groups",
                geometry.groups
            )));
        }
        let fan_in = cin / geometry.groups * kernel * kernel;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut b = b.sub(name);
        let weight = b.uniform("weight", &[cout, cin / geometry.groups, kernel, kernel], bound)?;
        let bias = if bias {
            Some(b.uniform("bias", &[cout], bound)?)
        } else {
            None
        };
        Ok(Conv2d {
            weight,
            bias,
            geometry,
            in_channels: cin,
            out_channels: cout,
        })
    }

    /// Same-size `k x k` convolution with bias.
    pub fn same(b: &mut Builder, name: &str, cin: usize, cout: usize, k: usize) -> Result<Self> {
        let geo = ConvGeometry {
            padding: k / 2,
            ..Default::default()
        };
        Self::new(b, name, cin, cout, k, geo, true)
    }

    /// Same-size depth-wise `3 x 3` convolution with bias.
    pub fn depthwise3(b: &mut Builder, name: &str, channels: usize) -> Result<Self> {
        let geo = ConvGeometry {
            padding: 1,
            groups: channels,
            ..Default::default()
        };
        Self::new(b, name, channels, channels, 3, geo, true)
    }

    pub fn forward(&self, p: &Bound, x: &Var) -> Var {
        x.conv2d(p.var(self.weight), self.bias.map(|b| p.var(b)), self.geometry)
    }

    /// Set weights to zero and the bias (if any) to `bias`.
    pub fn zero(&self, store: &mut ParameterStore, bias: f64) {
        store.fill(self.weight, 0.0);
        if let Some(b) = self.bias {
            store.fill(b, bias);
        }
    }
}

/// Layer normalization over channels at every pixel.
#[derive(Debug, Clone)]
pub struct LayerNorm2d {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl LayerNorm2d {
    pub const EPS: f64 = 1e-6;

    pub fn new(b: &mut Builder, name: &str, channels: usize) -> Result<Self> {
        let mut b = b.sub(name);
        Ok(LayerNorm2d {
            weight: b.constant("weight", &[channels], 1.0)?,
            bias: b.constant("bias", &[channels], 0.0)?,
        })
    }

    pub fn forward(&self, p: &Bound, x: &Var) -> Var {
        x.layer_norm_channels(p.var(self.weight), p.var(self.bias), Self::EPS)
    }
}

/// Global average over the spatial axes, `N x C x 1 x 1`.
pub fn global_avg_pool(x: &Var) -> Var {
    adaptive_avg_pool(x, 1, 1)
}

/// Adaptive average pooling to a `gh x gw` grid.
pub fn adaptive_avg_pool(x: &Var, gh: usize, gw: usize) -> Var {
    let (_, _, h, w) = x.dims4();
    x.resample(
        &Rc::new(AxisResample::adaptive_avg(h, gh)),
        &Rc::new(AxisResample::adaptive_avg(w, gw)),
    )
}

/// Bilinear resize (half-pixel centres) of every plane.
pub fn upsample_bilinear(x: &Var, oh: usize, ow: usize) -> Var {
    let (_, _, h, w) = x.dims4();
    if (h, w) == (oh, ow) {
        return x.clone();
    }
    x.resample(
        &Rc::new(AxisResample::bilinear(h, oh)),
        &Rc::new(AxisResample::bilinear(w, ow)),
    )
}

/// Squeeze-and-excitation channel reweighting.
#[derive(Debug, Clone)]
pub struct SqueezeExcite {
    pub reduce: Conv2d,
    pub expand: Conv2d,
}

impl SqueezeExcite {
    pub fn new(b: &mut Builder, name: &str, channels: usize, reduction: usize) -> Result<Self> {
        let hidden = (channels / reduction.max(1)).max(1);
        let mut b = b.sub(name);
        Ok(SqueezeExcite {
            reduce: Conv2d::new(&mut b, "reduce", channels, hidden, 1, ConvGeometry::default(), true)?,
            expand: Conv2d::new(&mut b, "expand", hidden, channels, 1, ConvGeometry::default(), true)?,
        })
    }

    /// Per-channel gate in `(0, 1)`, shape `N x C x 1 x 1`.
    pub fn gate(&self, p: &Bound, x: &Var) -> Var {
        let s = self.reduce.forward(p, &global_avg_pool(x)).gelu();
        self.expand.forward(p, &s).sigmoid()
    }

    pub fn forward(&self, p: &Bound, x: &Var) -> Var {
        x.mul_channel(&self.gate(p, x))
    }
}

/// Modulated deformable `3 x 3` convolution whose offsets and modulation are
/// predicted by a zero-initialized `3 x 3` convolution. The modulation is
/// `2 * sigmoid(m)`, which is exactly 1 at initialization.
#[derive(Debug, Clone)]
pub struct DeformConv {
    pub offsets: Conv2d,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl DeformConv {
    pub fn new(b: &mut Builder, name: &str, cin: usize, cout: usize) -> Result<Self> {
        let mut b = b.sub(name);
        let offsets = Conv2d::same(&mut b, "offsets", cin, 27, 3)?;
        b.store.fill(offsets.weight, 0.0);
        b.store.fill(offsets.bias.expect("has bias"), 0.0);
        let bound = 1.0 / ((cin * 9) as f64).sqrt();
        Ok(DeformConv {
            offsets,
            weight: b.uniform("weight", &[cout, cin, 3, 3], bound)?,
            bias: b.uniform("bias", &[cout], bound)?,
        })
    }

    pub fn forward(&self, p: &Bound, x: &Var) -> Var {
        let om = self.offsets.forward(p, x);
        let offset = om.slice_channels(0, 18);
        let modulation = om.slice_channels(18, 9).sigmoid().mul_scalar(2.0);
        x.deform_conv3x3(&offset, &modulation, p.var(self.weight), Some(p.var(self.bias)))
    }
}

/// Either a deformable or a standard `3 x 3` convolution.
#[derive(Debug, Clone)]
pub enum Conv3x3 {
    Deformable(DeformConv),
    Standard(Conv2d),
}

impl Conv3x3 {
    pub fn new(b: &mut Builder, name: &str, cin: usize, cout: usize, deformable: bool) -> Result<Self> {
        Ok(if deformable {
            Conv3x3::Deformable(DeformConv::new(b, name, cin, cout)?)
        } else {
            Conv3x3::Standard(Conv2d::same(b, name, cin, cout, 3)?)
        })
    }

    pub fn forward(&self, p: &Bound, x: &Var) -> Var {
        match self {
            Conv3x3::Deformable(d) => d.forward(p, x),
            Conv3x3::Standard(c) => c.forward(p, x),
        }
    }
}
