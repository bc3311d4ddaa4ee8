use std::rc::Rc;

use super::{Graph, Var};
use crate::resample::{apply_separable, apply_separable_transpose, AxisResample};
use crate::tensor::Tensor;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Var {
    fn assert_same_graph(&self, other: &Var) {
        debug_assert!(Rc::ptr_eq(&self.graph.0, &other.graph.0), "vars from different graphs");
    }

    pub fn add(&self, other: &Var) -> Var {
        self.assert_same_graph(other);
        let value = self.value.zip_map(&other.value, |a, b| a + b);
        self.graph
            .record(value, &[self, other], |g| vec![Some(g.clone()), Some(g.clone())])
    }

    pub fn sub(&self, other: &Var) -> Var {
        self.assert_same_graph(other);
        let value = self.value.zip_map(&other.value, |a, b| a - b);
        self.graph
            .record(value, &[self, other], |g| vec![Some(g.clone()), Some(g.map(|v| -v))])
    }

    pub fn mul(&self, other: &Var) -> Var {
        self.assert_same_graph(other);
        let value = self.value.zip_map(&other.value, |a, b| a * b);
        let (a, b) = (self.value.clone(), other.value.clone());
        let (ta, tb) = (self.requires_grad(), other.requires_grad());
        self.graph.record(value, &[self, other], move |g| {
            vec![
                ta.then(|| g.zip_map(&b, |g, b| g * b)),
                tb.then(|| g.zip_map(&a, |g, a| g * a)),
            ]
        })
    }

    pub fn div(&self, other: &Var) -> Var {
        self.assert_same_graph(other);
        let value = self.value.zip_map(&other.value, |a, b| a / b);
        let (a, b) = (self.value.clone(), other.value.clone());
        let (ta, tb) = (self.requires_grad(), other.requires_grad());
        self.graph.record(value, &[self, other], move |g| {
            let ga = ta.then(|| g.zip_map(&b, |g, b| g / b));
            let gb = tb.then(|| {
                let mut out = g.zip_map(&a, |g, a| g * a);
                for (o, b) in out.data_mut().iter_mut().zip(b.data()) {
                    *o = -*o / (b * b);
                }
                out
            });
            vec![ga, gb]
        })
    }

    pub fn add_scalar(&self, s: f64) -> Var {
        let value = self.value.map(|v| v + s);
        self.graph.record(value, &[self], |g| vec![Some(g.clone())])
    }

    pub fn mul_scalar(&self, s: f64) -> Var {
        let value = self.value.map(|v| v * s);
        self.graph.record(value, &[self], move |g| vec![Some(g.map(|v| v * s))])
    }

    pub fn square(&self) -> Var {
        self.mul(self)
    }

    pub fn gelu(&self) -> Var {
        let value = self.value.map(gelu);
        let x = self.value.clone();
        self.graph
            .record(value, &[self], move |g| vec![Some(g.zip_map(&x, |g, x| g * gelu_grad(x)))])
    }

    pub fn sigmoid(&self) -> Var {
        let value = self.value.map(sigmoid);
        let y = value.clone();
        self.graph
            .record(value, &[self], move |g| vec![Some(g.zip_map(&y, |g, y| g * y * (1.0 - y)))])
    }

    /// Clamp to `[lo, hi]`; the gradient is passed only where the input was inside.
    pub fn clamp(&self, lo: f64, hi: f64) -> Var {
        let value = self.value.map(|v| v.clamp(lo, hi));
        let x = self.value.clone();
        self.graph.record(value, &[self], move |g| {
            vec![Some(g.zip_map(&x, |g, x| if x >= lo && x <= hi { g } else { 0.0 }))]
        })
    }

    pub fn reshape(&self, shape: &[usize]) -> Var {
        let old = self.value.shape().to_vec();
        let value = (*self.value).clone().reshape(shape);
        self.graph
            .record(value, &[self], move |g| vec![Some(g.clone().reshape(&old))])
    }

    pub fn sum(&self) -> Var {
        let value = Tensor::scalar(self.value.sum());
        let shape = self.value.shape().to_vec();
        self.graph
            .record(value, &[self], move |g| vec![Some(Tensor::full(&shape, g.item()))])
    }

    pub fn mean(&self) -> Var {
        let n = self.value.numel() as f64;
        let value = Tensor::scalar(self.value.sum() / n);
        let shape = self.value.shape().to_vec();
        self.graph
            .record(value, &[self], move |g| vec![Some(Tensor::full(&shape, g.item() / n))])
    }

    /// `x / alpha` for a single-element `alpha`.
    pub fn div_by_scalar_var(&self, alpha: &Var) -> Var {
        assert_eq!(alpha.value.numel(), 1);
        let a = alpha.value.item();
        let value = self.value.map(|v| v / a);
        let x = self.value.clone();
        let (tx, ta) = (self.requires_grad(), alpha.requires_grad());
        self.graph.record(value, &[self, alpha], move |g| {
            let gx = tx.then(|| g.map(|v| v / a));
            let ga = ta.then(|| {
                let dot: f64 = g.data().iter().zip(x.data()).map(|(g, x)| g * x).sum();
                Tensor::scalar(-dot / (a * a))
            });
            vec![gx, ga]
        })
    }

    /// Multiply each channel plane of an `N x C x H x W` tensor by `scale[n, c]`
    /// (shape `N x C x 1 x 1`).
    pub fn mul_channel(&self, scale: &Var) -> Var {
        let (n, c, h, w) = self.dims4();
        assert_eq!(scale.shape(), &[n, c, 1, 1], "channel scale shape");
        let hw = h * w;
        let mut out = (*self.value).clone();
        for (plane, &s) in out.data_mut().chunks_mut(hw).zip(scale.value.data()) {
            plane.iter_mut().for_each(|v| *v *= s);
        }
        let (x, s) = (self.value.clone(), scale.value.clone());
        let (tx, ts) = (self.requires_grad(), scale.requires_grad());
        self.graph.record(out, &[self, scale], move |g| {
            let gx = tx.then(|| {
                let mut gx = g.clone();
                for (plane, &s) in gx.data_mut().chunks_mut(hw).zip(s.data()) {
                    plane.iter_mut().for_each(|v| *v *= s);
                }
                gx
            });
            let gs = ts.then(|| {
                let data = g
                    .data()
                    .chunks(hw)
                    .zip(x.data().chunks(hw))
                    .map(|(gp, xp)| gp.iter().zip(xp).map(|(a, b)| a * b).sum())
                    .collect();
                Tensor::new(&[n, c, 1, 1], data)
            });
            vec![gx, gs]
        })
    }

    /// Multiply every channel of `N x C x H x W` by a single-channel map `N x 1 x H x W`.
    pub fn mul_spatial(&self, map: &Var) -> Var {
        let (n, c, h, w) = self.dims4();
        assert_eq!(map.shape(), &[n, 1, h, w], "spatial map shape");
        let hw = h * w;
        let mut out = (*self.value).clone();
        for (i, plane) in out.data_mut().chunks_mut(hw).enumerate() {
            let m = &map.value.data()[(i / c) * hw..(i / c + 1) * hw];
            plane.iter_mut().zip(m).for_each(|(v, m)| *v *= m);
        }
        let (x, m) = (self.value.clone(), map.value.clone());
        let (tx, tm) = (self.requires_grad(), map.requires_grad());
        self.graph.record(out, &[self, map], move |g| {
            let gx = tx.then(|| {
                let mut gx = g.clone();
                for (i, plane) in gx.data_mut().chunks_mut(hw).enumerate() {
                    let mm = &m.data()[(i / c) * hw..(i / c + 1) * hw];
                    plane.iter_mut().zip(mm).for_each(|(v, m)| *v *= m);
                }
                gx
            });
            let gm = tm.then(|| {
                let mut gm = Tensor::zeros(&[n, 1, h, w]);
                for (i, (gp, xp)) in g.data().chunks(hw).zip(x.data().chunks(hw)).enumerate() {
                    let dst = &mut gm.data_mut()[(i / c) * hw..(i / c + 1) * hw];
                    for ((d, a), b) in dst.iter_mut().zip(gp).zip(xp) {
                        *d += a * b;
                    }
                }
                gm
            });
            vec![gx, gm]
        })
    }

    /// Concatenate `N x C_i x H x W` tensors along channels.
    pub fn concat_channels(parts: &[&Var]) -> Var {
        assert!(!parts.is_empty());
        let (n, _, h, w) = parts[0].dims4();
        let hw = h * w;
        let chans: Vec<usize> = parts
            .iter()
            .map(|p| {
                let (pn, pc, ph, pw) = p.dims4();
                assert_eq!((pn, ph, pw), (n, h, w), "concat spatial mismatch");
                pc
            })
            .collect();
        let total: usize = chans.iter().sum();
        let mut data = Vec::with_capacity(n * total * hw);
        for b in 0..n {
            for (p, &c) in parts.iter().zip(&chans) {
                data.extend_from_slice(&p.value.data()[b * c * hw..(b + 1) * c * hw]);
            }
        }
        let value = Tensor::new(&[n, total, h, w], data);
        let graph = parts[0].graph.clone();
        graph.record(value, parts, move |g| {
            let mut grads: Vec<Vec<f64>> = chans.iter().map(|&c| Vec::with_capacity(n * c * hw)).collect();
            let mut off = 0;
            for _ in 0..n {
                for (gi, &c) in grads.iter_mut().zip(&chans) {
                    gi.extend_from_slice(&g.data()[off..off + c * hw]);
                    off += c * hw;
                }
            }
            grads
                .into_iter()
                .zip(&chans)
                .map(|(d, &c)| Some(Tensor::new(&[n, c, h, w], d)))
                .collect()
        })
    }

    /// Channels `start .. start + len` of an `N x C x H x W` tensor.
    pub fn slice_channels(&self, start: usize, len: usize) -> Var {
        let (n, c, h, w) = self.dims4();
        assert!(start + len <= c, "channel slice out of range");
        let hw = h * w;
        let mut data = Vec::with_capacity(n * len * hw);
        for b in 0..n {
            let base = (b * c + start) * hw;
            data.extend_from_slice(&self.value.data()[base..base + len * hw]);
        }
        let value = Tensor::new(&[n, len, h, w], data);
        self.graph.record(value, &[self], move |g| {
            let mut gx = Tensor::zeros(&[n, c, h, w]);
            for b in 0..n {
                let base = (b * c + start) * hw;
                gx.data_mut()[base..base + len * hw]
                    .copy_from_slice(&g.data()[b * len * hw..(b + 1) * len * hw]);
            }
            vec![Some(gx)]
        })
    }

    /// Apply separable linear operators to every plane of an `N x C x H x W` tensor.
    pub fn resample(&self, rows: &Rc<AxisResample>, cols: &Rc<AxisResample>) -> Var {
        let (n, c, h, w) = self.dims4();
        let (oh, ow) = (rows.out_len(), cols.out_len());
        let mut out = Tensor::zeros(&[n, c, oh, ow]);
        for (src, dst) in self
            .value
            .data()
            .chunks(h * w)
            .zip(out.data_mut().chunks_mut(oh * ow))
        {
            apply_separable(src, h, w, rows, cols, dst);
        }
        let (rows, cols) = (rows.clone(), cols.clone());
        self.graph.record(out, &[self], move |g| {
            let mut gx = Tensor::zeros(&[n, c, h, w]);
            for (src, dst) in g.data().chunks(oh * ow).zip(gx.data_mut().chunks_mut(h * w)) {
                apply_separable_transpose(src, &rows, &cols, dst);
            }
            vec![Some(gx)]
        })
    }

    /// Per-pixel layer normalization across channels with a per-channel affine map.
    pub fn layer_norm_channels(&self, weight: &Var, bias: &Var, eps: f64) -> Var {
        let (n, c, h, w) = self.dims4();
        assert_eq!(weight.value.numel(), c);
        assert_eq!(bias.value.numel(), c);
        let hw = h * w;
        let x = self.value.data();
        let mut xhat = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; n * hw];
        for b in 0..n {
            let base = b * c * hw;
            for p in 0..hw {
                let mut mean = 0.0;
                for ch in 0..c {
                    mean += x[base + ch * hw + p];
                }
                mean /= c as f64;
                let mut var = 0.0;
                for ch in 0..c {
                    let d = x[base + ch * hw + p] - mean;
                    var += d * d;
                }
                var /= c as f64;
                let is = 1.0 / (var + eps).sqrt();
                inv_std[b * hw + p] = is;
                for ch in 0..c {
                    xhat[base + ch * hw + p] = (x[base + ch * hw + p] - mean) * is;
                }
            }
        }
        let wv = weight.value.data();
        let bv = bias.value.data();
        let mut out = vec![0.0; x.len()];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * hw;
                for p in 0..hw {
                    out[off + p] = xhat[off + p] * wv[ch] + bv[ch];
                }
            }
        }
        let value = Tensor::new(&[n, c, h, w], out);
        let wt = weight.value.clone();
        let wshape = weight.shape().to_vec();
        let (tx, tw, tb) = (self.requires_grad(), weight.requires_grad(), bias.requires_grad());
        self.graph.record(value, &[self, weight, bias], move |g| {
            let gd = g.data();
            let wv = wt.data();
            let mut gw = vec![0.0; c];
            let mut gb = vec![0.0; c];
            for b in 0..n {
                for ch in 0..c {
                    let off = (b * c + ch) * hw;
                    for p in 0..hw {
                        gw[ch] += gd[off + p] * xhat[off + p];
                        gb[ch] += gd[off + p];
                    }
                }
            }
            let gx = tx.then(|| {
                let mut gx = vec![0.0; n * c * hw];
                for b in 0..n {
                    let base = b * c * hw;
                    for p in 0..hw {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for ch in 0..c {
                            let i = base + ch * hw + p;
                            let dy = gd[i] * wv[ch];
                            m1 += dy;
                            m2 += dy * xhat[i];
                        }
                        m1 /= c as f64;
                        m2 /= c as f64;
                        let is = inv_std[b * hw + p];
                        for ch in 0..c {
                            let i = base + ch * hw + p;
                            let dy = gd[i] * wv[ch];
                            gx[i] = is * (dy - m1 - xhat[i] * m2);
                        }
                    }
                }
                Tensor::new(&[n, c, h, w], gx)
            });
            vec![
                gx,
                tw.then(|| Tensor::new(&wshape, gw)),
                tb.then(|| Tensor::new(&wshape, gb)),
            ]
        })
    }

    /// Mean SmoothL1 (Huber with threshold `beta`) against a constant target.
    pub fn smooth_l1_mean(&self, target: &Tensor, beta: f64) -> Var {
        assert_eq!(self.shape(), target.shape(), "smooth-l1 shape mismatch");
        let n = self.value.numel() as f64;
        let total: f64 = self
            .value
            .data()
            .iter()
            .zip(target.data())
            .map(|(p, t)| {
                let d = (p - t).abs();
                if d < beta {
                    0.5 * d * d / beta
                } else {
                    d - 0.5 * beta
                }
            })
            .sum();
        let value = Tensor::scalar(total / n);
        let (p, t) = (self.value.clone(), target.clone());
        self.graph.record(value, &[self], move |g| {
            let s = g.item() / n;
            vec![Some(p.zip_map(&t, |p, t| {
                let d = p - t;
                if d.abs() < beta {
                    s * d / beta
                } else {
                    s * d.signum()
                }
            }))]
        })
    }
}

impl Graph {
    /// Convenience: a constant filled with `value`.
    pub fn full(&self, shape: &[usize], value: f64) -> Var {
        self.constant(Tensor::full(shape, value))
    }
}
