//! Batched matrix products, softmax, and fused multi-head axial attention.

use super::conv::gemm;
use super::Var;
use crate::tensor::Tensor;

/// Axis along which axial attention forms its sequences.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionAxis {
    /// Each column is a sequence over rows.
    Height,
    /// Each row is a sequence over columns.
    Width,
}

fn dims3(t: &Tensor) -> (usize, usize, usize) {
    assert_eq!(t.shape().len(), 3, "expected a rank-3 tensor, got {:?}", t.shape());
    (t.shape()[0], t.shape()[1], t.shape()[2])
}

/// Strides of `op(X)` where `X` is `rows x cols` row-major.
fn op_strides(cols: usize, trans: bool) -> (usize, usize) {
    if trans {
        (1, cols)
    } else {
        (cols, 1)
    }
}

fn op_dims(r: usize, c: usize, trans: bool) -> (usize, usize) {
    if trans {
        (c, r)
    } else {
        (r, c)
    }
}

fn softmax_rows(data: &mut [f64], len: usize) {
    for row in data.chunks_mut(len) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = 1.0 / sum;
        row.iter_mut().for_each(|v| *v *= inv);
    }
}

/// `g_in = y * (g - sum(g * y))` row by row.
fn softmax_rows_backward(y: &[f64], g: &[f64], len: usize, out: &mut [f64]) {
    for ((yr, gr), or) in y.chunks(len).zip(g.chunks(len)).zip(out.chunks_mut(len)) {
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for ((o, &yv), &gv) in or.iter_mut().zip(yr).zip(gr) {
            *o = yv * (gv - dot);
        }
    }
}

impl Var {
    /// Batched `op(self) * op(other)` over rank-3 tensors `B x rows x cols`.
    pub fn matmul(&self, other: &Var, trans_a: bool, trans_b: bool) -> Var {
        let (ba, ra, ca) = dims3(self.value());
        let (bb, rb, cb) = dims3(other.value());
        assert_eq!(ba, bb, "batch mismatch");
        let (m, k) = op_dims(ra, ca, trans_a);
        let (k2, n) = op_dims(rb, cb, trans_b);
        assert_eq!(k, k2, "inner dimension mismatch");
        let sa = op_strides(ca, trans_a);
        let sb = op_strides(cb, trans_b);
        let mut out = Tensor::zeros(&[ba, m, n]);
        for i in 0..ba {
            gemm(
                m,
                k,
                n,
                &self.value().data()[i * ra * ca..(i + 1) * ra * ca],
                sa,
                &other.value().data()[i * rb * cb..(i + 1) * rb * cb],
                sb,
                0.0,
                &mut out.data_mut()[i * m * n..(i + 1) * m * n],
                (n, 1),
            );
        }
        let (a, b) = (self.value.clone(), other.value.clone());
        let (ta, tb) = (self.requires_grad(), other.requires_grad());
        self.graph.record(out, &[self, other], move |g| {
            let gd = g.data();
            let ga = ta.then(|| {
                // d op(A) = G * op(B)^T, written through op(A)'s layout
                let mut ga = Tensor::zeros(a.shape());
                let dst = op_strides(ca, trans_a);
                for i in 0..ba {
                    gemm(
                        m,
                        n,
                        k,
                        &gd[i * m * n..(i + 1) * m * n],
                        (n, 1),
                        &b.data()[i * rb * cb..(i + 1) * rb * cb],
                        (sb.1, sb.0),
                        0.0,
                        &mut ga.data_mut()[i * ra * ca..(i + 1) * ra * ca],
                        dst,
                    );
                }
                ga
            });
            let gb = tb.then(|| {
                // d op(B) = op(A)^T * G
                let mut gb = Tensor::zeros(b.shape());
                let dst = op_strides(cb, trans_b);
                for i in 0..ba {
                    gemm(
                        k,
                        m,
                        n,
                        &a.data()[i * ra * ca..(i + 1) * ra * ca],
                        (sa.1, sa.0),
                        &gd[i * m * n..(i + 1) * m * n],
                        (n, 1),
                        0.0,
                        &mut gb.data_mut()[i * rb * cb..(i + 1) * rb * cb],
                        dst,
                    );
                }
                gb
            });
            vec![ga, gb]
        })
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&self) -> Var {
        let len = *self.shape().last().expect("softmax of a scalar");
        let mut out = (*self.value).clone();
        softmax_rows(out.data_mut(), len);
        let y = out.clone();
        self.graph.record(out, &[self], move |g| {
            let mut gx = Tensor::zeros(y.shape());
            softmax_rows_backward(y.data(), g.data(), len, gx.data_mut());
            vec![Some(gx)]
        })
    }

    /// Multi-head self-attention along one spatial axis.
    ///
    /// `self` is `N x 3C x H x W` holding queries, keys and values stacked on
    /// the channel axis. Each head uses `C / heads` channels and a `1/sqrt(d)`
    /// score scale. The result is `N x C x H x W`. The backward pass recomputes
    /// the attention weights instead of storing them.
    pub fn axial_attention(&self, heads: usize, axis: AttentionAxis) -> Var {
        let (n, c3, h, w) = self.dims4();
        assert!(c3 % 3 == 0, "qkv channels must be a multiple of 3");
        let c = c3 / 3;
        assert!(heads >= 1 && c % heads == 0, "heads must divide channels");
        let geo = AxialGeometry::new(n, c, h, w, heads, axis);
        let mut out = Tensor::zeros(&[n, c, h, w]);
        let mut ws = Workspace::new(&geo);
        geo.for_each_sequence(|seq| {
            ws.gather(&geo, self.value().data(), seq);
            ws.probabilities(&geo);
            // O = P V
            gemm(geo.len, geo.len, geo.d, &ws.p, (geo.len, 1), &ws.v, (geo.d, 1), 0.0, &mut ws.o, (geo.d, 1));
            geo.scatter_plane(&ws.o, out.data_mut(), geo.c, seq, 0);
        });
        let x = self.value.clone();
        self.graph.record(out, &[self], move |g| {
            let mut gx = Tensor::zeros(x.shape());
            let mut ws = Workspace::new(&geo);
            let l = geo.len;
            let d = geo.d;
            let mut go = vec![0.0; l * d];
            let mut dp = vec![0.0; l * l];
            let mut ds = vec![0.0; l * l];
            let mut dq = vec![0.0; l * d];
            let mut dk = vec![0.0; l * d];
            let mut dv = vec![0.0; l * d];
            geo.for_each_sequence(|seq| {
                ws.gather(&geo, x.data(), seq);
                ws.probabilities(&geo);
                geo.gather_plane(g.data(), geo.c, seq, 0, &mut go);
                // dV = P^T dO
                gemm(l, l, d, &ws.p, (1, l), &go, (d, 1), 0.0, &mut dv, (d, 1));
                // dP = dO V^T
                gemm(l, d, l, &go, (d, 1), &ws.v, (1, d), 0.0, &mut dp, (l, 1));
                softmax_rows_backward(&ws.p, &dp, l, &mut ds);
                ds.iter_mut().for_each(|v| *v *= geo.scale);
                // dQ = dS K, dK = dS^T Q
                gemm(l, l, d, &ds, (l, 1), &ws.k, (d, 1), 0.0, &mut dq, (d, 1));
                gemm(l, l, d, &ds, (1, l), &ws.q, (d, 1), 0.0, &mut dk, (d, 1));
                let gd = gx.data_mut();
                geo.scatter_plane(&dq, gd, 3 * geo.c, seq, 0);
                geo.scatter_plane(&dk, gd, 3 * geo.c, seq, geo.c);
                geo.scatter_plane(&dv, gd, 3 * geo.c, seq, 2 * geo.c);
            });
            vec![Some(gx)]
        })
    }
}

/// Attention weights of every head and sequence, shaped
/// `[N * heads * sequences, L, L]` where `L` is the attended axis length.
pub fn attention_probabilities(qkv: &Tensor, heads: usize, axis: AttentionAxis) -> Tensor {
    let (n, c3, h, w) = qkv.dims4();
    let geo = AxialGeometry::new(n, c3 / 3, h, w, heads, axis);
    let mut ws = Workspace::new(&geo);
    let l = geo.len;
    let mut out = Vec::new();
    geo.for_each_sequence(|seq| {
        ws.gather(&geo, qkv.data(), seq);
        ws.probabilities(&geo);
        out.extend_from_slice(&ws.p);
    });
    let count = out.len() / (l * l);
    Tensor::new(&[count, l, l], out)
}

#[derive(Clone, Copy)]
struct AxialGeometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    heads: usize,
    d: usize,
    len: usize,
    axis: AttentionAxis,
    scale: f64,
}

#[derive(Clone, Copy)]
struct Sequence {
    batch: usize,
    head: usize,
    /// Index along the non-attended axis.
    line: usize,
}

impl AxialGeometry {
    fn new(n: usize, c: usize, h: usize, w: usize, heads: usize, axis: AttentionAxis) -> Self {
        let d = c / heads;
        let len = match axis {
            AttentionAxis::Height => h,
            AttentionAxis::Width => w,
        };
        AxialGeometry {
            n,
            c,
            h,
            w,
            heads,
            d,
            len,
            axis,
            scale: 1.0 / (d as f64).sqrt(),
        }
    }

    fn lines(&self) -> usize {
        match self.axis {
            AttentionAxis::Height => self.w,
            AttentionAxis::Width => self.h,
        }
    }

    fn for_each_sequence(&self, mut f: impl FnMut(Sequence)) {
        for batch in 0..self.n {
            for head in 0..self.heads {
                for line in 0..self.lines() {
                    f(Sequence { batch, head, line });
                }
            }
        }
    }

    /// Offset of sequence position `t` inside a channel plane, and the stride between positions.
    fn plane_offset(&self, seq: Sequence) -> (usize, usize) {
        match self.axis {
            AttentionAxis::Height => (seq.line, self.w),
            AttentionAxis::Width => (seq.line * self.w, 1),
        }
    }

    /// Copy a head's `L x d` block out of a tensor with `channels` channels,
    /// starting at channel `first + head * d`.
    fn gather_plane(&self, src: &[f64], channels: usize, seq: Sequence, first: usize, dst: &mut [f64]) {
        let hw = self.h * self.w;
        let (off, stride) = self.plane_offset(seq);
        for i in 0..self.d {
            let ch = first + seq.head * self.d + i;
            let plane = &src[(seq.batch * channels + ch) * hw..];
            for t in 0..self.len {
                dst[t * self.d + i] = plane[off + t * stride];
            }
        }
    }

    fn scatter_plane(&self, src: &[f64], dst: &mut [f64], channels: usize, seq: Sequence, first: usize) {
        let hw = self.h * self.w;
        let (off, stride) = self.plane_offset(seq);
        for i in 0..self.d {
            let ch = first + seq.head * self.d + i;
            let plane = &mut dst[(seq.batch * channels + ch) * hw..];
            for t in 0..self.len {
                plane[off + t * stride] += src[t * self.d + i];
            }
        }
    }
}

struct Workspace {
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    p: Vec<f64>,
    o: Vec<f64>,
}

impl Workspace {
    fn new(geo: &AxialGeometry) -> Self {
        let ld = geo.len * geo.d;
        Workspace {
            q: vec![0.0; ld],
            k: vec![0.0; ld],
            v: vec![0.0; ld],
            p: vec![0.0; geo.len * geo.len],
            o: vec![0.0; ld],
        }
    }

    fn gather(&mut self, geo: &AxialGeometry, qkv: &[f64], seq: Sequence) {
        geo.gather_plane(qkv, 3 * geo.c, seq, 0, &mut self.q);
        geo.gather_plane(qkv, 3 * geo.c, seq, geo.c, &mut self.k);
        geo.gather_plane(qkv, 3 * geo.c, seq, 2 * geo.c, &mut self.v);
    }

    /// `P = softmax(scale * Q K^T)` row-wise.
    fn probabilities(&mut self, geo: &AxialGeometry) {
        let (l, d) = (geo.len, geo.d);
        gemm(l, d, l, &self.q, (d, 1), &self.k, (1, d), 0.0, &mut self.p, (l, 1));
        self.p.iter_mut().for_each(|v| *v *= geo.scale);
        softmax_rows(&mut self.p, l);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Graph;
    use crate::gradcheck::check_input;
    use rand::{Rng, SeedableRng};

    fn rand_tensor(shape: &[usize], seed: u64, scale: f64) -> Tensor {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-scale..scale))
    }

    fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for t in 0..k {
                    out[i * n + j] += a[i * k + t] * b[t * n + j];
                }
            }
        }
        out
    }

    fn transpose(a: &[f64], r: usize, c: usize) -> Vec<f64> {
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = a[i * c + j];
            }
        }
        out
    }

    #[test]
    fn matmul_matches_naive_for_all_transposes() {
        let (m, k, n) = (3, 4, 5);
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let a_shape = if ta { [2, k, m] } else { [2, m, k] };
            let b_shape = if tb { [2, n, k] } else { [2, k, n] };
            let a = rand_tensor(&a_shape, 1, 1.0);
            let b = rand_tensor(&b_shape, 2, 1.0);
            let g = Graph::inference();
            let y = g.constant(a.clone()).matmul(&g.constant(b.clone()), ta, tb);
            for i in 0..2 {
                let ai = &a.data()[i * m * k..(i + 1) * m * k];
                let bi = &b.data()[i * k * n..(i + 1) * k * n];
                let ai = if ta { transpose(ai, k, m) } else { ai.to_vec() };
                let bi = if tb { transpose(bi, n, k) } else { bi.to_vec() };
                let expect = naive_matmul(&ai, &bi, m, k, n);
                for (x, e) in y.value().data()[i * m * n..(i + 1) * m * n].iter().zip(&expect) {
                    assert!((x - e).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn matmul_gradients() {
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let a_shape = if ta { [2, 4, 3] } else { [2, 3, 4] };
            let b_shape = if tb { [2, 5, 4] } else { [2, 4, 5] };
            let a = rand_tensor(&a_shape, 3, 1.0);
            let b = rand_tensor(&b_shape, 4, 1.0);
            let r = rand_tensor(&[2, 3, 5], 5, 1.0);
            let fa = |g: &Graph, x: &Var| {
                x.matmul(&g.constant(b.clone()), ta, tb).mul(&g.constant(r.clone())).sum()
            };
            let fb = |g: &Graph, x: &Var| {
                g.constant(a.clone()).matmul(x, ta, tb).mul(&g.constant(r.clone())).sum()
            };
            assert!(check_input(&fa, &a, &[], 1e-4) < 1e-7);
            assert!(check_input(&fb, &b, &[], 1e-4) < 1e-7);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_and_gradient() {
        let x = rand_tensor(&[2, 3, 6], 6, 5.0);
        let g = Graph::inference();
        let y = g.constant(x.clone()).softmax_last();
        for row in y.value().data().chunks(6) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let r = rand_tensor(&[2, 3, 6], 7, 1.0);
        let f = |g: &Graph, v: &Var| v.softmax_last().mul(&g.constant(r.clone())).sum();
        assert!(check_input(&f, &x, &[], 1e-6) < 1e-6);
    }

    #[test]
    fn softmax_handles_large_logits() {
        let x = Tensor::new(&[1, 3], vec![1000.0, 999.0, -1000.0]);
        let g = Graph::inference();
        let y = g.constant(x).softmax_last();
        assert!(y.value().all_finite());
        assert!((y.value().sum() - 1.0).abs() < 1e-12);
    }

    // Direct per-sequence attention used as the reference.
    fn attention_oracle(qkv: &Tensor, heads: usize, axis: AttentionAxis) -> Tensor {
        let (n, c3, h, w) = qkv.dims4();
        let c = c3 / 3;
        let d = c / heads;
        let at = |b: usize, ch: usize, y: usize, x: usize| qkv.data()[((b * c3 + ch) * h + y) * w + x];
        let mut out = Tensor::zeros(&[n, c, h, w]);
        for b in 0..n {
            for hd in 0..heads {
                for y in 0..h {
                    for x in 0..w {
                        let (len, pos) = match axis {
                            AttentionAxis::Height => (h, y),
                            AttentionAxis::Width => (w, x),
                        };
                        let coord = |t: usize| match axis {
                            AttentionAxis::Height => (t, x),
                            AttentionAxis::Width => (y, t),
                        };
                        let mut scores = vec![0.0; len];
                        for (t, s) in scores.iter_mut().enumerate() {
                            let (ty, tx) = coord(t);
                            for i in 0..d {
                                let ch = hd * d + i;
                                let (py, px) = coord(pos);
                                *s += at(b, ch, py, px) * at(b, c + ch, ty, tx);
                            }
                            *s /= (d as f64).sqrt();
                        }
                        let max = scores.iter().cloned().fold(f64::MIN, f64::max);
                        let z: f64 = scores.iter().map(|s| (s - max).exp()).sum();
                        for i in 0..d {
                            let ch = hd * d + i;
                            let mut acc = 0.0;
                            for (t, s) in scores.iter().enumerate() {
                                let (ty, tx) = coord(t);
                                acc += (s - max).exp() / z * at(b, 2 * c + ch, ty, tx);
                            }
                            out.data_mut()[((b * c + ch) * h + y) * w + x] = acc;
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn axial_attention_matches_oracle() {
        let qkv = rand_tensor(&[2, 24, 5, 7], 8, 1.0);
        for axis in [AttentionAxis::Height, AttentionAxis::Width] {
            let g = Graph::inference();
            let y = g.constant(qkv.clone()).axial_attention(4, axis);
            assert!(y.value().max_abs_diff(&attention_oracle(&qkv, 4, axis)) < 1e-12);
        }
    }

    #[test]
    fn attention_probabilities_are_normalized() {
        let qkv = rand_tensor(&[1, 12, 6, 5], 9, 3.0);
        for (axis, len) in [(AttentionAxis::Height, 6), (AttentionAxis::Width, 5)] {
            let p = attention_probabilities(&qkv, 2, axis);
            assert_eq!(p.shape()[1..], [len, len]);
            for row in p.data().chunks(len) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn axial_attention_gradients() {
        let qkv = rand_tensor(&[1, 12, 4, 5], 10, 1.0);
        let r = rand_tensor(&[1, 4, 4, 5], 11, 1.0);
        for axis in [AttentionAxis::Height, AttentionAxis::Width] {
            let f = |g: &Graph, v: &Var| v.axial_attention(2, axis).mul(&g.constant(r.clone())).sum();
            let err = check_input(&f, &qkv, &[], 1e-6);
            assert!(err < 1e-6, "{axis:?}: {err}");
        }
    }
}
