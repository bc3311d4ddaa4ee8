//! Convolutions: im2col + GEMM for dense/grouped kernels, direct loops for
//! depth-wise kernels, and modulated deformable convolution.

use super::Var;
use crate::tensor::Tensor;

/// Upper bound on im2col buffer entries per chunk (~32 MiB of f64).
const COL_BUDGET: usize = 1 << 22;

/// `c = a * b + beta * c` with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rows: usize, cols: usize, rs: usize, cs: usize| (rows - 1) * rs + (cols - 1) * cs;
    if k > 0 {
        assert!(last(m, k, rsa, csa) < a.len(), "gemm: a out of bounds");
        assert!(last(k, n, rsb, csb) < b.len(), "gemm: b out of bounds");
    }
    assert!(last(m, n, rsc, csc) < c.len(), "gemm: c out of bounds");
    // SAFETY: all accessed offsets were bounds-checked above; the slices do not alias
    // because `c` is borrowed mutably.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Geometry of a 2-D convolution with zero padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl Default for ConvGeometry {
    fn default() -> Self {
        ConvGeometry {
            stride: 1,
            padding: 0,
            dilation: 1,
            groups: 1,
        }
    }
}

impl ConvGeometry {
    pub fn out_len(&self, len: usize, k: usize) -> usize {
        let span = self.dilation * (k - 1) + 1;
        assert!(len + 2 * self.padding >= span, "input smaller than kernel span");
        (len + 2 * self.padding - span) / self.stride + 1
    }
}

struct Im2Col<'a> {
    x: &'a [f64],
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ow: usize,
    geo: ConvGeometry,
}

impl Im2Col<'_> {
    /// Input coordinate for output `o` and kernel tap `k` along one axis.
    #[inline]
    fn src(&self, o: usize, k: usize) -> isize {
        (o * self.geo.stride + k * self.geo.dilation) as isize - self.geo.padding as isize
    }

    /// Fill `col` (`cin * kh * kw` rows by `rows * ow` columns) for output rows
    /// `r0 .. r0 + rows`; `x` holds `cin` consecutive planes.
    fn fill(&self, cin: usize, r0: usize, rows: usize, col: &mut [f64]) {
        let p = rows * self.ow;
        let plane = self.h * self.w;
        for ci in 0..cin {
            let src_plane = &self.x[ci * plane..(ci + 1) * plane];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (ci * self.kh + ki) * self.kw + kj;
                    let dst = &mut col[row * p..(row + 1) * p];
                    for r in 0..rows {
                        let iy = self.src(r0 + r, ki);
                        let d = &mut dst[r * self.ow..(r + 1) * self.ow];
                        if iy < 0 || iy >= self.h as isize {
                            d.fill(0.0);
                            continue;
                        }
                        let src_row = &src_plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, v) in d.iter_mut().enumerate() {
                            let ix = self.src(ox, kj);
                            *v = if ix < 0 || ix >= self.w as isize {
                                0.0
                            } else {
                                src_row[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Scatter-add `col` back onto `gx` planes (transpose of [`Im2Col::fill`]).
    fn scatter(&self, cin: usize, r0: usize, rows: usize, col: &[f64], gx: &mut [f64]) {
        let p = rows * self.ow;
        let plane = self.h * self.w;
        for ci in 0..cin {
            let dst_plane = &mut gx[ci * plane..(ci + 1) * plane];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (ci * self.kh + ki) * self.kw + kj;
                    let src = &col[row * p..(row + 1) * p];
                    for r in 0..rows {
                        let iy = self.src(r0 + r, ki);
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst_row =
                            &mut dst_plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, &g) in src[r * self.ow..(r + 1) * self.ow].iter().enumerate() {
                            let ix = self.src(ox, kj);
                            if ix >= 0 && ix < self.w as isize {
                                dst_row[ix as usize] += g;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn rows_per_chunk(k: usize, ow: usize, oh: usize) -> usize {
    (COL_BUDGET / (k * ow).max(1)).clamp(1, oh)
}

impl Var {
    /// 2-D convolution. `weight` is `Cout x Cin/groups x kh x kw`, `bias` has `Cout` entries.
    pub fn conv2d(&self, weight: &Var, bias: Option<&Var>, geo: ConvGeometry) -> Var {
        let (n, cin, h, w) = self.dims4();
        let (cout, cin_g, kh, kw) = weight.dims4();
        let groups = geo.groups;
        assert!(groups >= 1 && cin % groups == 0 && cout % groups == 0, "bad group count");
        assert_eq!(cin_g, cin / groups, "weight input channels do not match");
        if let Some(b) = bias {
            assert_eq!(b.value().numel(), cout, "bias length");
        }
        let oh = geo.out_len(h, kh);
        let ow = geo.out_len(w, kw);
        let depthwise = groups == cin && cout == cin;
        let out = if depthwise {
            depthwise_forward(self.value(), weight.value(), (oh, ow), geo)
        } else {
            dense_forward(self.value(), weight.value(), (oh, ow), geo)
        };
        let mut out = out;
        if let Some(b) = bias {
            let plane = oh * ow;
            for (i, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
                let bv = b.value().data()[i % cout];
                chunk.iter_mut().for_each(|v| *v += bv);
            }
        }
        let (x, wt) = (self.value.clone(), weight.value.clone());
        let (tx, tw) = (self.requires_grad(), weight.requires_grad());
        let tb = bias.is_some_and(|b| b.requires_grad());
        let mut parents = vec![self, weight];
        if let Some(b) = bias {
            parents.push(b);
        }
        let has_bias = bias.is_some();
        self.graph.record(out, &parents, move |g| {
            let (gx, gw) = if depthwise {
                depthwise_backward(&x, &wt, g, geo, tx, tw)
            } else {
                dense_backward(&x, &wt, g, geo, tx, tw)
            };
            let mut grads = vec![gx, gw];
            if has_bias {
                grads.push(tb.then(|| {
                    let plane = oh * ow;
                    let mut gb = vec![0.0; cout];
                    for (i, chunk) in g.data().chunks(plane).enumerate() {
                        gb[i % cout] += chunk.iter().sum::<f64>();
                    }
                    Tensor::new(&[cout], gb)
                }));
            }
            let _ = n;
            grads
        })
    }

    /// Modulated deformable 3x3 convolution (stride 1, padding 1).
    ///
    /// `offset` is `N x 18 x H x W` holding `(dy, dx)` pairs per kernel tap in
    /// row-major tap order; `modulation` is `N x 9 x H x W` and multiplies each
    /// sampled value. Sampling is bilinear with zeros outside the image.
    pub fn deform_conv3x3(
        &self,
        offset: &Var,
        modulation: &Var,
        weight: &Var,
        bias: Option<&Var>,
    ) -> Var {
        let (n, cin, h, w) = self.dims4();
        let (cout, wc, kh, kw) = weight.dims4();
        assert_eq!((wc, kh, kw), (cin, 3, 3), "deformable weight must be Cout x Cin x 3 x 3");
        assert_eq!(offset.shape(), &[n, 18, h, w], "offset shape");
        assert_eq!(modulation.shape(), &[n, 9, h, w], "modulation shape");
        let ctx = DeformCtx { cin, h, w };
        let k = cin * 9;
        let rows = rows_per_chunk(k, w, h);
        let plane = h * w;
        let mut out = Tensor::zeros(&[n, cout, h, w]);
        {
            let xd = self.value().data();
            let od = offset.value().data();
            let md = modulation.value().data();
            let wd = weight.value().data();
            let outd = out.data_mut();
            let mut col = vec![0.0; k * rows * w];
            for b in 0..n {
                let xb = &xd[b * cin * plane..(b + 1) * cin * plane];
                let ob = &od[b * 18 * plane..(b + 1) * 18 * plane];
                let mb = &md[b * 9 * plane..(b + 1) * 9 * plane];
                let mut r0 = 0;
                while r0 < h {
                    let rr = rows.min(h - r0);
                    let p = rr * w;
                    ctx.fill(xb, ob, mb, r0, rr, &mut col[..k * p]);
                    gemm(
                        cout,
                        k,
                        p,
                        wd,
                        (k, 1),
                        &col[..k * p],
                        (p, 1),
                        0.0,
                        &mut outd[b * cout * plane + r0 * w..],
                        (plane, 1),
                    );
                    r0 += rr;
                }
            }
        }
        if let Some(bias) = bias {
            for (i, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
                let bv = bias.value().data()[i % cout];
                chunk.iter_mut().for_each(|v| *v += bv);
            }
        }
        let (x, off, md, wt) = (
            self.value.clone(),
            offset.value.clone(),
            modulation.value.clone(),
            weight.value.clone(),
        );
        let flags = [
            self.requires_grad(),
            offset.requires_grad(),
            modulation.requires_grad(),
            weight.requires_grad(),
            bias.is_some_and(|b| b.requires_grad()),
        ];
        let mut parents = vec![self, offset, modulation, weight];
        if let Some(b) = bias {
            parents.push(b);
        }
        let has_bias = bias.is_some();
        self.graph.record(out, &parents, move |g| {
            let gd = g.data();
            let mut gx = vec![0.0; x.numel()];
            let mut goff = vec![0.0; off.numel()];
            let mut gmod = vec![0.0; md.numel()];
            let mut gw = vec![0.0; wt.numel()];
            let mut col = vec![0.0; k * rows * w];
            let mut dcol = vec![0.0; k * rows * w];
            for b in 0..n {
                let xb = &x.data()[b * cin * plane..(b + 1) * cin * plane];
                let ob = &off.data()[b * 18 * plane..(b + 1) * 18 * plane];
                let mb = &md.data()[b * 9 * plane..(b + 1) * 9 * plane];
                let gb = &gd[b * cout * plane..(b + 1) * cout * plane];
                let mut r0 = 0;
                while r0 < h {
                    let rr = rows.min(h - r0);
                    let p = rr * w;
                    if flags[3] {
                        ctx.fill(xb, ob, mb, r0, rr, &mut col[..k * p]);
                        // gw += g (cout x p) * col^T (p x k)
                        gemm(cout, p, k, &gb[r0 * w..], (plane, 1), &col[..k * p], (1, p), 1.0, &mut gw, (k, 1));
                    }
                    if flags[0] || flags[1] || flags[2] {
                        // dcol = w^T (k x cout) * g (cout x p)
                        gemm(k, cout, p, wt.data(), (1, k), &gb[r0 * w..], (plane, 1), 0.0, &mut dcol[..k * p], (p, 1));
                        ctx.backward(
                            xb,
                            ob,
                            mb,
                            r0,
                            rr,
                            &dcol[..k * p],
                            &mut gx[b * cin * plane..(b + 1) * cin * plane],
                            &mut goff[b * 18 * plane..(b + 1) * 18 * plane],
                            &mut gmod[b * 9 * plane..(b + 1) * 9 * plane],
                        );
                    }
                    r0 += rr;
                }
            }
            let mut grads = vec![
                flags[0].then(|| Tensor::new(x.shape(), gx)),
                flags[1].then(|| Tensor::new(off.shape(), goff)),
                flags[2].then(|| Tensor::new(md.shape(), gmod)),
                flags[3].then(|| Tensor::new(wt.shape(), gw)),
            ];
            if has_bias {
                grads.push(flags[4].then(|| {
                    let mut gbias = vec![0.0; cout];
                    for (i, chunk) in gd.chunks(plane).enumerate() {
                        gbias[i % cout] += chunk.iter().sum::<f64>();
                    }
                    Tensor::new(&[cout], gbias)
                }));
            }
            grads
        })
    }
}

fn dense_forward(x: &Tensor, wt: &Tensor, (oh, ow): (usize, usize), geo: ConvGeometry) -> Tensor {
    let (n, cin, h, w) = x.dims4();
    let (cout, cin_g, kh, kw) = wt.dims4();
    let groups = geo.groups;
    let cout_g = cout / groups;
    let k = cin_g * kh * kw;
    let plane_in = h * w;
    let plane_out = oh * ow;
    let rows = rows_per_chunk(k, ow, oh);
    let mut out = Tensor::zeros(&[n, cout, oh, ow]);
    let mut col = vec![0.0; k * rows * ow];
    let outd = out.data_mut();
    for b in 0..n {
        for gi in 0..groups {
            let xg = &x.data()[(b * cin + gi * cin_g) * plane_in..(b * cin + (gi + 1) * cin_g) * plane_in];
            let im = Im2Col { x: xg, h, w, kh, kw, ow, geo };
            let wg = &wt.data()[gi * cout_g * k..(gi + 1) * cout_g * k];
            let mut r0 = 0;
            while r0 < oh {
                let rr = rows.min(oh - r0);
                let p = rr * ow;
                im.fill(cin_g, r0, rr, &mut col[..k * p]);
                let base = (b * cout + gi * cout_g) * plane_out + r0 * ow;
                gemm(cout_g, k, p, wg, (k, 1), &col[..k * p], (p, 1), 0.0, &mut outd[base..], (plane_out, 1));
                r0 += rr;
            }
        }
    }
    out
}

fn dense_backward(
    x: &Tensor,
    wt: &Tensor,
    g: &Tensor,
    geo: ConvGeometry,
    need_x: bool,
    need_w: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let (n, cin, h, w) = x.dims4();
    let (cout, cin_g, kh, kw) = wt.dims4();
    let (_, _, oh, ow) = g.dims4();
    let groups = geo.groups;
    let cout_g = cout / groups;
    let k = cin_g * kh * kw;
    let plane_in = h * w;
    let plane_out = oh * ow;
    let rows = rows_per_chunk(k, ow, oh);
    let mut gx = need_x.then(|| vec![0.0; x.numel()]);
    let mut gw = need_w.then(|| vec![0.0; wt.numel()]);
    let mut col = vec![0.0; k * rows * ow];
    for b in 0..n {
        for gi in 0..groups {
            let xs = (b * cin + gi * cin_g) * plane_in..(b * cin + (gi + 1) * cin_g) * plane_in;
            let im = Im2Col { x: &x.data()[xs.clone()], h, w, kh, kw, ow, geo };
            let wg = &wt.data()[gi * cout_g * k..(gi + 1) * cout_g * k];
            let mut r0 = 0;
            while r0 < oh {
                let rr = rows.min(oh - r0);
                let p = rr * ow;
                let gbase = (b * cout + gi * cout_g) * plane_out + r0 * ow;
                let gslice = &g.data()[gbase..];
                if let Some(gw) = gw.as_mut() {
                    im.fill(cin_g, r0, rr, &mut col[..k * p]);
                    let gwg = &mut gw[gi * cout_g * k..(gi + 1) * cout_g * k];
                    gemm(cout_g, p, k, gslice, (plane_out, 1), &col[..k * p], (1, p), 1.0, gwg, (k, 1));
                }
                if let Some(gx) = gx.as_mut() {
                    gemm(k, cout_g, p, wg, (1, k), gslice, (plane_out, 1), 0.0, &mut col[..k * p], (p, 1));
                    im.scatter(cin_g, r0, rr, &col[..k * p], &mut gx[xs.clone()]);
                }
                r0 += rr;
            }
        }
    }
    (
        gx.map(|d| Tensor::new(x.shape(), d)),
        gw.map(|d| Tensor::new(wt.shape(), d)),
    )
}

fn depthwise_forward(x: &Tensor, wt: &Tensor, (oh, ow): (usize, usize), geo: ConvGeometry) -> Tensor {
    let (n, c, h, w) = x.dims4();
    let (_, _, kh, kw) = wt.dims4();
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let im = |o: usize, k: usize| (o * geo.stride + k * geo.dilation) as isize - geo.padding as isize;
    let outd = out.data_mut();
    for b in 0..n {
        for ch in 0..c {
            let src = &x.data()[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
            let dst = &mut outd[(b * c + ch) * oh * ow..(b * c + ch + 1) * oh * ow];
            let kern = &wt.data()[ch * kh * kw..(ch + 1) * kh * kw];
            for ki in 0..kh {
                for kj in 0..kw {
                    let wv = kern[ki * kw + kj];
                    for oy in 0..oh {
                        let iy = im(oy, ki);
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let srow = &src[iy as usize * w..(iy as usize + 1) * w];
                        let drow = &mut dst[oy * ow..(oy + 1) * ow];
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = im(ox, kj);
                            if ix >= 0 && ix < w as isize {
                                *d += wv * srow[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn depthwise_backward(
    x: &Tensor,
    wt: &Tensor,
    g: &Tensor,
    geo: ConvGeometry,
    need_x: bool,
    need_w: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let (n, c, h, w) = x.dims4();
    let (_, _, kh, kw) = wt.dims4();
    let (_, _, oh, ow) = g.dims4();
    let im = |o: usize, k: usize| (o * geo.stride + k * geo.dilation) as isize - geo.padding as isize;
    let mut gx = vec![0.0; x.numel()];
    let mut gw = vec![0.0; wt.numel()];
    for b in 0..n {
        for ch in 0..c {
            let src = &x.data()[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
            let gsrc = &g.data()[(b * c + ch) * oh * ow..(b * c + ch + 1) * oh * ow];
            let gdst = &mut gx[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
            let kern = &wt.data()[ch * kh * kw..(ch + 1) * kh * kw];
            let gkern = &mut gw[ch * kh * kw..(ch + 1) * kh * kw];
            for ki in 0..kh {
                for kj in 0..kw {
                    let wv = kern[ki * kw + kj];
                    let mut acc = 0.0;
                    for oy in 0..oh {
                        let iy = im(oy, ki);
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row = iy as usize * w;
                        for ox in 0..ow {
                            let ix = im(ox, kj);
                            if ix >= 0 && ix < w as isize {
                                let gv = gsrc[oy * ow + ox];
                                acc += gv * src[row + ix as usize];
                                gdst[row + ix as usize] += wv * gv;
                            }
                        }
                    }
                    gkern[ki * kw + kj] += acc;
                }
            }
        }
    }
    (
        need_x.then(|| Tensor::new(x.shape(), gx)),
        need_w.then(|| Tensor::new(wt.shape(), gw)),
    )
}

struct DeformCtx {
    cin: usize,
    h: usize,
    w: usize,
}

/// Bilinear sample with zero padding; returns the value, its partial
/// derivatives w.r.t. `y` and `x`, and the four corner weights/indices.
#[inline]
fn bilinear(plane: &[f64], h: usize, w: usize, y: f64, x: f64) -> Option<Sample> {
    if y <= -1.0 || y >= h as f64 || x <= -1.0 || x >= w as f64 {
        return None;
    }
    let y0 = y.floor();
    let x0 = x.floor();
    let ly = y - y0;
    let lx = x - x0;
    let (hy, hx) = (1.0 - ly, 1.0 - lx);
    let (y0, x0) = (y0 as isize, x0 as isize);
    let fetch = |yy: isize, xx: isize| -> Option<usize> {
        (yy >= 0 && yy < h as isize && xx >= 0 && xx < w as isize).then(|| yy as usize * w + xx as usize)
    };
    let idx = [fetch(y0, x0), fetch(y0, x0 + 1), fetch(y0 + 1, x0), fetch(y0 + 1, x0 + 1)];
    let v = idx.map(|i| i.map_or(0.0, |i| plane[i]));
    let wts = [hy * hx, hy * lx, ly * hx, ly * lx];
    let value = wts[0] * v[0] + wts[1] * v[1] + wts[2] * v[2] + wts[3] * v[3];
    let dy = -hx * v[0] - lx * v[1] + hx * v[2] + lx * v[3];
    let dx = -hy * v[0] + hy * v[1] - ly * v[2] + ly * v[3];
    Some(Sample { value, dy, dx, idx, wts })
}

struct Sample {
    value: f64,
    dy: f64,
    dx: f64,
    idx: [Option<usize>; 4],
    wts: [f64; 4],
}

impl DeformCtx {
    #[inline]
    fn position(&self, off: &[f64], plane: usize, tap: usize, p: usize, oy: usize, ox: usize) -> (f64, f64) {
        let (ki, kj) = (tap / 3, tap % 3);
        let dy = off[(2 * tap) * plane + p];
        let dx = off[(2 * tap + 1) * plane + p];
        (
            oy as f64 - 1.0 + ki as f64 + dy,
            ox as f64 - 1.0 + kj as f64 + dx,
        )
    }

    fn fill(&self, x: &[f64], off: &[f64], md: &[f64], r0: usize, rows: usize, col: &mut [f64]) {
        let (h, w) = (self.h, self.w);
        let plane = h * w;
        let pc = rows * w;
        for ci in 0..self.cin {
            let src = &x[ci * plane..(ci + 1) * plane];
            for tap in 0..9 {
                let dst = &mut col[(ci * 9 + tap) * pc..(ci * 9 + tap + 1) * pc];
                for r in 0..rows {
                    let oy = r0 + r;
                    for ox in 0..w {
                        let p = oy * w + ox;
                        let (py, px) = self.position(off, plane, tap, p, oy, ox);
                        let m = md[tap * plane + p];
                        dst[r * w + ox] = bilinear(src, h, w, py, px).map_or(0.0, |s| m * s.value);
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backward(
        &self,
        x: &[f64],
        off: &[f64],
        md: &[f64],
        r0: usize,
        rows: usize,
        dcol: &[f64],
        gx: &mut [f64],
        goff: &mut [f64],
        gmod: &mut [f64],
    ) {
        let (h, w) = (self.h, self.w);
        let plane = h * w;
        let pc = rows * w;
        for ci in 0..self.cin {
            let src = &x[ci * plane..(ci + 1) * plane];
            for tap in 0..9 {
                let dc = &dcol[(ci * 9 + tap) * pc..(ci * 9 + tap + 1) * pc];
                for r in 0..rows {
                    let oy = r0 + r;
                    for ox in 0..w {
                        let gv = dc[r * w + ox];
                        if gv == 0.0 {
                            continue;
                        }
                        let p = oy * w + ox;
                        let (py, px) = self.position(off, plane, tap, p, oy, ox);
                        let Some(s) = bilinear(src, h, w, py, px) else { continue };
                        let m = md[tap * plane + p];
                        gmod[tap * plane + p] += gv * s.value;
                        goff[(2 * tap) * plane + p] += gv * m * s.dy;
                        goff[(2 * tap + 1) * plane + p] += gv * m * s.dx;
                        let gplane = &mut gx[ci * plane..(ci + 1) * plane];
                        for (i, wt) in s.idx.iter().zip(s.wts) {
                            if let Some(i) = i {
                                gplane[*i] += gv * m * wt;
                            }
                        }
                    }
                }
            }
        }
    }
}
