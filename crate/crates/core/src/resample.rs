//! Sparse one-dimensional linear resampling operators.
//!
//! Every spatially linear operation in the crate (binomial blur + decimation,
//! zero-insertion upsampling, bilinear resizing, reflect padding, cropping,
//! adaptive average pooling, Gaussian windows) is separable. Each is expressed
//! as an [`AxisResample`] applied along rows and then columns of a plane.
//! The transpose of the same operator gives the exact backward pass.

/// Classic 5-tap binomial kernel `[1, 4, 6, 4, 1] / 16`.
pub const BINOMIAL5: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];

/// Reflect index into `0..len` without repeating the edge sample
/// (`-1 -> 1`, `len -> len - 2`). Lengths of 1 collapse to replicate.
pub fn reflect_index(i: isize, len: usize) -> usize {
    let n = len as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - m;
    }
    m as usize
}

/// A sparse `out_len x in_len` matrix stored row-wise.
#[derive(Debug, Clone, PartialEq)]
pub struct AxisResample {
    in_len: usize,
    out_len: usize,
    offsets: Vec<usize>,
    index: Vec<usize>,
    weight: Vec<f64>,
}

impl AxisResample {
    fn from_rows(in_len: usize, rows: Vec<Vec<(usize, f64)>>) -> Self {
        let out_len = rows.len();
        let mut offsets = Vec::with_capacity(out_len + 1);
        let mut index = Vec::new();
        let mut weight = Vec::new();
        offsets.push(0);
        for row in rows {
            // merge duplicate taps so each input contributes once per row
            let mut merged: Vec<(usize, f64)> = Vec::with_capacity(row.len());
            for (i, w) in row {
                debug_assert!(i < in_len);
                match merged.iter_mut().find(|(j, _)| *j == i) {
                    Some(entry) => entry.1 += w,
                    None => merged.push((i, w)),
                }
            }
            for (i, w) in merged {
                index.push(i);
                weight.push(w);
            }
            offsets.push(index.len());
        }
        AxisResample {
            in_len,
            out_len,
            offsets,
            index,
            weight,
        }
    }

    pub fn in_len(&self) -> usize {
        self.in_len
    }

    pub fn out_len(&self) -> usize {
        self.out_len
    }

    /// Taps of output sample `o` as `(input index, weight)` pairs.
    pub fn taps(&self, o: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.offsets[o]..self.offsets[o + 1];
        self.index[range.clone()]
            .iter()
            .copied()
            .zip(self.weight[range].iter().copied())
    }

    pub fn identity(len: usize) -> Self {
        Self::from_rows(len, (0..len).map(|i| vec![(i, 1.0)]).collect())
    }

    /// Blur with [`BINOMIAL5`] under reflect borders, then keep every second sample.
    /// `in_len` must be even.
    pub fn pyr_down(in_len: usize) -> Self {
        assert!(in_len.is_multiple_of(2) && in_len > 0, "pyr_down needs an even length");
        let rows = (0..in_len / 2)
            .map(|o| {
                (0..5)
                    .map(|k| {
                        let src = 2 * o as isize + k as isize - 2;
                        (reflect_index(src, in_len), BINOMIAL5[k])
                    })
                    .collect()
            })
            .collect();
        Self::from_rows(in_len, rows)
    }

    /// Zero-insert to twice the length, then blur with `2 * BINOMIAL5` under reflect
    /// borders of the zero-inserted signal. Applied along both axes this is the
    /// usual `4 x` kernel, so constants are preserved.
    pub fn pyr_up(in_len: usize) -> Self {
        assert!(in_len > 0);
        let up_len = 2 * in_len;
        let rows = (0..up_len)
            .map(|o| {
                (0..5)
                    .filter_map(|k| {
                        let pos = reflect_index(o as isize + k as isize - 2, up_len);
                        pos.is_multiple_of(2).then(|| (pos / 2, 2.0 * BINOMIAL5[k]))
                    })
                    .collect()
            })
            .collect();
        Self::from_rows(in_len, rows)
    }

    /// Bilinear interpolation with half-pixel centres (`align_corners = false`),
    /// source coordinates clamped to the valid range. No anti-aliasing on downscale.
    pub fn bilinear(in_len: usize, out_len: usize) -> Self {
        assert!(in_len > 0 && out_len > 0);
        let scale = in_len as f64 / out_len as f64;
        let rows = (0..out_len)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
                let lo = src.floor() as usize;
                let hi = (lo + 1).min(in_len - 1);
                let frac = src - lo as f64;
                if frac == 0.0 || lo == hi {
                    vec![(lo, 1.0)]
                } else {
                    vec![(lo, 1.0 - frac), (hi, frac)]
                }
            })
            .collect();
        Self::from_rows(in_len, rows)
    }

    /// Reflect padding. Inputs shorter than two samples fall back to replicate.
    pub fn reflect_pad(in_len: usize, before: usize, after: usize) -> Self {
        assert!(in_len > 0);
        let rows = (0..in_len + before + after)
            .map(|o| {
                let src = o as isize - before as isize;
                vec![(reflect_index(src, in_len), 1.0)]
            })
            .collect();
        Self::from_rows(in_len, rows)
    }

    pub fn crop(in_len: usize, start: usize, len: usize) -> Self {
        assert!(start + len <= in_len);
        Self::from_rows(in_len, (start..start + len).map(|i| vec![(i, 1.0)]).collect())
    }

    /// Adaptive average pooling into `bins` cells, with cell `i` covering
    /// `floor(i * n / bins) .. ceil((i + 1) * n / bins)`.
    pub fn adaptive_avg(in_len: usize, bins: usize) -> Self {
        assert!(bins > 0 && bins <= in_len);
        let rows = (0..bins)
            .map(|i| {
                let start = i * in_len / bins;
                let end = ((i + 1) * in_len).div_ceil(bins);
                let w = 1.0 / (end - start) as f64;
                (start..end).map(|j| (j, w)).collect()
            })
            .collect();
        Self::from_rows(in_len, rows)
    }

    /// Normalized Gaussian window applied in "valid" mode: output `o` is the
    /// weighted sum over inputs `o .. o + size`.
    pub fn gaussian_valid(in_len: usize, size: usize, sigma: f64) -> Self {
        assert!(size <= in_len);
        let w = gaussian_window(size, sigma);
        let rows = (0..in_len - size + 1)
            .map(|o| w.iter().enumerate().map(|(k, &wk)| (o + k, wk)).collect())
            .collect();
        Self::from_rows(in_len, rows)
    }

    /// `out[o] = sum_k w_k * input[idx_k]` on a strided 1-D view.
    #[inline]
    fn dot_row(&self, o: usize, input: &[f64], base: usize, stride: usize) -> f64 {
        let mut acc = 0.0;
        for p in self.offsets[o]..self.offsets[o + 1] {
            acc += self.weight[p] * input[base + self.index[p] * stride];
        }
        acc
    }
}

/// Normalized 1-D Gaussian of odd `size` centred on the middle tap.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - c;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Apply `rows_op` along the vertical axis and `cols_op` along the horizontal
/// axis of a row-major `h x w` plane, writing into `out` of size
/// `rows_op.out_len() x cols_op.out_len()`.
pub fn apply_separable(
    plane: &[f64],
    h: usize,
    w: usize,
    rows_op: &AxisResample,
    cols_op: &AxisResample,
    out: &mut [f64],
) {
    assert_eq!(rows_op.in_len, h);
    assert_eq!(cols_op.in_len, w);
    let (oh, ow) = (rows_op.out_len, cols_op.out_len);
    assert_eq!(plane.len(), h * w);
    assert_eq!(out.len(), oh * ow);
    // horizontal pass: h x ow
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        let dst = &mut tmp[y * ow..(y + 1) * ow];
        for (x, d) in dst.iter_mut().enumerate() {
            *d = cols_op.dot_row(x, plane, y * w, 1);
        }
    }
    // vertical pass: oh x ow
    for y in 0..oh {
        let dst = &mut out[y * ow..(y + 1) * ow];
        for p in rows_op.offsets[y]..rows_op.offsets[y + 1] {
            let wgt = rows_op.weight[p];
            let src = &tmp[rows_op.index[p] * ow..(rows_op.index[p] + 1) * ow];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += wgt * s;
            }
        }
    }
}

/// Transpose of [`apply_separable`]: maps an `oh x ow` gradient back to `h x w`,
/// accumulating into `out`.
pub fn apply_separable_transpose(
    grad: &[f64],
    rows_op: &AxisResample,
    cols_op: &AxisResample,
    out: &mut [f64],
) {
    let (h, w) = (rows_op.in_len, cols_op.in_len);
    let (oh, ow) = (rows_op.out_len, cols_op.out_len);
    assert_eq!(grad.len(), oh * ow);
    assert_eq!(out.len(), h * w);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..oh {
        let src = &grad[y * ow..(y + 1) * ow];
        for p in rows_op.offsets[y]..rows_op.offsets[y + 1] {
            let wgt = rows_op.weight[p];
            let dst = &mut tmp[rows_op.index[p] * ow..(rows_op.index[p] + 1) * ow];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += wgt * s;
            }
        }
    }
    for y in 0..h {
        let src = &tmp[y * ow..(y + 1) * ow];
        let dst = &mut out[y * w..(y + 1) * w];
        for (x, &g) in src.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            for p in cols_op.offsets[x]..cols_op.offsets[x + 1] {
                dst[cols_op.index[p]] += cols_op.weight[p] * g;
            }
        }
    }
}
