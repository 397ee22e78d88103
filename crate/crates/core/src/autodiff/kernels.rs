//! Raw forward/adjoint kernels over flat `f64` buffers. Shape checking lives
//! in the graph layer; everything here assumes consistent extents.

use std::cell::Cell;

use crate::tensor::{numel, strides};

thread_local! {
    static MULTIPLY_COUNTER: Cell<u64> = const { Cell::new(0) };
}

/// Multiplications performed by forward matrix products on this thread since
/// the last [`reset_multiply_counter`].
pub fn multiply_count() -> u64 {
    MULTIPLY_COUNTER.with(Cell::get)
}

pub fn reset_multiply_counter() {
    MULTIPLY_COUNTER.with(|c| c.set(0));
}

fn count_multiplies(n: u64) {
    MULTIPLY_COUNTER.with(|c| c.set(c.get() + n));
}

/// `out[b] = a[b] · c[b]` for `batch` stacked `m×k` and `k×n` matrices.
pub fn bmm(a: &[f64], b: &[f64], batch: usize, m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; batch * m * n];
    for bi in 0..batch {
        let a = &a[bi * m * k..(bi + 1) * m * k];
        let b = &b[bi * k * n..(bi + 1) * k * n];
        let o = &mut out[bi * m * n..(bi + 1) * m * n];
        for i in 0..m {
            let orow = &mut o[i * n..(i + 1) * n];
            for p in 0..k {
                let av = a[i * k + p];
                let brow = &b[p * n..(p + 1) * n];
                for (ov, bv) in orow.iter_mut().zip(brow) {
                    *ov += av * bv;
                }
            }
        }
    }
    count_multiplies((batch * m * k * n) as u64);
    out
}

/// Adjoints of [`bmm`]: `(g·bᵀ, aᵀ·g)`.
pub fn bmm_backward(
    a: &[f64],
    b: &[f64],
    g: &[f64],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
) -> (Vec<f64>, Vec<f64>) {
    let mut ga = vec![0.0; batch * m * k];
    let mut gb = vec![0.0; batch * k * n];
    for bi in 0..batch {
        let a = &a[bi * m * k..(bi + 1) * m * k];
        let b = &b[bi * k * n..(bi + 1) * k * n];
        let g = &g[bi * m * n..(bi + 1) * m * n];
        let ga = &mut ga[bi * m * k..(bi + 1) * m * k];
        let gb = &mut gb[bi * k * n..(bi + 1) * k * n];
        for i in 0..m {
            let grow = &g[i * n..(i + 1) * n];
            for p in 0..k {
                let brow = &b[p * n..(p + 1) * n];
                ga[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                let av = a[i * k + p];
                for (gbv, gv) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                    *gbv += av * gv;
                }
            }
        }
    }
    (ga, gb)
}

/// Geometry of a same-padded 2-D convolution over `[N, H, W, C]` input with a
/// `[k, k, Cin/groups, Cout]` kernel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        self.height.div_ceil(self.stride)
    }

    pub fn out_width(&self) -> usize {
        self.width.div_ceil(self.stride)
    }

    fn pad(&self) -> isize {
        (self.dilation * (self.kernel - 1) / 2) as isize
    }

    /// Visits every (output pixel, input pixel, kernel tap) triple that lies
    /// inside the input, passing flat base offsets.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (oh, ow) = (self.out_height(), self.out_width());
        let pad = self.pad();
        for n in 0..self.batch {
            for oy in 0..oh {
                for ox in 0..ow {
                    let out_base = ((n * oh + oy) * ow + ox) * self.out_channels;
                    for ky in 0..self.kernel {
                        let iy = (oy * self.stride + ky * self.dilation) as isize - pad;
                        if iy < 0 || iy >= self.height as isize {
                            continue;
                        }
                        for kx in 0..self.kernel {
                            let ix = (ox * self.stride + kx * self.dilation) as isize - pad;
                            if ix < 0 || ix >= self.width as isize {
                                continue;
                            }
                            let in_base = ((n * self.height + iy as usize) * self.width
                                + ix as usize)
                                * self.in_channels;
                            let tap = ky * self.kernel + kx;
                            f(out_base, in_base, tap);
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d(x: &[f64], w: &[f64], geo: &ConvGeometry) -> Vec<f64> {
    let out_len = geo.batch * geo.out_height() * geo.out_width() * geo.out_channels;
    let mut out = vec![0.0; out_len];
    let cin_g = geo.in_channels / geo.groups;
    let cout_g = geo.out_channels / geo.groups;
    let tap_stride = cin_g * geo.out_channels;
    geo.for_each_tap(|ob, ib, tap| {
        let wt = &w[tap * tap_stride..(tap + 1) * tap_stride];
        for grp in 0..geo.groups {
            let o = &mut out[ob + grp * cout_g..ob + (grp + 1) * cout_g];
            for ci in 0..cin_g {
                let xv = x[ib + grp * cin_g + ci];
                if xv == 0.0 {
                    continue;
                }
                let wrow = &wt[ci * geo.out_channels + grp * cout_g..][..cout_g];
                for (ov, wv) in o.iter_mut().zip(wrow) {
                    *ov += xv * wv;
                }
            }
        }
    });
    out
}

/// Adjoints of [`conv2d`] with respect to input and kernel.
pub fn conv2d_backward(x: &[f64], w: &[f64], g: &[f64], geo: &ConvGeometry) -> (Vec<f64>, Vec<f64>) {
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; w.len()];
    let cin_g = geo.in_channels / geo.groups;
    let cout_g = geo.out_channels / geo.groups;
    let tap_stride = cin_g * geo.out_channels;
    geo.for_each_tap(|ob, ib, tap| {
        let wt = &w[tap * tap_stride..(tap + 1) * tap_stride];
        let gwt = &mut gw[tap * tap_stride..(tap + 1) * tap_stride];
        for grp in 0..geo.groups {
            let go = &g[ob + grp * cout_g..ob + (grp + 1) * cout_g];
            for ci in 0..cin_g {
                let woff = ci * geo.out_channels + grp * cout_g;
                let wrow = &wt[woff..woff + cout_g];
                let xi = ib + grp * cin_g + ci;
                gx[xi] += go.iter().zip(wrow).map(|(a, b)| a * b).sum::<f64>();
                let xv = x[xi];
                for (gwv, gv) in gwt[woff..woff + cout_g].iter_mut().zip(go) {
                    *gwv += xv * gv;
                }
            }
        }
    });
    (gx, gw)
}

/// Per-axis source taps of half-pixel-centred bilinear interpolation:
/// `(lower index, upper index, upper weight)`.
pub fn linear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|d| {
            let pos = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (pos.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            let frac = if lo == hi { 0.0 } else { pos - lo as f64 };
            (lo, hi, frac)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResizePlan {
    pub batch: usize,
    pub channels: usize,
    pub src: (usize, usize),
    pub dst: (usize, usize),
}

impl ResizePlan {
    fn for_each(&self, mut f: impl FnMut(usize, usize, f64)) {
        let rows = linear_taps(self.src.0, self.dst.0);
        let cols = linear_taps(self.src.1, self.dst.1);
        let c = self.channels;
        let (sh, sw) = self.src;
        let (dh, dw) = self.dst;
        for n in 0..self.batch {
            for (y, &(y0, y1, fy)) in rows.iter().enumerate() {
                for (x, &(x0, x1, fx)) in cols.iter().enumerate() {
                    let out = ((n * dh + y) * dw + x) * c;
                    let taps = [
                        (y0, x0, (1.0 - fy) * (1.0 - fx)),
                        (y0, x1, (1.0 - fy) * fx),
                        (y1, x0, fy * (1.0 - fx)),
                        (y1, x1, fy * fx),
                    ];
                    for (sy, sx, wgt) in taps {
                        if wgt != 0.0 {
                            f(out, ((n * sh + sy) * sw + sx) * c, wgt);
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let c = self.channels;
        let mut out = vec![0.0; self.batch * self.dst.0 * self.dst.1 * c];
        self.for_each(|o, i, wgt| {
            for ch in 0..c {
                out[o + ch] += wgt * x[i + ch];
            }
        });
        out
    }

    pub fn backward(&self, g: &[f64]) -> Vec<f64> {
        let c = self.channels;
        let mut gx = vec![0.0; self.batch * self.src.0 * self.src.1 * c];
        self.for_each(|o, i, wgt| {
            for ch in 0..c {
                gx[i + ch] += wgt * g[o + ch];
            }
        });
        gx
    }
}

/// Splits `shape` around `axis` into `(outer, len, inner)`.
pub fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

pub fn softmax(x: &[f64], shape: &[usize], axis: usize, log: bool) -> Vec<f64> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * len + j) * inner + i;
            let max = (0..len).map(|j| x[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = (0..len).map(|j| (x[idx(j)] - max).exp()).sum();
            if log {
                let lse = total.ln();
                for j in 0..len {
                    out[idx(j)] = x[idx(j)] - max - lse;
                }
            } else {
                for j in 0..len {
                    out[idx(j)] = (x[idx(j)] - max).exp() / total;
                }
            }
        }
    }
    out
}

/// Adjoint of softmax (`log = false`, `y` = probabilities) or log-softmax
/// (`log = true`, `y` = log-probabilities).
pub fn softmax_backward(y: &[f64], g: &[f64], shape: &[usize], axis: usize, log: bool) -> Vec<f64> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut gx = vec![0.0; y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * len + j) * inner + i;
            if log {
                let gsum: f64 = (0..len).map(|j| g[idx(j)]).sum();
                for j in 0..len {
                    gx[idx(j)] = g[idx(j)] - y[idx(j)].exp() * gsum;
                }
            } else {
                let dot: f64 = (0..len).map(|j| g[idx(j)] * y[idx(j)]).sum();
                for j in 0..len {
                    gx[idx(j)] = y[idx(j)] * (g[idx(j)] - dot);
                }
            }
        }
    }
    gx
}

pub fn sum_axis(x: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        for j in 0..len {
            let src = &x[(o * len + j) * inner..][..inner];
            for (ov, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                *ov += v;
            }
        }
    }
    out
}

/// Repeats `g` (shape with `axis` removed) `len` times along `axis`.
pub fn expand_axis(g: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut out = vec![0.0; outer * len * inner];
    for o in 0..outer {
        for j in 0..len {
            out[(o * len + j) * inner..][..inner].copy_from_slice(&g[o * inner..(o + 1) * inner]);
        }
    }
    out
}

/// For every output element of `permute(x, axes)`, the flat index into `x`.
pub fn permute_index(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    gather_index(&out_shape, &src_strides)
}

/// For every output element of a broadcast from `in_shape` to `out_shape`,
/// the flat index into the input. Shapes align on their trailing axes.
pub fn broadcast_index(in_shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let lead = out_shape.len() - in_shape.len();
    let in_strides = strides(in_shape);
    let src_strides: Vec<usize> = (0..out_shape.len())
        .map(|i| {
            if i < lead || in_shape[i - lead] == 1 {
                0
            } else {
                in_strides[i - lead]
            }
        })
        .collect();
    gather_index(out_shape, &src_strides)
}

fn gather_index(out_shape: &[usize], src_strides: &[usize]) -> Vec<usize> {
    let total = numel(out_shape);
    let mut out = Vec::with_capacity(total);
    let rank = out_shape.len();
    let mut counter = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..total {
        out.push(offset);
        for d in (0..rank).rev() {
            counter[d] += 1;
            offset += src_strides[d];
            if counter[d] < out_shape[d] {
                break;
            }
            offset -= src_strides[d] * counter[d];
            counter[d] = 0;
        }
    }
    out
}
