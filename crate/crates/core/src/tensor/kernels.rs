//! Raw loops behind the tape operations.
//!
//! Work is split over output planes or rows only; every element is produced
//! by one fixed-order reduction, so results do not depend on thread count.

use rayon::prelude::*;

use super::Scalar;
use crate::error::{Error, Result};

/// Resolved shape bookkeeping for one `conv2d` call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub out_h: usize,
    pub out_w: usize,
}

/// `floor((extent + 2·padding − kernel) / stride) + 1`, or `None` when empty.
pub fn conv_out_extent(extent: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = extent + 2 * padding;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

impl ConvGeometry {
    pub fn new(
        input: &[usize],
        kernel: &[usize],
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Self> {
        if input.len() != 4 {
            return Err(Error::Dimension {
                op: "conv2d",
                axis: "input rank",
                expected: 4,
                actual: input.len(),
            });
        }
        if kernel.len() != 4 {
            return Err(Error::Dimension {
                op: "conv2d",
                axis: "kernel rank",
                expected: 4,
                actual: kernel.len(),
            });
        }
        if stride == 0 || groups == 0 {
            return Err(Error::geometry("stride and groups must be positive"));
        }
        let (batch, in_channels, height, width) = (input[0], input[1], input[2], input[3]);
        let (out_channels, k_in, kernel_h, kernel_w) = (kernel[0], kernel[1], kernel[2], kernel[3]);
        if in_channels % groups != 0 {
            return Err(Error::Dimension {
                op: "conv2d",
                axis: "input channels (not divisible by groups)",
                expected: groups * (in_channels / groups).max(1),
                actual: in_channels,
            });
        }
        if out_channels % groups != 0 {
            return Err(Error::Dimension {
                op: "conv2d",
                axis: "output channels (not divisible by groups)",
                expected: groups * (out_channels / groups).max(1),
                actual: out_channels,
            });
        }
        if k_in != in_channels / groups {
            return Err(Error::Dimension {
                op: "conv2d",
                axis: "kernel input channels",
                expected: in_channels / groups,
                actual: k_in,
            });
        }
        let out_h = conv_out_extent(height, kernel_h, stride, padding);
        let out_w = conv_out_extent(width, kernel_w, stride, padding);
        let (Some(out_h), Some(out_w)) = (out_h, out_w) else {
            return Err(Error::geometry(format!(
                "conv2d: {kernel_h}x{kernel_w} kernel with padding {padding} does not fit {height}x{width} input"
            )));
        };
        Ok(Self {
            batch,
            in_channels,
            height,
            width,
            out_channels,
            kernel_h,
            kernel_w,
            stride,
            padding,
            groups,
            out_h,
            out_w,
        })
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.out_channels, self.out_h, self.out_w]
    }

    fn in_per_group(&self) -> usize {
        self.in_channels / self.groups
    }

    fn out_per_group(&self) -> usize {
        self.out_channels / self.groups
    }

    fn kernel_area(&self) -> usize {
        self.kernel_h * self.kernel_w
    }

    /// Input row for output row `oy` and kernel row `ky`, if inside the image.
    fn input_row(&self, oy: usize, ky: usize) -> Option<usize> {
        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
        (iy >= 0 && (iy as usize) < self.height).then_some(iy as usize)
    }

    /// Half-open range of output columns whose tap `kx` lands inside the row.
    fn column_ranges(&self) -> Vec<(usize, usize)> {
        (0..self.kernel_w)
            .map(|kx| {
                let s = self.stride as isize;
                let shift = kx as isize - self.padding as isize;
                // ix = ox*s + shift must satisfy 0 <= ix < width
                let lo = if shift >= 0 { 0 } else { (-shift + s - 1) / s };
                let hi_incl = (self.width as isize - 1 - shift).div_euclid(s);
                let lo = lo.max(0) as usize;
                let hi = ((hi_incl + 1).max(0) as usize).min(self.out_w);
                (lo.min(hi), hi)
            })
            .collect()
    }

    fn is_pointwise(&self) -> bool {
        self.kernel_h == 1 && self.kernel_w == 1 && self.stride == 1 && self.padding == 0
    }
}

/// Dot product with a fixed eight-lane accumulation order.
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut lo = [T::zero(); 4];
    let mut hi = [T::zero(); 4];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            lo[l] = lo[l] + x[l] * y[l];
            hi[l] = hi[l] + x[l + 4] * y[l + 4];
        }
    }
    let mut tail = T::zero();
    for (x, y) in ra.iter().zip(rb) {
        tail = tail + *x * *y;
    }
    ((lo[0] + hi[0]) + (lo[1] + hi[1])) + ((lo[2] + hi[2]) + (lo[3] + hi[3])) + tail
}

/// Fixed-order sum.
pub(crate) fn sum<T: Scalar>(a: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let chunks = a.chunks_exact(8);
    let rem = chunks.remainder();
    for x in chunks {
        for l in 0..8 {
            acc[l] = acc[l] + x[l];
        }
    }
    let mut tail = T::zero();
    for x in rem {
        tail = tail + *x;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

#[inline]
fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv = *yv + alpha * *xv;
    }
}

/// `[rows, cols]` to `[cols, rows]`.
fn transpose<T: Scalar>(src: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * cols + c];
        }
    }
    out
}

/// Batch-major `[N, C, P]` to channel-major `[C, N·P]`.
fn channel_major<T: Scalar>(src: &[T], batch: usize, channels: usize, plane: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(src.len());
    for c in 0..channels {
        for n in 0..batch {
            out.extend_from_slice(&src[(n * channels + c) * plane..][..plane]);
        }
    }
    out
}

/// Dense 1×1 convolution as one dot per output value: `out[n,o,p] = Σ_i w[o,i]·x[n,i,p]`.
fn pointwise<T: Scalar>(batch: usize, cin: usize, cout: usize, plane: usize, x: &[T], w: &[T], bias: Option<&[T]>) -> Vec<T> {
    let xt: Vec<Vec<T>> = (0..batch)
        .into_par_iter()
        .map(|n| transpose(&x[n * cin * plane..][..cin * plane], cin, plane))
        .collect();
    let mut out = vec![T::zero(); batch * cout * plane];
    out.par_chunks_mut(plane).enumerate().for_each(|(idx, o)| {
        let (n, co) = (idx / cout, idx % cout);
        let wr = &w[co * cin..][..cin];
        let b = bias.map_or(T::zero(), |b| b[co]);
        let x = &xt[n];
        let row = |p: usize| &x[p * cin..][..cin];
        let blocked = plane - plane % 4;
        for p in (0..blocked).step_by(4) {
            for r in 0..4 {
                o[p + r] = b + dot(wr, row(p + r));
            }
        }
        for p in blocked..plane {
            o[p] = b + dot(wr, row(p));
        }
    });
    out
}

pub(crate) fn conv2d_forward<T: Scalar>(
    g: &ConvGeometry,
    input: &[T],
    kernel: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let plane = g.out_h * g.out_w;
    let in_plane = g.height * g.width;
    let (cin_pg, cout_pg, kk) = (g.in_per_group(), g.out_per_group(), g.kernel_area());
    let cols = g.column_ranges();
    if g.is_pointwise() && g.groups == 1 {
        return pointwise(g.batch, g.in_channels, g.out_channels, plane, input, kernel, bias);
    }
    let mut out = vec![T::zero(); g.batch * g.out_channels * plane];

    out.par_chunks_mut(plane).enumerate().for_each(|(idx, o)| {
        let (n, co) = (idx / g.out_channels, idx % g.out_channels);
        if let Some(b) = bias {
            o.fill(b[co]);
        }
        let group = co / cout_pg;
        for cil in 0..cin_pg {
            let ci = group * cin_pg + cil;
            let inp = &input[(n * g.in_channels + ci) * in_plane..][..in_plane];
            let kbase = (co * cin_pg + cil) * kk;
            if g.is_pointwise() {
                axpy(kernel[kbase], inp, o);
                continue;
            }
            for ky in 0..g.kernel_h {
                for oy in 0..g.out_h {
                    let Some(iy) = g.input_row(oy, ky) else { continue };
                    let row = &inp[iy * g.width..][..g.width];
                    let orow = &mut o[oy * g.out_w..][..g.out_w];
                    for (kx, &(lo, hi)) in cols.iter().enumerate() {
                        if lo >= hi {
                            continue;
                        }
                        let wv = kernel[kbase + ky * g.kernel_w + kx];
                        let start = lo * g.stride + kx - g.padding;
                        if g.stride == 1 {
                            axpy(wv, &row[start..start + (hi - lo)], &mut orow[lo..hi]);
                        } else {
                            for (j, ov) in orow[lo..hi].iter_mut().enumerate() {
                                *ov = *ov + wv * row[start + j * g.stride];
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

/// Gradient with respect to the convolution input.
pub(crate) fn conv2d_backward_input<T: Scalar>(
    g: &ConvGeometry,
    grad_out: &[T],
    kernel: &[T],
) -> Vec<T> {
    let plane = g.out_h * g.out_w;
    let in_plane = g.height * g.width;
    let (cin_pg, cout_pg, kk) = (g.in_per_group(), g.out_per_group(), g.kernel_area());
    let cols = g.column_ranges();
    if g.is_pointwise() && g.groups == 1 {
        let wt = transpose(kernel, g.out_channels, g.in_channels);
        return pointwise(g.batch, g.out_channels, g.in_channels, plane, grad_out, &wt, None);
    }
    let mut grad_in = vec![T::zero(); g.batch * g.in_channels * in_plane];

    grad_in.par_chunks_mut(in_plane).enumerate().for_each(|(idx, gi)| {
        let (n, ci) = (idx / g.in_channels, idx % g.in_channels);
        let (group, cil) = (ci / cin_pg, ci % cin_pg);
        for co in group * cout_pg..(group + 1) * cout_pg {
            let go = &grad_out[(n * g.out_channels + co) * plane..][..plane];
            let kbase = (co * cin_pg + cil) * kk;
            if g.is_pointwise() {
                axpy(kernel[kbase], go, gi);
                continue;
            }
            for ky in 0..g.kernel_h {
                for oy in 0..g.out_h {
                    let Some(iy) = g.input_row(oy, ky) else { continue };
                    let gorow = &go[oy * g.out_w..][..g.out_w];
                    let girow = &mut gi[iy * g.width..][..g.width];
                    for (kx, &(lo, hi)) in cols.iter().enumerate() {
                        if lo >= hi {
                            continue;
                        }
                        let wv = kernel[kbase + ky * g.kernel_w + kx];
                        let start = lo * g.stride + kx - g.padding;
                        if g.stride == 1 {
                            axpy(wv, &gorow[lo..hi], &mut girow[start..start + (hi - lo)]);
                        } else {
                            for (j, gv) in gorow[lo..hi].iter().enumerate() {
                                let t = &mut girow[start + j * g.stride];
                                *t = *t + wv * *gv;
                            }
                        }
                    }
                }
            }
        }
    });
    grad_in
}

/// Gradient with respect to the kernel, laid out like the kernel.
pub(crate) fn conv2d_backward_kernel<T: Scalar>(
    g: &ConvGeometry,
    grad_out: &[T],
    input: &[T],
) -> Vec<T> {
    let plane = g.out_h * g.out_w;
    let in_plane = g.height * g.width;
    let (cin_pg, cout_pg, kk) = (g.in_per_group(), g.out_per_group(), g.kernel_area());
    let cols = g.column_ranges();
    let mut grad_k = vec![T::zero(); g.out_channels * cin_pg * kk];
    if g.is_pointwise() && g.groups == 1 {
        let go = channel_major(grad_out, g.batch, g.out_channels, plane);
        let x = channel_major(input, g.batch, g.in_channels, in_plane);
        let len = g.batch * plane;
        grad_k.par_chunks_mut(g.in_channels).enumerate().for_each(|(co, row)| {
            let gr = &go[co * len..][..len];
            let col = |ci: usize| &x[ci * len..][..len];
            let blocked = row.len() - row.len() % 4;
            for ci in (0..blocked).step_by(4) {
                for r in 0..4 {
                    row[ci + r] = dot(gr, col(ci + r));
                }
            }
            for ci in blocked..row.len() {
                row[ci] = dot(gr, col(ci));
            }
        });
        return grad_k;
    }

    grad_k
        .par_chunks_mut(cin_pg * kk)
        .enumerate()
        .for_each(|(co, gk)| {
            let group = co / cout_pg;
            for cil in 0..cin_pg {
                let ci = group * cin_pg + cil;
                for ky in 0..g.kernel_h {
                    for (kx, &(lo, hi)) in cols.iter().enumerate() {
                        let mut acc = T::zero();
                        if lo >= hi && !g.is_pointwise() {
                            gk[cil * kk + ky * g.kernel_w + kx] = acc;
                            continue;
                        }
                        for n in 0..g.batch {
                            let go = &grad_out[(n * g.out_channels + co) * plane..][..plane];
                            let inp = &input[(n * g.in_channels + ci) * in_plane..][..in_plane];
                            if g.is_pointwise() {
                                acc = acc + dot(go, inp);
                                continue;
                            }
                            let start = lo * g.stride + kx - g.padding;
                            for oy in 0..g.out_h {
                                let Some(iy) = g.input_row(oy, ky) else { continue };
                                let gorow = &go[oy * g.out_w + lo..oy * g.out_w + hi];
                                let row = &inp[iy * g.width..][..g.width];
                                if g.stride == 1 {
                                    acc = acc + dot(gorow, &row[start..start + (hi - lo)]);
                                } else {
                                    for (j, gv) in gorow.iter().enumerate() {
                                        acc = acc + *gv * row[start + j * g.stride];
                                    }
                                }
                            }
                        }
                        gk[cil * kk + ky * g.kernel_w + kx] = acc;
                    }
                }
            }
        });
    grad_k
}

/// Per-channel sums of a `[N, C, H, W]` gradient (bias gradient).
pub(crate) fn channel_sums<T: Scalar>(
    data: &[T],
    batch: usize,
    channels: usize,
    plane: usize,
) -> Vec<T> {
    (0..channels)
        .into_par_iter()
        .map(|c| {
            let mut acc = T::zero();
            for n in 0..batch {
                acc = acc + sum(&data[(n * channels + c) * plane..][..plane]);
            }
            acc
        })
        .collect()
}

/// Channel sums of an elementwise product (`Σ a·b` per channel).
pub(crate) fn channel_dots<T: Scalar>(
    a: &[T],
    b: &[T],
    batch: usize,
    channels: usize,
    plane: usize,
) -> Vec<T> {
    (0..channels)
        .into_par_iter()
        .map(|c| {
            let mut acc = T::zero();
            for n in 0..batch {
                let off = (n * channels + c) * plane;
                acc = acc + dot(&a[off..off + plane], &b[off..off + plane]);
            }
            acc
        })
        .collect()
}

/// `out[n,:] = bias + x[n,:] · w` for `x: [N,F]`, `w: [F,K]`.
pub(crate) fn dense_forward<T: Scalar>(
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
    features: usize,
    outputs: usize,
) -> Vec<T> {
    let batch = x.len() / features;
    let mut out = vec![T::zero(); batch * outputs];
    out.par_chunks_mut(outputs).enumerate().for_each(|(n, o)| {
        if let Some(b) = bias {
            o.copy_from_slice(b);
        }
        let xr = &x[n * features..][..features];
        for (f, &xv) in xr.iter().enumerate() {
            axpy(xv, &w[f * outputs..][..outputs], o);
        }
    });
    out
}

/// Returns `(dx, dw)` for the dense map.
pub(crate) fn dense_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    grad_out: &[T],
    features: usize,
    outputs: usize,
) -> (Vec<T>, Vec<T>) {
    let batch = x.len() / features;
    let mut dx = vec![T::zero(); batch * features];
    dx.par_chunks_mut(features).enumerate().for_each(|(n, row)| {
        let go = &grad_out[n * outputs..][..outputs];
        for (f, v) in row.iter_mut().enumerate() {
            *v = dot(go, &w[f * outputs..][..outputs]);
        }
    });
    let mut dw = vec![T::zero(); features * outputs];
    dw.par_chunks_mut(outputs).enumerate().for_each(|(f, row)| {
        for n in 0..batch {
            axpy(x[n * features + f], &grad_out[n * outputs..][..outputs], row);
        }
    });
    (dx, dw)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn out_extent_formula() {
        assert_eq!(conv_out_extent(256, 3, 2, 1), Some(128));
        assert_eq!(conv_out_extent(5, 5, 1, 0), Some(1));
        assert_eq!(conv_out_extent(2, 3, 1, 0), None);
        assert_eq!(conv_out_extent(7, 3, 2, 0), Some(3));
    }

    #[test]
    fn column_ranges_stay_in_bounds() {
        for w in 1..=8 {
            for k in [1, 3, 5] {
                for s in 1..=3 {
                    for p in 0..=2 {
                        let Ok(g) = ConvGeometry::new(&[1, 1, w, w], &[1, 1, k, k], s, p, 1) else {
                            continue;
                        };
                        for (kx, (lo, hi)) in g.column_ranges().into_iter().enumerate() {
                            for ox in 0..g.out_w {
                                let ix = (ox * s + kx) as isize - p as isize;
                                let inside = ix >= 0 && (ix as usize) < w;
                                assert_eq!(inside, ox >= lo && ox < hi, "w={w} k={k} s={s} p={p}");
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn dot_and_sum_agree_with_naive() {
        let a: Vec<f64> = (0..37).map(|i| i as f64 * 0.5).collect();
        let b: Vec<f64> = (0..37).map(|i| 1.0 - i as f64 * 0.25).collect();
        let naive: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot(&a, &b) - naive).abs() < 1e-9);
        assert!((sum(&a) - a.iter().sum::<f64>()).abs() < 1e-12);
    }
}
