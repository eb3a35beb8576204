//! Dense convolution kernels over contiguous NCHW buffers.
//!
//! All three kernels share one im2col/col2im lowering so that the forward
//! pass and both adjoints agree bit-for-bit on the sampling geometry.

use ndarray::{ArrayD, IxDyn};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub pad: usize,
    pub kernel: (usize, usize),
    pub input: (usize, usize),
    pub output: (usize, usize),
}

impl ConvGeom {
    /// Output extent of a strided convolution, or `None` when the window
    /// does not fit.
    pub fn conv_out(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
        let padded = input + 2 * pad;
        if padded < kernel || stride == 0 {
            return None;
        }
        Some((padded - kernel) / stride + 1)
    }

    pub fn new(
        input: (usize, usize),
        kernel: (usize, usize),
        stride: usize,
        pad: usize,
    ) -> Option<Self> {
        let oh = Self::conv_out(input.0, kernel.0, stride, pad)?;
        let ow = Self::conv_out(input.1, kernel.1, stride, pad)?;
        Some(Self {
            stride,
            pad,
            kernel,
            input,
            output: (oh, ow),
        })
    }

    fn col_rows(&self, channels: usize) -> usize {
        channels * self.kernel.0 * self.kernel.1
    }

    fn col_cols(&self) -> usize {
        self.output.0 * self.output.1
    }
}

/// Output columns `ox` whose input column `ox·s + kj − p` lies in `[0, w)`.
fn valid_cols(ow: usize, w: usize, s: usize, kj: usize, p: usize) -> (usize, usize) {
    let lo = if p > kj { (p - kj).div_ceil(s) } else { 0 };
    let hi = if w + p > kj { (w + p - kj).div_ceil(s).min(ow) } else { 0 };
    (lo.min(hi), hi)
}

fn im2col(x: &[f64], channels: usize, g: &ConvGeom, col: &mut [f64]) {
    let (h, w) = g.input;
    let (kh, kw) = g.kernel;
    let (oh, ow) = g.output;
    let (s, p) = (g.stride, g.pad);
    for ci in 0..channels {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let dst = &mut col[row * oh * ow..(row + 1) * oh * ow];
                let (lo, hi) = valid_cols(ow, w, s, kj, p);
                for oy in 0..oh {
                    let iy = (oy * s + ki) as isize - p as isize;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize || lo >= hi {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    line[..lo].fill(0.0);
                    line[hi..].fill(0.0);
                    let first = lo * s + kj - p;
                    if s == 1 {
                        line[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                    } else {
                        for (o, v) in line[lo..hi].iter_mut().zip(src[first..].iter().step_by(s)) {
                            *o = *v;
                        }
                    }
                }
            }
        }
    }
}

fn col2im(col: &[f64], channels: usize, g: &ConvGeom, x: &mut [f64]) {
    let (h, w) = g.input;
    let (kh, kw) = g.kernel;
    let (oh, ow) = g.output;
    let (s, p) = (g.stride, g.pad);
    for ci in 0..channels {
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let src = &col[row * oh * ow..(row + 1) * oh * ow];
                let (lo, hi) = valid_cols(ow, w, s, kj, p);
                if lo >= hi {
                    continue;
                }
                let first = lo * s + kj - p;
                for oy in 0..oh {
                    let iy = (oy * s + ki) as isize - p as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let line = &src[oy * ow + lo..oy * ow + hi];
                    if s == 1 {
                        for (d, v) in dst[first..first + hi - lo].iter_mut().zip(line) {
                            *d += *v;
                        }
                    } else {
                        for (d, v) in dst[first..].iter_mut().step_by(s).zip(line) {
                            *d += *v;
                        }
                    }
                }
            }
        }
    }
}

/// `c = a · b + beta · c` on row-major buffers, with optional transposes of
/// the stored operands. `a` is logically `m × k`, `b` is `k × n`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: bounds were checked above and the strides describe exactly the
    // row-major layout of each buffer.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn dims4(a: &ArrayD<f64>) -> [usize; 4] {
    let s = a.shape();
    assert_eq!(s.len(), 4, "expected a rank-4 tensor, got shape {s:?}");
    [s[0], s[1], s[2], s[3]]
}

fn contiguous(a: &ArrayD<f64>) -> std::borrow::Cow<'_, [f64]> {
    match a.as_slice() {
        Some(s) => std::borrow::Cow::Borrowed(s),
        None => std::borrow::Cow::Owned(a.iter().copied().collect()),
    }
}

/// Cross-correlation `x [N,C,H,W] ⋆ w [O,C,kh,kw] → [N,O,oh,ow]`.
pub fn conv2d(x: &ArrayD<f64>, w: &ArrayD<f64>, stride: usize, pad: usize) -> ArrayD<f64> {
    let [n, c, h, wd] = dims4(x);
    let [o, wc, kh, kw] = dims4(w);
    assert_eq!(c, wc, "conv2d channel mismatch: input {c}, weight {wc}");
    let g = ConvGeom::new((h, wd), (kh, kw), stride, pad).expect("conv window exceeds input");
    let (rows, cols) = (g.col_rows(c), g.col_cols());
    let xs = contiguous(x);
    let ws = contiguous(w);
    let mut col = vec![0.0; rows * cols];
    let mut out = vec![0.0; n * o * cols];
    for i in 0..n {
        im2col(&xs[i * c * h * wd..(i + 1) * c * h * wd], c, &g, &mut col);
        gemm(o, rows, cols, &ws, false, &col, false, 0.0, &mut out[i * o * cols..(i + 1) * o * cols]);
    }
    ArrayD::from_shape_vec(IxDyn(&[n, o, g.output.0, g.output.1]), out).unwrap()
}

/// Adjoint of [`conv2d`] with respect to its input: maps `g [N,O,oh,ow]` back
/// to `[N,C,H,W]` for the given input extent. This is also the transposed
/// convolution when `w` is read as `[C_in, C_out, kh, kw]`.
pub fn conv2d_input_grad(
    g: &ArrayD<f64>,
    w: &ArrayD<f64>,
    stride: usize,
    pad: usize,
    input: (usize, usize),
) -> ArrayD<f64> {
    let [n, o, oh, ow] = dims4(g);
    let [wo, c, kh, kw] = dims4(w);
    assert_eq!(o, wo, "conv2d_input_grad channel mismatch: grad {o}, weight {wo}");
    let geom = ConvGeom::new(input, (kh, kw), stride, pad).expect("conv window exceeds input");
    assert_eq!(geom.output, (oh, ow), "conv2d_input_grad: grad extent does not match input extent");
    let (rows, cols) = (geom.col_rows(c), geom.col_cols());
    let gs = contiguous(g);
    let ws = contiguous(w);
    let (h, wd) = input;
    let mut col = vec![0.0; rows * cols];
    let mut out = vec![0.0; n * c * h * wd];
    for i in 0..n {
        gemm(rows, o, cols, &ws, true, &gs[i * o * cols..(i + 1) * o * cols], false, 0.0, &mut col);
        col2im(&col, c, &geom, &mut out[i * c * h * wd..(i + 1) * c * h * wd]);
    }
    ArrayD::from_shape_vec(IxDyn(&[n, c, h, wd]), out).unwrap()
}

/// Adjoint of [`conv2d`] with respect to its weight.
pub fn conv2d_weight_grad(
    x: &ArrayD<f64>,
    g: &ArrayD<f64>,
    stride: usize,
    pad: usize,
    kernel: (usize, usize),
) -> ArrayD<f64> {
    let [n, c, h, wd] = dims4(x);
    let [gn, o, oh, ow] = dims4(g);
    assert_eq!(n, gn, "conv2d_weight_grad batch mismatch");
    let geom = ConvGeom::new((h, wd), kernel, stride, pad).expect("conv window exceeds input");
    assert_eq!(geom.output, (oh, ow), "conv2d_weight_grad: grad extent does not match input extent");
    let (rows, cols) = (geom.col_rows(c), geom.col_cols());
    let xs = contiguous(x);
    let gs = contiguous(g);
    let mut col = vec![0.0; rows * cols];
    let mut out = vec![0.0; o * rows];
    for i in 0..n {
        im2col(&xs[i * c * h * wd..(i + 1) * c * h * wd], c, &geom, &mut col);
        gemm(o, cols, rows, &gs[i * o * cols..(i + 1) * o * cols], false, &col, true, 1.0, &mut out);
    }
    ArrayD::from_shape_vec(IxDyn(&[o, c, kernel.0, kernel.1]), out).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    fn naive_conv(x: &Array4<f64>, w: &Array4<f64>, s: usize, p: usize) -> Array4<f64> {
        let (n, c, h, wd) = x.dim();
        let (o, _, kh, kw) = w.dim();
        let oh = (h + 2 * p - kh) / s + 1;
        let ow = (wd + 2 * p - kw) / s + 1;
        Array4::from_shape_fn((n, o, oh, ow), |(b, oc, y, xx)| {
            let mut acc = 0.0;
            for ic in 0..c {
                for i in 0..kh {
                    for j in 0..kw {
                        let iy = (y * s + i) as isize - p as isize;
                        let ix = (xx * s + j) as isize - p as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                            acc += x[[b, ic, iy as usize, ix as usize]] * w[[oc, ic, i, j]];
                        }
                    }
                }
            }
            acc
        })
    }

    fn ramp(shape: (usize, usize, usize, usize), seed: f64) -> Array4<f64> {
        let mut k = seed;
        Array4::from_shape_fn(shape, |_| {
            k = (k * 1.618_033 + 0.311).fract();
            k - 0.5
        })
    }

    #[test]
    fn conv_matches_direct_sum() {
        let x = ramp((2, 3, 7, 6), 0.1);
        let w = ramp((4, 3, 3, 2), 0.7);
        for (s, p) in [(1, 0), (1, 1), (2, 1), (3, 2), (1, 3), (2, 4)] {
            let got = conv2d(&x.clone().into_dyn(), &w.clone().into_dyn(), s, p);
            let want = naive_conv(&x, &w, s, p);
            for (a, b) in got.iter().zip(want.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn adjoints_satisfy_inner_product_identity() {
        // <conv(x, w), g> = <x, input_grad(g, w)> = <w, weight_grad(x, g)>
        let x = ramp((2, 3, 8, 7), 0.2).into_dyn();
        for (k, s, p) in [(4, 2, 1), (3, 1, 1), (7, 1, 3), (2, 3, 4), (1, 1, 0)] {
            let w = ramp((5, 3, k, k), 0.9).into_dyn();
            let y = conv2d(&x, &w, s, p);
            let g = y.mapv(|v| (v * 3.7).sin());
            let lhs: f64 = y.iter().zip(g.iter()).map(|(a, b)| a * b).sum();
            let gx = conv2d_input_grad(&g, &w, s, p, (8, 7));
            let mid: f64 = x.iter().zip(gx.iter()).map(|(a, b)| a * b).sum();
            let gw = conv2d_weight_grad(&x, &g, s, p, (k, k));
            let rhs: f64 = w.iter().zip(gw.iter()).map(|(a, b)| a * b).sum();
            assert!((lhs - mid).abs() < 1e-9 * lhs.abs().max(1.0), "k{k} s{s} p{p}");
            assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0), "k{k} s{s} p{p}");
        }
    }

    #[test]
    fn transposed_conv_doubles_extent() {
        // (in - 1)·S − 2P + K with K4 S2 P1 is exactly 2·in.
        let x = ramp((1, 2, 5, 3), 0.3).into_dyn();
        let w = ramp((2, 4, 4, 4), 0.5).into_dyn();
        let y = conv2d_input_grad(&x, &w, 2, 1, (10, 6));
        assert_eq!(y.shape(), &[1, 4, 10, 6]);
    }
}
