//! Forward/backward kernels over raw channels-last buffers.
//!
//! Feature maps are laid out `B × H × W × C` (time, frequency, channel).
//! Reductions accumulate in `f64`.

use super::gemm::{gemm, MatRef};

/// Spatial geometry of a 2-D (de)convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl ConvGeometry {
    pub fn new(kernel: (usize, usize), stride: (usize, usize), padding: (usize, usize)) -> Self {
        ConvGeometry {
            kernel,
            stride,
            padding,
        }
    }

    /// `1 × 1` kernel, unit stride, no padding.
    pub fn pointwise() -> Self {
        Self::new((1, 1), (1, 1), (0, 0))
    }

    pub(crate) fn is_pointwise(&self) -> bool {
        *self == Self::pointwise()
    }

    /// Output extents of the forward convolution, if valid.
    pub fn conv_out(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        Some((
            conv_extent(h, self.kernel.0, self.stride.0, self.padding.0)?,
            conv_extent(w, self.kernel.1, self.stride.1, self.padding.1)?,
        ))
    }

    /// Output extents of the transposed convolution, if valid.
    pub fn deconv_out(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        Some((
            deconv_extent(h, self.kernel.0, self.stride.0, self.padding.0)?,
            deconv_extent(w, self.kernel.1, self.stride.1, self.padding.1)?,
        ))
    }
}

fn conv_extent(input: usize, k: usize, s: usize, p: usize) -> Option<usize> {
    if s == 0 || k == 0 || input + 2 * p < k {
        return None;
    }
    Some((input + 2 * p - k) / s + 1)
}

fn deconv_extent(input: usize, k: usize, s: usize, p: usize) -> Option<usize> {
    if s == 0 || k == 0 || input == 0 {
        return None;
    }
    let full = (input - 1) * s + k;
    (full > 2 * p).then(|| full - 2 * p)
}

/// Dimensions of an image-like buffer `b × h × w × c`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Dims4 {
    pub b: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

/// Unfolds `x` (dims `src`) into patch rows `[b·oh·ow, kh·kw·c]`.
pub(crate) fn im2col(x: &[f32], src: Dims4, g: &ConvGeometry, oh: usize, ow: usize) -> Vec<f32> {
    let (kh, kw) = g.kernel;
    let (sh, sw) = g.stride;
    let (ph, pw) = g.padding;
    let c = src.c;
    let k = kh * kw * c;
    let mut cols = vec![0.0f32; src.b * oh * ow * k];
    for b in 0..src.b {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = ((b * oh + oy) * ow + ox) * k;
                for i in 0..kh {
                    let iy = (oy * sh + i) as isize - ph as isize;
                    if iy < 0 || iy as usize >= src.h {
                        continue;
                    }
                    let base = (b * src.h + iy as usize) * src.w;
                    for j in 0..kw {
                        let ix = (ox * sw + j) as isize - pw as isize;
                        if ix < 0 || ix as usize >= src.w {
                            continue;
                        }
                        let from = (base + ix as usize) * c;
                        let to = row + (i * kw + j) * c;
                        cols[to..to + c].copy_from_slice(&x[from..from + c]);
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-adds patch rows back into `out` (dims `dst`).
pub(crate) fn col2im(cols: &[f32], dst: Dims4, g: &ConvGeometry, oh: usize, ow: usize, out: &mut [f32]) {
    let (kh, kw) = g.kernel;
    let (sh, sw) = g.stride;
    let (ph, pw) = g.padding;
    let c = dst.c;
    let k = kh * kw * c;
    for b in 0..dst.b {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = ((b * oh + oy) * ow + ox) * k;
                for i in 0..kh {
                    let iy = (oy * sh + i) as isize - ph as isize;
                    if iy < 0 || iy as usize >= dst.h {
                        continue;
                    }
                    let base = (b * dst.h + iy as usize) * dst.w;
                    for j in 0..kw {
                        let ix = (ox * sw + j) as isize - pw as isize;
                        if ix < 0 || ix as usize >= dst.w {
                            continue;
                        }
                        let to = (base + ix as usize) * c;
                        let from = row + (i * kw + j) * c;
                        for (o, v) in out[to..to + c].iter_mut().zip(&cols[from..from + c]) {
                            *o += *v;
                        }
                    }
                }
            }
        }
    }
}

fn add_bias(out: &mut [f32], bias: &[f32]) {
    for row in out.chunks_exact_mut(bias.len()) {
        for (o, b) in row.iter_mut().zip(bias) {
            *o += *b;
        }
    }
}

pub(crate) fn bias_grad(gy: &[f32], channels: usize) -> Vec<f32> {
    let mut acc = vec![0.0f64; channels];
    for row in gy.chunks_exact(channels) {
        for (a, v) in acc.iter_mut().zip(row) {
            *a += *v as f64;
        }
    }
    acc.into_iter().map(|v| v as f32).collect()
}

/// Cross-correlation. `w` is `(kh, kw, cin, cout)`; returns `b × oh × ow × cout`.
pub(crate) fn conv2d_forward(
    x: &[f32],
    src: Dims4,
    w: &[f32],
    bias: Option<&[f32]>,
    cout: usize,
    g: &ConvGeometry,
    oh: usize,
    ow: usize,
) -> Vec<f32> {
    let k = g.kernel.0 * g.kernel.1 * src.c;
    let m = src.b * oh * ow;
    let mut out = vec![0.0f32; m * cout];
    if g.is_pointwise() {
        gemm(MatRef::new(x, m, k), MatRef::new(w, k, cout), &mut out, false);
    } else {
        let cols = im2col(x, src, g, oh, ow);
        gemm(MatRef::new(&cols, m, k), MatRef::new(w, k, cout), &mut out, false);
    }
    if let Some(b) = bias {
        add_bias(&mut out, b);
    }
    out
}

/// Gradients of [`conv2d_forward`] w.r.t. input and kernel.
pub(crate) fn conv2d_backward(
    gy: &[f32],
    x: &[f32],
    src: Dims4,
    w: &[f32],
    cout: usize,
    g: &ConvGeometry,
    oh: usize,
    ow: usize,
    need_x: bool,
    need_w: bool,
) -> (Option<Vec<f32>>, Option<Vec<f32>>) {
    let k = g.kernel.0 * g.kernel.1 * src.c;
    let m = src.b * oh * ow;
    let pointwise = g.is_pointwise();
    let gw = need_w.then(|| {
        let mut gw = vec![0.0f32; k * cout];
        if pointwise {
            gemm(MatRef::new(x, m, k).t(), MatRef::new(gy, m, cout), &mut gw, false);
        } else {
            let cols = im2col(x, src, g, oh, ow);
            gemm(MatRef::new(&cols, m, k).t(), MatRef::new(gy, m, cout), &mut gw, false);
        }
        gw
    });
    let gx = need_x.then(|| {
        let mut gcols = vec![0.0f32; m * k];
        gemm(MatRef::new(gy, m, cout), MatRef::new(w, k, cout).t(), &mut gcols, false);
        if pointwise {
            gcols
        } else {
            let mut gx = vec![0.0f32; src.b * src.h * src.w * src.c];
            col2im(&gcols, src, g, oh, ow, &mut gx);
            gx
        }
    });
    (gx, gw)
}

/// Transposed convolution: the adjoint of the convolution whose kernel is
/// `w = (kh, kw, cout, cin)` mapping `cout → cin` channels. `x` is
/// `b × h × w × cin`; the result is `b × oh × ow × cout`.
pub(crate) fn deconv2d_forward(
    x: &[f32],
    src: Dims4,
    w: &[f32],
    bias: Option<&[f32]>,
    cout: usize,
    g: &ConvGeometry,
    oh: usize,
    ow: usize,
) -> Vec<f32> {
    let k = g.kernel.0 * g.kernel.1 * cout;
    let m = src.b * src.h * src.w;
    let mut cols = vec![0.0f32; m * k];
    gemm(MatRef::new(x, m, src.c), MatRef::new(w, k, src.c).t(), &mut cols, false);
    let dst = Dims4 {
        b: src.b,
        h: oh,
        w: ow,
        c: cout,
    };
    let mut out = vec![0.0f32; src.b * oh * ow * cout];
    col2im(&cols, dst, g, src.h, src.w, &mut out);
    if let Some(b) = bias {
        add_bias(&mut out, b);
    }
    out
}

pub(crate) fn deconv2d_backward(
    gy: &[f32],
    x: &[f32],
    src: Dims4,
    w: &[f32],
    cout: usize,
    g: &ConvGeometry,
    oh: usize,
    ow: usize,
    need_x: bool,
    need_w: bool,
) -> (Option<Vec<f32>>, Option<Vec<f32>>) {
    let k = g.kernel.0 * g.kernel.1 * cout;
    let m = src.b * src.h * src.w;
    let dst = Dims4 {
        b: src.b,
        h: oh,
        w: ow,
        c: cout,
    };
    let gcols = im2col(gy, dst, g, src.h, src.w);
    let gx = need_x.then(|| {
        let mut gx = vec![0.0f32; m * src.c];
        gemm(MatRef::new(&gcols, m, k), MatRef::new(w, k, src.c), &mut gx, false);
        gx
    });
    let gw = need_w.then(|| {
        let mut gw = vec![0.0f32; k * src.c];
        gemm(MatRef::new(&gcols, m, k).t(), MatRef::new(x, m, src.c), &mut gw, false);
        gw
    });
    (gx, gw)
}

/// Per-(item, channel) statistics over the plane for `x` viewed `b × p × c`.
pub(crate) fn instance_stats(x: &[f32], b: usize, p: usize, c: usize, eps: f64) -> (Vec<f32>, Vec<f32>) {
    let mut means = vec![0.0f32; b * c];
    let mut inv_stds = vec![0.0f32; b * c];
    for bi in 0..b {
        let plane = &x[bi * p * c..(bi + 1) * p * c];
        let mut sum = vec![0.0f64; c];
        for row in plane.chunks_exact(c) {
            for (s, v) in sum.iter_mut().zip(row) {
                *s += *v as f64;
            }
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / p as f64).collect();
        let mut sq = vec![0.0f64; c];
        for row in plane.chunks_exact(c) {
            for ((s, v), m) in sq.iter_mut().zip(row).zip(&mean) {
                let d = *v as f64 - m;
                *s += d * d;
            }
        }
        for ci in 0..c {
            means[bi * c + ci] = mean[ci] as f32;
            inv_stds[bi * c + ci] = (1.0 / (sq[ci] / p as f64 + eps).sqrt()) as f32;
        }
    }
    (means, inv_stds)
}

/// Dot products `Σ a·b` accumulated in `f64`.
pub(crate) fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum()
}

pub(crate) fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f32) -> f32 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Row-wise softmax over contiguous rows of length `n`.
pub(crate) fn softmax_rows(x: &[f32], n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; x.len()];
    let mut exps = vec![0.0f64; n];
    for (row, o) in x.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f64;
        for (v, e) in row.iter().zip(exps.iter_mut()) {
            *e = ((*v - max) as f64).exp();
            sum += *e;
        }
        for (e, o) in exps.iter().zip(o.iter_mut()) {
            *o = (*e / sum) as f32;
        }
    }
    out
}

/// Strides of a row-major shape.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Axis permutation: `out.shape[i] = shape[perm[i]]`.
pub(crate) fn permute(x: &[f32], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<f32>) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let rank = shape.len();
    let mut out = Vec::with_capacity(x.len());
    let inner = out_shape[rank - 1];
    let inner_stride = src_strides[rank - 1];
    let mut idx = vec![0usize; rank - 1];
    let outer: usize = out_shape[..rank - 1].iter().product();
    for _ in 0..outer {
        let base: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        for j in 0..inner {
            out.push(x[base + j * inner_stride]);
        }
        for d in (0..rank - 1).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    (out_shape, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extents_follow_shape_formulas() {
        let g = ConvGeometry::new((3, 5), (1, 2), (1, 2));
        assert_eq!(g.conv_out(108, 257), Some((108, 129)));
        assert_eq!(g.conv_out(108, 129), Some((108, 65)));
        assert_eq!(g.conv_out(108, 65), Some((108, 33)));
        assert_eq!(g.deconv_out(108, 33), Some((108, 65)));
        assert_eq!(g.deconv_out(108, 129), Some((108, 257)));
        assert_eq!(ConvGeometry::new((5, 5), (1, 1), (0, 0)).conv_out(3, 3), None);
    }

    #[test]
    fn permute_swaps_axes() {
        let x: Vec<f32> = (0..6).map(|v| v as f32).collect();
        let (s, y) = permute(&x, &[2, 3], &[1, 0]);
        assert_eq!(s, vec![3, 2]);
        assert_eq!(y, vec![0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
    }

    #[test]
    fn softplus_is_stable_and_positive() {
        assert!((softplus(0.0) - std::f32::consts::LN_2).abs() < 1e-7);
        assert_eq!(softplus(100.0), 100.0);
        assert!(softplus(-100.0) >= 0.0);
    }
}
