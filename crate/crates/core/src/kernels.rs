//! Numeric kernels with their adjoints.
//!
//! Every function here is deterministic: batch items may be processed in
//! parallel, but any reduction across items runs sequentially in item order.

use crate::tensor::{Shape, Tensor};
use rayon::prelude::*;

/// Geometry of a 2-D convolution with symmetric zero padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    /// "Same" padding for odd kernels: output extent is `ceil(input / stride)`.
    pub fn same(kernel: usize, stride: usize) -> Self {
        ConvGeometry {
            kernel,
            stride,
            pad: (kernel - 1) / 2,
        }
    }

    pub fn out_extent(&self, input: usize) -> usize {
        (input + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

/// `c = a (m x k) * b (k x n)`, all row-major and contiguous.
fn gemm(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], beta: f64, c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    // SAFETY: slice lengths checked above; strides describe contiguous row-major storage.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c = a^T (m x k, stored k x m) * b (k x n)`.
fn gemm_at(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    // SAFETY: `a` is k x m row-major, read transposed through its strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            1,
            m as isize,
            b.as_ptr(),
            n as isize,
            1,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c += a (m x k) * b^T (b stored n x k)`.
fn gemm_bt_acc(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    // SAFETY: `b` is n x k row-major, read transposed through its strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            1,
            k as isize,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn im2col(
    input: &[f64],
    (c, h, w): (usize, usize, usize),
    g: ConvGeometry,
    (ho, wo): (usize, usize),
) -> Vec<f64> {
    let k = g.kernel;
    let p = ho * wo;
    let mut cols = vec![0.0; c * k * k * p];
    for ci in 0..c {
        let plane = &input[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            let (y_lo, y_hi) = valid_range(ky, g, h, ho);
            for kx in 0..k {
                let (x_lo, x_hi) = valid_range(kx, g, w, wo);
                if x_lo >= x_hi {
                    continue;
                }
                let row = ((ci * k + ky) * k + kx) * p;
                let dst = &mut cols[row..row + p];
                for oy in y_lo..y_hi {
                    let iy = oy * g.stride + ky - g.pad;
                    let src = &plane[iy * w..(iy + 1) * w];
                    let d = &mut dst[oy * wo + x_lo..oy * wo + x_hi];
                    let ix0 = x_lo * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        d.copy_from_slice(&src[ix0..ix0 + d.len()]);
                    } else {
                        for (j, v) in d.iter_mut().enumerate() {
                            *v = src[ix0 + j * g.stride];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Output positions `[lo, hi)` whose tap at kernel offset `kk` lands inside
/// an input of length `len`.
fn valid_range(kk: usize, g: ConvGeometry, len: usize, out: usize) -> (usize, usize) {
    // Need 0 <= o * stride + kk - pad < len.
    let lo = if kk >= g.pad { 0 } else { (g.pad - kk).div_ceil(g.stride) };
    let hi = if len + g.pad > kk {
        ((len + g.pad - kk - 1) / g.stride + 1).min(out)
    } else {
        0
    };
    (lo.min(hi), hi)
}

fn col2im(
    cols: &[f64],
    (c, h, w): (usize, usize, usize),
    g: ConvGeometry,
    (ho, wo): (usize, usize),
    out: &mut [f64],
) {
    let k = g.kernel;
    let p = ho * wo;
    for ci in 0..c {
        let plane = &mut out[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            let (y_lo, y_hi) = valid_range(ky, g, h, ho);
            for kx in 0..k {
                let (x_lo, x_hi) = valid_range(kx, g, w, wo);
                if x_lo >= x_hi {
                    continue;
                }
                let row = ((ci * k + ky) * k + kx) * p;
                let src = &cols[row..row + p];
                for oy in y_lo..y_hi {
                    let iy = oy * g.stride + ky - g.pad;
                    let dst = &mut plane[iy * w..(iy + 1) * w];
                    let s = &src[oy * wo + x_lo..oy * wo + x_hi];
                    let ix0 = x_lo * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        for (d, v) in dst[ix0..ix0 + s.len()].iter_mut().zip(s) {
                            *d += v;
                        }
                    } else {
                        for (j, v) in s.iter().enumerate() {
                            dst[ix0 + j * g.stride] += v;
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_out_shape(input: Shape, out_channels: usize, g: ConvGeometry) -> Shape {
    Shape::new(input.n, out_channels, g.out_extent(input.h), g.out_extent(input.w))
}

/// Weight layout: `out_channels x in_channels x k x k`.
pub fn conv2d_forward(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    g: ConvGeometry,
) -> Tensor {
    let s = input.shape();
    let ws = weight.shape();
    assert_eq!(ws.c, s.c, "conv input channels mismatch");
    assert_eq!((ws.h, ws.w), (g.kernel, g.kernel), "conv kernel mismatch");
    let out_shape = conv2d_out_shape(s, ws.n, g);
    let (ho, wo) = (out_shape.h, out_shape.w);
    let kdim = s.c * g.kernel * g.kernel;
    let mut out = Tensor::zeros(out_shape);
    let item_out = out_shape.item();
    out.data_mut()
        .par_chunks_mut(item_out)
        .enumerate()
        .for_each(|(n, dst)| {
            let src = input.item(n);
            if g.is_pointwise() {
                gemm(ws.n, kdim, ho * wo, weight.data(), src, 0.0, dst);
            } else {
                let cols = im2col(src, (s.c, s.h, s.w), g, (ho, wo));
                gemm(ws.n, kdim, ho * wo, weight.data(), &cols, 0.0, dst);
            }
            if let Some(b) = bias {
                for (co, plane) in dst.chunks_mut(ho * wo).enumerate() {
                    let bv = b.data()[co];
                    plane.iter_mut().for_each(|v| *v += bv);
                }
            }
        });
    out
}

pub struct ConvGrads {
    /// Empty when the input gradient was not requested.
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    has_bias: bool,
    need_input: bool,
    g: ConvGeometry,
    grad_out: &Tensor,
) -> ConvGrads {
    let s = input.shape();
    let ws = weight.shape();
    let os = grad_out.shape();
    let (ho, wo) = (os.h, os.w);
    let p = ho * wo;
    let kdim = s.c * g.kernel * g.kernel;

    let per_item: Vec<(Vec<f64>, Vec<f64>)> = (0..s.n)
        .into_par_iter()
        .map(|n| {
            let src = input.item(n);
            let dout = grad_out.item(n);
            let mut dw = vec![0.0; ws.n * kdim];
            let mut din = if need_input { vec![0.0; s.item()] } else { Vec::new() };
            if g.is_pointwise() {
                gemm_bt_acc(ws.n, p, kdim, dout, src, &mut dw);
                if need_input {
                    gemm_at(kdim, ws.n, p, weight.data(), dout, &mut din);
                }
            } else {
                let cols = im2col(src, (s.c, s.h, s.w), g, (ho, wo));
                gemm_bt_acc(ws.n, p, kdim, dout, &cols, &mut dw);
                if need_input {
                    let mut dcols = vec![0.0; kdim * p];
                    gemm_at(kdim, ws.n, p, weight.data(), dout, &mut dcols);
                    col2im(&dcols, (s.c, s.h, s.w), g, (ho, wo), &mut din);
                }
            }
            (din, dw)
        })
        .collect();

    let mut grad_in = Vec::with_capacity(if need_input { s.len() } else { 0 });
    let mut grad_w = vec![0.0; ws.len()];
    for (din, dw) in per_item {
        grad_in.extend_from_slice(&din);
        for (a, b) in grad_w.iter_mut().zip(&dw) {
            *a += b;
        }
    }
    let bias = has_bias.then(|| {
        let mut gb = vec![0.0; ws.n];
        for n in 0..os.n {
            for (co, slot) in gb.iter_mut().enumerate() {
                *slot += grad_out.plane(n, co).iter().sum::<f64>();
            }
        }
        Tensor::vector(gb)
    });
    let input_grad = if need_input {
        Tensor::from_vec(s, grad_in)
    } else {
        Tensor::zeros(Shape::new(0, 0, 0, 0))
    };
    ConvGrads {
        input: input_grad,
        weight: Tensor::from_vec(ws, grad_w),
        bias,
    }
}

/// Multiply-accumulates performed by a convolution producing `out`.
pub fn conv2d_macs(in_channels: usize, out: Shape, kernel: usize) -> u64 {
    (out.n * out.c * out.h * out.w * in_channels * kernel * kernel) as u64
}

pub const BN_EPS: f64 = 1e-5;

pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub fn batch_stats(x: &Tensor) -> BatchStats {
    let s = x.shape();
    let m = (s.n * s.plane()) as f64;
    let mut mean = vec![0.0; s.c];
    let mut var = vec![0.0; s.c];
    for c in 0..s.c {
        let mut acc = 0.0;
        for n in 0..s.n {
            acc += x.plane(n, c).iter().sum::<f64>();
        }
        let mu = acc / m;
        let mut sq = 0.0;
        for n in 0..s.n {
            sq += x.plane(n, c).iter().map(|v| (v - mu) * (v - mu)).sum::<f64>();
        }
        mean[c] = mu;
        var[c] = sq / m;
    }
    BatchStats { mean, var }
}

/// Affine per-channel normalization `gamma * (x - mean) / sqrt(var + eps) + beta`.
/// Returns the output and the normalized input.
pub fn batch_norm_apply(
    x: &Tensor,
    mean: &[f64],
    var: &[f64],
    gamma: &[f64],
    beta: &[f64],
) -> (Tensor, Tensor) {
    let s = x.shape();
    let mut xhat = Tensor::zeros(s);
    let mut y = Tensor::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            let inv = 1.0 / (var[c] + BN_EPS).sqrt();
            let src = x.plane(n, c);
            let hat: Vec<f64> = src.iter().map(|v| (v - mean[c]) * inv).collect();
            for (d, h) in y.plane_mut(n, c).iter_mut().zip(&hat) {
                *d = gamma[c] * h + beta[c];
            }
            xhat.plane_mut(n, c).copy_from_slice(&hat);
        }
    }
    (y, xhat)
}

pub struct BnGrads {
    pub input: Tensor,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

/// Adjoint of batch normalization. With `batch_statistics` the mean and
/// variance are functions of the input; otherwise they are constants.
pub fn batch_norm_backward(
    grad_out: &Tensor,
    xhat: &Tensor,
    var: &[f64],
    gamma: &[f64],
    batch_statistics: bool,
) -> BnGrads {
    let s = grad_out.shape();
    let m = (s.n * s.plane()) as f64;
    let mut dgamma = vec![0.0; s.c];
    let mut dbeta = vec![0.0; s.c];
    for c in 0..s.c {
        for n in 0..s.n {
            let g = grad_out.plane(n, c);
            let h = xhat.plane(n, c);
            dbeta[c] += g.iter().sum::<f64>();
            dgamma[c] += g.iter().zip(h).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    let mut dx = Tensor::zeros(s);
    for c in 0..s.c {
        let inv = 1.0 / (var[c] + BN_EPS).sqrt();
        for n in 0..s.n {
            let g = grad_out.plane(n, c);
            let h = xhat.plane(n, c);
            let dst = dx.plane_mut(n, c);
            if batch_statistics {
                // sum(dxhat) = gamma * dbeta, sum(dxhat * xhat) = gamma * dgamma
                for i in 0..g.len() {
                    dst[i] = gamma[c] * inv / m * (m * g[i] - dbeta[c] - h[i] * dgamma[c]);
                }
            } else {
                for i in 0..g.len() {
                    dst[i] = gamma[c] * inv * g[i];
                }
            }
        }
    }
    BnGrads {
        input: dx,
        gamma: dgamma,
        beta: dbeta,
    }
}

/// 3x3 / stride 2 / pad 1 max pooling. Returns the output and, per output
/// element, the flat input index of the selected maximum.
pub fn max_pool_3x3s2(x: &Tensor) -> (Tensor, Vec<usize>) {
    let s = x.shape();
    let g = ConvGeometry::same(3, 2);
    let (ho, wo) = (g.out_extent(s.h), g.out_extent(s.w));
    let out_shape = Shape::new(s.n, s.c, ho, wo);
    let mut out = Tensor::zeros(out_shape);
    let mut arg = vec![0usize; out_shape.len()];
    let mut o = 0;
    for n in 0..s.n {
        for c in 0..s.c {
            let base = (n * s.c + c) * s.plane();
            let plane = x.plane(n, c);
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = 0;
                    for ky in 0..3 {
                        let iy = (oy * 2 + ky) as isize - 1;
                        if iy < 0 || iy >= s.h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let ix = (ox * 2 + kx) as isize - 1;
                            if ix < 0 || ix >= s.w as isize {
                                continue;
                            }
                            let i = iy as usize * s.w + ix as usize;
                            if plane[i] > best {
                                best = plane[i];
                                best_i = i;
                            }
                        }
                    }
                    out.data_mut()[o] = best;
                    arg[o] = base + best_i;
                    o += 1;
                }
            }
        }
    }
    (out, arg)
}

/// Per-axis interpolation taps: `(i0, i1, frac)` for each output coordinate.
fn bilinear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let frac = src - i0 as f64;
            (i0, i1, frac)
        })
        .collect()
}

/// Bilinear resampling with half-pixel centers (align-corners false).
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let s = x.shape();
    if (s.h, s.w) == (out_h, out_w) {
        return x.clone();
    }
    let ty = bilinear_taps(s.h, out_h);
    let tx = bilinear_taps(s.w, out_w);
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, out_h, out_w));
    for n in 0..s.n {
        for c in 0..s.c {
            let src = x.plane(n, c);
            let dst = out.plane_mut(n, c);
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let top = src[y0 * s.w + x0] * (1.0 - fx) + src[y0 * s.w + x1] * fx;
                    let bot = src[y1 * s.w + x0] * (1.0 - fx) + src[y1 * s.w + x1] * fx;
                    dst[oy * out_w + ox] = top * (1.0 - fy) + bot * fy;
                }
            }
        }
    }
    out
}

pub fn resize_bilinear_backward(grad_out: &Tensor, in_h: usize, in_w: usize) -> Tensor {
    let s = grad_out.shape();
    if (s.h, s.w) == (in_h, in_w) {
        return grad_out.clone();
    }
    let ty = bilinear_taps(in_h, s.h);
    let tx = bilinear_taps(in_w, s.w);
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, in_h, in_w));
    for n in 0..s.n {
        for c in 0..s.c {
            let g = grad_out.plane(n, c);
            let dst = out.plane_mut(n, c);
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let v = g[oy * s.w + ox];
                    dst[y0 * in_w + x0] += v * (1.0 - fy) * (1.0 - fx);
                    dst[y0 * in_w + x1] += v * (1.0 - fy) * fx;
                    dst[y1 * in_w + x0] += v * fy * (1.0 - fx);
                    dst[y1 * in_w + x1] += v * fy * fx;
                }
            }
        }
    }
    out
}

pub fn nearest_taps(input: usize, output: usize) -> Vec<usize> {
    (0..output)
        .map(|o| ((o * input) / output).min(input - 1))
        .collect()
}

/// Nearest-neighbour resampling, source index `floor(dst * in / out)`.
pub fn resize_nearest(x: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let s = x.shape();
    let ty = nearest_taps(s.h, out_h);
    let tx = nearest_taps(s.w, out_w);
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, out_h, out_w));
    for n in 0..s.n {
        for c in 0..s.c {
            let src = x.plane(n, c);
            let dst = out.plane_mut(n, c);
            for (oy, &iy) in ty.iter().enumerate() {
                for (ox, &ix) in tx.iter().enumerate() {
                    dst[oy * out_w + ox] = src[iy * s.w + ix];
                }
            }
        }
    }
    out
}

pub fn resize_nearest_backward(grad_out: &Tensor, in_h: usize, in_w: usize) -> Tensor {
    let s = grad_out.shape();
    let ty = nearest_taps(in_h, s.h);
    let tx = nearest_taps(in_w, s.w);
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, in_h, in_w));
    for n in 0..s.n {
        for c in 0..s.c {
            let g = grad_out.plane(n, c);
            let dst = out.plane_mut(n, c);
            for (oy, &iy) in ty.iter().enumerate() {
                for (ox, &ix) in tx.iter().enumerate() {
                    dst[iy * in_w + ix] += g[oy * s.w + ox];
                }
            }
        }
    }
    out
}

pub fn global_avg_pool(x: &Tensor) -> Tensor {
    let s = x.shape();
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, 1, 1));
    for n in 0..s.n {
        for c in 0..s.c {
            let mean = x.plane(n, c).iter().sum::<f64>() / s.plane() as f64;
            out.set(n, c, 0, 0, mean);
        }
    }
    out
}

/// Window `[i - before, i + after]` of a centered box of side `k`.
fn box_extent(k: usize) -> (usize, usize) {
    let before = (k - 1) / 2;
    (before, k - 1 - before)
}

/// Sum over the clipped window `[lo, hi]` of a 1-D prefix-sum table.
fn prefix_window(len: usize, i: usize, before: usize, after: usize) -> (usize, usize) {
    let lo = i.saturating_sub(before);
    let hi = (i + after).min(len - 1);
    (lo, hi + 1)
}

fn integral(plane: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut sat = vec![0.0; (h + 1) * (w + 1)];
    for y in 0..h {
        let mut row = 0.0;
        for x in 0..w {
            row += plane[y * w + x];
            sat[(y + 1) * (w + 1) + x + 1] = sat[y * (w + 1) + x + 1] + row;
        }
    }
    sat
}

fn box_sum(sat: &[f64], w: usize, (y0, y1): (usize, usize), (x0, x1): (usize, usize)) -> f64 {
    let stride = w + 1;
    sat[y1 * stride + x1] - sat[y0 * stride + x1] - sat[y1 * stride + x0] + sat[y0 * stride + x0]
}

/// Stride-1 box average of side `k` centred on every location, averaging only
/// over in-bounds positions.
pub fn sliding_avg_pool(x: &Tensor, k: usize) -> Tensor {
    let s = x.shape();
    let (before, after) = box_extent(k);
    let mut out = Tensor::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            let sat = integral(x.plane(n, c), s.h, s.w);
            let dst = out.plane_mut(n, c);
            for y in 0..s.h {
                let wy = prefix_window(s.h, y, before, after);
                for xx in 0..s.w {
                    let wx = prefix_window(s.w, xx, before, after);
                    let count = ((wy.1 - wy.0) * (wx.1 - wx.0)) as f64;
                    dst[y * s.w + xx] = box_sum(&sat, s.w, wy, wx) / count;
                }
            }
        }
    }
    out
}

pub fn sliding_avg_pool_backward(grad_out: &Tensor, k: usize) -> Tensor {
    let s = grad_out.shape();
    let (before, after) = box_extent(k);
    let mut out = Tensor::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            let g = grad_out.plane(n, c);
            let mut scaled = vec![0.0; g.len()];
            for y in 0..s.h {
                let wy = prefix_window(s.h, y, before, after);
                for xx in 0..s.w {
                    let wx = prefix_window(s.w, xx, before, after);
                    let count = ((wy.1 - wy.0) * (wx.1 - wx.0)) as f64;
                    scaled[y * s.w + xx] = g[y * s.w + xx] / count;
                }
            }
            // input j receives from outputs i with j in window(i), i.e. i in [j - after, j + before]
            let sat = integral(&scaled, s.h, s.w);
            let dst = out.plane_mut(n, c);
            for y in 0..s.h {
                let wy = prefix_window(s.h, y, after, before);
                for xx in 0..s.w {
                    let wx = prefix_window(s.w, xx, after, before);
                    dst[y * s.w + xx] = box_sum(&sat, s.w, wy, wx);
                }
            }
        }
    }
    out
}

/// Non-overlapping `k x k` average pooling (ceil mode, partial windows averaged
/// over valid positions).
pub fn block_avg_pool(x: &Tensor, k: usize) -> Tensor {
    let s = x.shape();
    let (ho, wo) = (s.h.div_ceil(k), s.w.div_ceil(k));
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, ho, wo));
    for n in 0..s.n {
        for c in 0..s.c {
            let src = x.plane(n, c);
            let dst = out.plane_mut(n, c);
            for oy in 0..ho {
                for ox in 0..wo {
                    let (y0, y1) = (oy * k, ((oy + 1) * k).min(s.h));
                    let (x0, x1) = (ox * k, ((ox + 1) * k).min(s.w));
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        acc += src[y * s.w + x0..y * s.w + x1].iter().sum::<f64>();
                    }
                    dst[oy * wo + ox] = acc / ((y1 - y0) * (x1 - x0)) as f64;
                }
            }
        }
    }
    out
}

pub fn block_avg_pool_backward(grad_out: &Tensor, k: usize, in_h: usize, in_w: usize) -> Tensor {
    let s = grad_out.shape();
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, in_h, in_w));
    for n in 0..s.n {
        for c in 0..s.c {
            let g = grad_out.plane(n, c);
            let dst = out.plane_mut(n, c);
            for y in 0..in_h {
                let oy = y / k;
                let hy = ((oy + 1) * k).min(in_h) - oy * k;
                for x in 0..in_w {
                    let ox = x / k;
                    let hx = ((ox + 1) * k).min(in_w) - ox * k;
                    dst[y * in_w + x] = g[oy * s.w + ox] / (hy * hx) as f64;
                }
            }
        }
    }
    out
}

/// Softmax over the `h * w` positions of every plane.
pub fn spatial_softmax(x: &Tensor) -> Tensor {
    let s = x.shape();
    let mut out = Tensor::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            let src = x.plane(n, c);
            let max = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let dst = out.plane_mut(n, c);
            let mut z = 0.0;
            for (d, v) in dst.iter_mut().zip(src) {
                *d = (v - max).exp();
                z += *d;
            }
            dst.iter_mut().for_each(|d| *d /= z);
        }
    }
    out
}

pub fn spatial_softmax_backward(y: &Tensor, grad_out: &Tensor) -> Tensor {
    let s = y.shape();
    let mut out = Tensor::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            let yp = y.plane(n, c);
            let gp = grad_out.plane(n, c);
            let dot: f64 = yp.iter().zip(gp).map(|(a, b)| a * b).sum();
            for (d, (a, b)) in out.plane_mut(n, c).iter_mut().zip(yp.iter().zip(gp)) {
                *d = a * (b - dot);
            }
        }
    }
    out
}

/// Softmax over channels at every pixel.
pub fn channel_softmax(x: &Tensor) -> Tensor {
    let s = x.shape();
    let mut out = Tensor::zeros(s);
    let p = s.plane();
    for n in 0..s.n {
        let src = x.item(n);
        let base = n * s.item();
        for i in 0..p {
            let max = (0..s.c)
                .map(|c| src[c * p + i])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for c in 0..s.c {
                let e = (src[c * p + i] - max).exp();
                out.data_mut()[base + c * p + i] = e;
                z += e;
            }
            for c in 0..s.c {
                out.data_mut()[base + c * p + i] /= z;
            }
        }
    }
    out
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
