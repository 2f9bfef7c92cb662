//! Raw forward/backward kernels on flat NCHW slices.
//!
//! Forward kernels are generic over [`Real`] so the gradient checker can
//! re-run them in `f64`; backward kernels are `f32` only.

use super::gemm::{gemm, transpose};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Geometry of a 2-D convolution over an NCHW batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

/// Output extent `floor((in + 2p − k)/s) + 1`, or `None` when the kernel does not fit.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let span = input + 2 * padding;
    if stride == 0 || kernel == 0 || kernel > span {
        return None;
    }
    Some((span - kernel) / stride + 1)
}

impl ConvGeom {
    pub fn new(input: &[usize], weight: &[usize], bias: &[usize], stride: usize, padding: usize) -> Result<Self> {
        let [n, c, h, w] = match *input {
            [n, c, h, w] => [n, c, h, w],
            _ => return Err(Error::dim("conv2d", "input rank", 4, input.len())),
        };
        let [o, i, kh, kw] = match *weight {
            [o, i, kh, kw] => [o, i, kh, kw],
            _ => return Err(Error::dim("conv2d", "weight rank", 4, weight.len())),
        };
        if i != c {
            return Err(Error::dim("conv2d", "channel", i, c));
        }
        if kh != kw {
            return Err(Error::dim("conv2d", "kernel width", kh, kw));
        }
        if bias != [o] {
            return Err(Error::dim("conv2d", "bias", format!("[{o}]"), format!("{bias:?}")));
        }
        if stride == 0 {
            return Err(Error::dim("conv2d", "stride", "≥ 1", 0));
        }
        let out_h = conv_out_extent(h, kh, stride, padding)
            .ok_or_else(|| Error::dim("conv2d", "height", format!("≥ {}", kh.saturating_sub(2 * padding)), h))?;
        let out_w = conv_out_extent(w, kw, stride, padding)
            .ok_or_else(|| Error::dim("conv2d", "width", format!("≥ {}", kw.saturating_sub(2 * padding)), w))?;
        Ok(Self {
            batch: n,
            in_channels: c,
            in_h: h,
            in_w: w,
            out_channels: o,
            kernel: kh,
            stride,
            padding,
            out_h,
            out_w,
        })
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn out_pixels(&self) -> usize {
        self.out_h * self.out_w
    }

    fn in_sample(&self) -> usize {
        self.in_channels * self.in_h * self.in_w
    }

    pub fn out_dims(&self) -> [usize; 4] {
        [self.batch, self.out_channels, self.out_h, self.out_w]
    }

    /// Input coordinate hit by output index `o` and kernel offset `k`, if inside.
    #[inline]
    fn src(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - self.padding as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }

    /// Range of output columns whose input column `ox·s + kx − p` lies inside,
    /// plus the input column of the first one.
    fn valid_cols(&self, kx: usize) -> (usize, usize, usize) {
        let (s, p) = (self.stride, self.padding);
        let lo = if kx >= p { 0 } else { (p - kx).div_ceil(s) };
        // ox·s + kx − p ≤ in_w − 1
        let hi = if self.in_w + p <= kx {
            0
        } else {
            ((self.in_w + p - kx - 1) / s + 1).min(self.out_w)
        };
        let hi = hi.max(lo);
        (lo, hi, (lo * s + kx).saturating_sub(p))
    }
}

/// Expands one sample into a `(C·k·k) × (OH·OW)` patch matrix; padded cells are zero.
fn im2col<T: Real>(g: &ConvGeom, x: &[T], col: &mut [T]) {
    let k = g.kernel;
    let p = g.out_pixels();
    for ic in 0..g.in_channels {
        let plane = &x[ic * g.in_h * g.in_w..(ic + 1) * g.in_h * g.in_w];
        for ky in 0..k {
            for kx in 0..k {
                let (lo, hi, ix0) = g.valid_cols(kx);
                let row = &mut col[((ic * k + ky) * k + kx) * p..][..p];
                for oy in 0..g.out_h {
                    let dst = &mut row[oy * g.out_w..(oy + 1) * g.out_w];
                    match g.src(oy, ky, g.in_h) {
                        None => dst.fill(T::zero()),
                        Some(iy) => {
                            let src_row = &plane[iy * g.in_w..(iy + 1) * g.in_w];
                            dst[..lo].fill(T::zero());
                            dst[hi..].fill(T::zero());
                            if g.stride == 1 {
                                dst[lo..hi].copy_from_slice(&src_row[ix0..ix0 + (hi - lo)]);
                            } else {
                                for (j, d) in dst[lo..hi].iter_mut().enumerate() {
                                    *d = src_row[ix0 + j * g.stride];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Scatters a patch-matrix gradient back onto one input sample.
fn col2im(g: &ConvGeom, col: &[f32], dx: &mut [f32]) {
    let k = g.kernel;
    let p = g.out_pixels();
    for ic in 0..g.in_channels {
        let plane = &mut dx[ic * g.in_h * g.in_w..(ic + 1) * g.in_h * g.in_w];
        for ky in 0..k {
            for kx in 0..k {
                let (lo, hi, ix0) = g.valid_cols(kx);
                let row = &col[((ic * k + ky) * k + kx) * p..][..p];
                for oy in 0..g.out_h {
                    let Some(iy) = g.src(oy, ky, g.in_h) else { continue };
                    let src = &row[oy * g.out_w + lo..oy * g.out_w + hi];
                    let dst_row = &mut plane[iy * g.in_w..(iy + 1) * g.in_w];
                    if g.stride == 1 {
                        for (d, v) in dst_row[ix0..ix0 + (hi - lo)].iter_mut().zip(src) {
                            *d += v;
                        }
                    } else {
                        for (j, v) in src.iter().enumerate() {
                            dst_row[ix0 + j * g.stride] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Convolution forward: each output is `(Σ_{c,ky,kx} w·x) + bias`, summed in
/// channel-major, row-major kernel order starting from zero.
pub fn conv2d_forward<T: Real>(g: &ConvGeom, x: &[T], weight: &[T], bias: &[T]) -> Vec<T> {
    conv2d_forward_impl(g, x, weight, bias, false).0
}

/// Like [`conv2d_forward`], additionally returning the per-sample patch
/// matrices for reuse by [`conv2d_backward`].
pub fn conv2d_forward_keep(g: &ConvGeom, x: &[f32], weight: &[f32], bias: &[f32]) -> (Vec<f32>, Vec<f32>) {
    conv2d_forward_impl(g, x, weight, bias, true)
}

fn conv2d_forward_impl<T: Real>(g: &ConvGeom, x: &[T], weight: &[T], bias: &[T], keep: bool) -> (Vec<T>, Vec<T>) {
    let (kd, p, o) = (g.patch_len(), g.out_pixels(), g.out_channels);
    let mut out = vec![T::zero(); g.batch * o * p];
    let mut cols = vec![T::zero(); if keep { g.batch * kd * p } else { kd * p }];
    for n in 0..g.batch {
        let col = if keep {
            &mut cols[n * kd * p..(n + 1) * kd * p]
        } else {
            &mut cols[..]
        };
        im2col(g, &x[n * g.in_sample()..(n + 1) * g.in_sample()], col);
        let y = &mut out[n * o * p..(n + 1) * o * p];
        gemm(o, kd, p, weight, col, y, false);
        for (oc, plane) in y.chunks_exact_mut(p).enumerate() {
            let b = bias[oc];
            for v in plane {
                *v += b;
            }
        }
    }
    if !keep {
        cols = Vec::new();
    }
    (out, cols)
}

pub struct ConvGrads {
    pub input: Option<Vec<f32>>,
    pub weight: Option<Vec<f32>>,
    pub bias: Option<Vec<f32>>,
}

/// Which gradients [`conv2d_backward`] should produce.
#[derive(Clone, Copy, Debug)]
pub struct ConvWants {
    pub input: bool,
    pub weight: bool,
    pub bias: bool,
}

/// Convolution backward. `cols` are the patch matrices kept by
/// [`conv2d_forward_keep`]; when absent they are rebuilt from `x`.
///
/// The weight gradient sums over the batch, then over output pixels, in order.
pub fn conv2d_backward(
    g: &ConvGeom,
    x: &[f32],
    cols: Option<&[f32]>,
    weight: &[f32],
    dy: &[f32],
    wants: ConvWants,
) -> ConvGrads {
    let (kd, p, o) = (g.patch_len(), g.out_pixels(), g.out_channels);
    let mut dx = wants.input.then(|| vec![0.0f32; x.len()]);
    let mut dw_t = wants.weight.then(|| vec![0.0f32; kd * o]);
    let db = wants.bias.then(|| {
        let mut db = vec![0.0f32; o];
        for n in 0..g.batch {
            for (oc, acc) in db.iter_mut().enumerate() {
                for v in &dy[(n * o + oc) * p..(n * o + oc + 1) * p] {
                    *acc += v;
                }
            }
        }
        db
    });

    let wt = wants.input.then(|| transpose(o, kd, weight));
    let mut scratch = vec![0.0f32; if cols.is_none() && wants.weight { kd * p } else { 0 }];
    let mut dcol = vec![0.0f32; if wants.input { kd * p } else { 0 }];
    for n in 0..g.batch {
        let dy_n = &dy[n * o * p..(n + 1) * o * p];
        if let Some(dw_t) = dw_t.as_mut() {
            let col: &[f32] = match cols {
                Some(c) => &c[n * kd * p..(n + 1) * kd * p],
                None => {
                    im2col(g, &x[n * g.in_sample()..(n + 1) * g.in_sample()], &mut scratch);
                    &scratch
                }
            };
            let dy_t = transpose(o, p, dy_n);
            // dWᵀ[kd×o] += col[kd×p] · dyᵀ[p×o]
            gemm(kd, p, o, col, &dy_t, dw_t, true);
        }
        if let (Some(dx), Some(wt)) = (dx.as_mut(), wt.as_ref()) {
            gemm(kd, o, p, wt, dy_n, &mut dcol, false);
            col2im(g, &dcol, &mut dx[n * g.in_sample()..(n + 1) * g.in_sample()]);
        }
    }
    ConvGrads {
        input: dx,
        weight: dw_t.map(|t| transpose(kd, o, &t)),
        bias: db,
    }
}

pub fn relu_forward<T: Real>(x: &[T]) -> Vec<T> {
    x.iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect()
}

/// Gradient is passed only where the input was strictly positive.
pub fn relu_backward(x: &[f32], dy: &[f32]) -> Vec<f32> {
    x.iter().zip(dy).map(|(&v, &g)| if v > 0.0 { g } else { 0.0 }).collect()
}

/// 2×2 max pool with stride 2 (floor). Returns the output and, per output
/// cell, the flat input index that won (first maximum in row-major window order).
pub fn maxpool2_forward<T: Real>(dims: [usize; 4], x: &[T]) -> (Vec<T>, Vec<u32>) {
    let [n, c, h, w] = dims;
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best_i = base + 2 * oy * w + 2 * ox;
                let mut best = x[best_i];
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[i] > best {
                        best = x[i];
                        best_i = i;
                    }
                }
                out.push(best);
                arg.push(best_i as u32);
            }
        }
    }
    (out, arg)
}

pub fn maxpool2_backward(input_len: usize, argmax: &[u32], dy: &[f32]) -> Vec<f32> {
    let mut dx = vec![0.0f32; input_len];
    for (&i, &g) in argmax.iter().zip(dy) {
        dx[i as usize] += g;
    }
    dx
}

/// Sampling table for one axis: `(lower index, upper index, weight of upper)`.
///
/// Half-pixel centers: source coordinate `(d + 0.5)·in/out − 0.5`, clamped to
/// `[0, in − 1]`.
pub fn resize_axis(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|d| {
            let src = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(input - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

#[inline]
fn lerp<T: Real>(a: T, b: T, t: T) -> T {
    a + (b - a) * t
}

/// Bilinear resize of every plane. `lerp(a, b, t) = a + (b − a)·t` keeps
/// constant regions exactly constant and the same-size case an exact copy.
pub fn bilinear_forward<T: Real>(dims: [usize; 4], x: &[T], out_h: usize, out_w: usize) -> Vec<T> {
    let [n, c, h, w] = dims;
    let ys = resize_axis(h, out_h);
    let xs = resize_axis(w, out_w);
    let mut out = Vec::with_capacity(n * c * out_h * out_w);
    for plane in x.chunks_exact(h * w).take(n * c) {
        for &(y0, y1, ty) in &ys {
            let ty = T::from_f64(ty);
            let (r0, r1) = (&plane[y0 * w..(y0 + 1) * w], &plane[y1 * w..(y1 + 1) * w]);
            for &(x0, x1, tx) in &xs {
                let tx = T::from_f64(tx);
                let top = lerp(r0[x0], r0[x1], tx);
                let bot = lerp(r1[x0], r1[x1], tx);
                out.push(lerp(top, bot, ty));
            }
        }
    }
    out
}

pub fn bilinear_backward(dims: [usize; 4], out_h: usize, out_w: usize, dy: &[f32]) -> Vec<f32> {
    let [n, c, h, w] = dims;
    let ys = resize_axis(h, out_h);
    let xs = resize_axis(w, out_w);
    let mut dx = vec![0.0f32; n * c * h * w];
    for (plane, g) in dx.chunks_exact_mut(h * w).zip(dy.chunks_exact(out_h * out_w)) {
        for (oy, &(y0, y1, ty)) in ys.iter().enumerate() {
            let ty = ty as f32;
            for (ox, &(x0, x1, tx)) in xs.iter().enumerate() {
                let tx = tx as f32;
                let gv = g[oy * out_w + ox];
                let (gt, gb) = (gv * (1.0 - ty), gv * ty);
                plane[y0 * w + x0] += gt * (1.0 - tx);
                plane[y0 * w + x1] += gt * tx;
                plane[y1 * w + x0] += gb * (1.0 - tx);
                plane[y1 * w + x1] += gb * tx;
            }
        }
    }
    dx
}

/// Concatenates NCHW tensors along channels.
pub fn concat_channels<T: Real>(parts: &[(&[usize], &[T])]) -> Result<(Vec<usize>, Vec<T>)> {
    let (first_dims, _) = parts
        .first()
        .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
    let (n, h, w) = match **first_dims {
        [n, _, h, w] => (n, h, w),
        _ => return Err(Error::dim("concat_channels", "rank", 4, first_dims.len())),
    };
    let mut total_c = 0;
    for (dims, _) in parts {
        match **dims {
            [pn, pc, ph, pw] => {
                for (axis, want, got) in [("batch", n, pn), ("height", h, ph), ("width", w, pw)] {
                    if want != got {
                        return Err(Error::dim("concat_channels", axis, want, got));
                    }
                }
                total_c += pc;
            }
            _ => return Err(Error::dim("concat_channels", "rank", 4, dims.len())),
        }
    }
    let mut out = Vec::with_capacity(n * total_c * h * w);
    for b in 0..n {
        for (dims, data) in parts {
            let size = dims[1] * h * w;
            out.extend_from_slice(&data[b * size..(b + 1) * size]);
        }
    }
    Ok((vec![n, total_c, h, w], out))
}

/// Splits a channel-concatenated tensor back into parts of the given channel counts.
pub fn split_channels(t: &Tensor, channels: &[usize]) -> Result<Vec<Tensor>> {
    let [n, c, h, w] = t.nchw()?;
    let total: usize = channels.iter().sum();
    if total != c {
        return Err(Error::dim("split_channels", "channel", c, total));
    }
    let mut parts: Vec<Vec<f32>> = channels.iter().map(|&pc| Vec::with_capacity(n * pc * h * w)).collect();
    let data = t.data();
    for b in 0..n {
        let mut off = b * c * h * w;
        for (part, &pc) in parts.iter_mut().zip(channels) {
            part.extend_from_slice(&data[off..off + pc * h * w]);
            off += pc * h * w;
        }
    }
    parts
        .into_iter()
        .zip(channels)
        .map(|(d, &pc)| Tensor::new(&[n, pc, h, w], d))
        .collect()
}

/// `y[n×o] = x[n×f] · wᵀ + b` with `w` stored `o×f`.
pub fn affine_forward<T: Real>(n: usize, f: usize, o: usize, x: &[T], w: &[T], b: &[T]) -> Vec<T> {
    let wt = transpose(o, f, w);
    let mut y = vec![T::zero(); n * o];
    gemm(n, f, o, x, &wt, &mut y, false);
    for row in y.chunks_exact_mut(o) {
        for (v, &bv) in row.iter_mut().zip(b) {
            *v += bv;
        }
    }
    y
}

/// Returns `(dx, dw, db)`.
pub fn affine_backward(
    n: usize,
    f: usize,
    o: usize,
    x: &[f32],
    w: &[f32],
    dy: &[f32],
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let mut dx = vec![0.0; n * f];
    gemm(n, o, f, dy, w, &mut dx, false);
    let dyt = transpose(n, o, dy);
    let mut dw = vec![0.0; o * f];
    gemm(o, n, f, &dyt, x, &mut dw, false);
    let mut db = vec![0.0; o];
    for row in dy.chunks_exact(o) {
        for (acc, &g) in db.iter_mut().zip(row) {
            *acc += g;
        }
    }
    (dx, dw, db)
}

/// Row-wise softmax.
pub fn softmax<T: Real>(n: usize, classes: usize, logits: &[T]) -> Vec<T> {
    let mut p = Vec::with_capacity(n * classes);
    for row in logits.chunks_exact(classes).take(n) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
        let mut sum = T::zero();
        for &e in &exps {
            sum += e;
        }
        p.extend(exps.into_iter().map(|e| e / sum));
    }
    p
}

/// Mean softmax cross-entropy over the batch.
pub fn softmax_xent_forward<T: Real>(n: usize, classes: usize, logits: &[T], labels: &[usize]) -> T {
    let mut total = T::zero();
    for (row, &label) in logits.chunks_exact(classes).zip(labels) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for &v in row {
            sum += (v - max).exp();
        }
        total += sum.ln() + max - row[label];
    }
    total / T::from_f64(n as f64)
}

/// `(p − onehot)/n` scaled by the upstream scalar gradient.
pub fn softmax_xent_backward(n: usize, classes: usize, probs: &[f32], labels: &[usize], upstream: f32) -> Vec<f32> {
    let mut d = probs.to_vec();
    for (row, &label) in d.chunks_exact_mut(classes).zip(labels) {
        row[label] -= 1.0;
    }
    let scale = upstream / n as f32;
    d.iter_mut().for_each(|v| *v *= scale);
    d
}

/// `(1/2n)·Σ(xᵢ − yᵢ)²`, accumulated left to right.
pub fn mse_half_forward<T: Real>(pred: &[T], target: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in pred.iter().zip(target) {
        let d = x - y;
        acc += d * d;
    }
    acc / T::from_f64(2.0 * pred.len() as f64)
}

pub fn mse_half_backward(pred: &[f32], target: &[f32], upstream: f32) -> Vec<f32> {
    let n = pred.len() as f32;
    pred.iter().zip(target).map(|(&x, &y)| upstream * (x - y) / n).collect()
}

pub fn add_forward<T: Real>(a: &[T], b: &[T]) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| x + y).collect()
}

/// NCHW → N×C mean over each plane.
pub fn global_avg_pool_forward<T: Real>(dims: [usize; 4], x: &[T]) -> Vec<T> {
    let [_, _, h, w] = dims;
    let denom = T::from_f64((h * w) as f64);
    x.chunks_exact(h * w)
        .map(|plane| {
            let mut acc = T::zero();
            for &v in plane {
                acc += v;
            }
            acc / denom
        })
        .collect()
}

pub fn global_avg_pool_backward(dims: [usize; 4], dy: &[f32]) -> Vec<f32> {
    let [_, _, h, w] = dims;
    let inv = 1.0 / (h * w) as f32;
    dy.iter().flat_map(|&g| std::iter::repeat_n(g * inv, h * w)).collect()
}

/// `out[n,c,..] = x[n,c,..]·scale[c]`; also its own adjoint.
pub fn scale_channels<T: Real>(dims: [usize; 4], x: &[T], scale: &[f32]) -> Vec<T> {
    let plane = dims[2] * dims[3];
    let mut out = x.to_vec();
    for (i, chunk) in out.chunks_exact_mut(plane).enumerate() {
        let s = T::from_f64(scale[i % dims[1]] as f64);
        chunk.iter_mut().for_each(|v| *v = *v * s);
    }
    out
}
