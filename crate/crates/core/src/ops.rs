//! Forward and backward kernels for the operators the network uses.
//!
//! Every function here is pure. The autodiff tape in [`crate::autodiff`]
//! composes them; they are also usable directly on plain tensors.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvParams {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvParams {
    pub const fn new(stride: usize, padding: usize, dilation: usize) -> Self {
        ConvParams { stride, padding, dilation }
    }

    /// Unit stride, `padding == dilation`: extent-preserving for 3x3 kernels.
    pub const fn same3(dilation: usize) -> Self {
        ConvParams { stride: 1, padding: dilation, dilation }
    }

    pub fn output_extent(&self, input: usize, kernel: usize) -> Option<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = input + 2 * self.padding;
        (self.stride > 0 && self.dilation > 0 && padded >= span).then(|| (padded - span) / self.stride + 1)
    }
}

struct ConvGeometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeometry {
    fn ckk(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn ohw(&self) -> usize {
        self.oh * self.ow
    }

    /// 1x1 kernels with unit stride and no padding read the input directly.
    fn is_pointwise(&self, p: ConvParams) -> bool {
        self.kh == 1 && self.kw == 1 && p.stride == 1 && p.padding == 0
    }
}

fn conv_geometry<T: Real>(x: &Tensor<T>, w: &Tensor<T>, p: ConvParams) -> Result<ConvGeometry> {
    let (n, c, h, wd) = x.dims4()?;
    let (o, wc, kh, kw) = w.dims4()?;
    if wc != c {
        return Err(Error::shape(format!("conv2d: input has {c} channels but weight expects {wc}")));
    }
    let (Some(oh), Some(ow)) = (p.output_extent(h, kh), p.output_extent(wd, kw)) else {
        return Err(Error::shape(format!("conv2d: {h}x{wd} input too small for {kh}x{kw} kernel with {p:?}")));
    };
    Ok(ConvGeometry { n, c, h, w: wd, o, kh, kw, oh, ow })
}

fn im2col<T: Real>(plane: &[T], g: &ConvGeometry, p: ConvParams, col: &mut [T]) {
    let (s, pad, d) = (p.stride as isize, p.padding as isize, p.dilation as isize);
    let ohw = g.ohw();
    for c in 0..g.c {
        let src_plane = &plane[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst_rows = &mut col[row * ohw..(row + 1) * ohw];
                let x_off = kx as isize * d - pad;
                for oy in 0..g.oh {
                    let iy = oy as isize * s + ky as isize * d - pad;
                    let dst = &mut dst_rows[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &src_plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in dst.iter_mut().enumerate() {
                        let ix = ox as isize * s + x_off;
                        *v = if ix >= 0 && ix < g.w as isize { src[ix as usize] } else { T::zero() };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(col: &[T], g: &ConvGeometry, p: ConvParams, plane: &mut [T]) {
    let (s, pad, d) = (p.stride as isize, p.padding as isize, p.dilation as isize);
    let ohw = g.ohw();
    for c in 0..g.c {
        let dst_plane = &mut plane[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src_rows = &col[row * ohw..(row + 1) * ohw];
                let x_off = kx as isize * d - pad;
                for oy in 0..g.oh {
                    let iy = oy as isize * s + ky as isize * d - pad;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &src_rows[oy * g.ow..(oy + 1) * g.ow];
                    let dst = &mut dst_plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, &v) in src.iter().enumerate() {
                        let ix = ox as isize * s + x_off;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] = dst[ix as usize] + v;
                        }
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation with zero padding, NCHW input and OIHW weight.
pub fn conv2d<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    p: ConvParams,
) -> Result<Tensor<T>> {
    let g = conv_geometry(x, weight, p)?;
    if let Some(b) = bias {
        if b.len() != g.o {
            return Err(Error::shape(format!("conv2d: bias has {} entries, want {}", b.len(), g.o)));
        }
    }
    let (ckk, ohw) = (g.ckk(), g.ohw());
    let plane_in = g.c * g.h * g.w;
    let mut out = vec![T::zero(); g.n * g.o * ohw];
    let mut col = if g.is_pointwise(p) { Vec::new() } else { vec![T::zero(); ckk * ohw] };
    for b in 0..g.n {
        let plane = &x.data()[b * plane_in..(b + 1) * plane_in];
        let y = &mut out[b * g.o * ohw..(b + 1) * g.o * ohw];
        if let Some(bias) = bias {
            for (o, row) in y.chunks_mut(ohw).enumerate() {
                row.fill(bias.data()[o]);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        let cols: &[T] = if g.is_pointwise(p) {
            plane
        } else {
            im2col(plane, &g, p, &mut col);
            &col
        };
        T::gemm(
            g.o,
            ckk,
            ohw,
            T::one(),
            weight.data(),
            ckk as isize,
            1,
            cols,
            ohw as isize,
            1,
            beta,
            y,
            ohw as isize,
            1,
        );
    }
    Tensor::new(vec![g.n, g.o, g.oh, g.ow], out)
}

pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    dy: &Tensor<T>,
    p: ConvParams,
    need_input_grad: bool,
) -> Result<ConvGrads<T>> {
    let g = conv_geometry(x, weight, p)?;
    if dy.shape() != [g.n, g.o, g.oh, g.ow] {
        return Err(Error::shape(format!("conv2d backward: bad upstream shape {:?}", dy.shape())));
    }
    let (ckk, ohw) = (g.ckk(), g.ohw());
    let plane_in = g.c * g.h * g.w;
    let pointwise = g.is_pointwise(p);
    let mut dw = vec![T::zero(); g.o * ckk];
    let mut db = vec![T::zero(); g.o];
    let mut dx = need_input_grad.then(|| vec![T::zero(); g.n * plane_in]);
    let mut col = if pointwise { Vec::new() } else { vec![T::zero(); ckk * ohw] };
    let mut dcol = if need_input_grad && !pointwise { vec![T::zero(); ckk * ohw] } else { Vec::new() };
    for b in 0..g.n {
        let plane = &x.data()[b * plane_in..(b + 1) * plane_in];
        let dyb = &dy.data()[b * g.o * ohw..(b + 1) * g.o * ohw];
        for (o, row) in dyb.chunks(ohw).enumerate() {
            db[o] = db[o] + T::of(row.iter().map(|v| v.f64()).sum::<f64>());
        }
        let cols: &[T] = if pointwise {
            plane
        } else {
            im2col(plane, &g, p, &mut col);
            &col
        };
        // dW += dY * col^T
        T::gemm(
            g.o,
            ohw,
            ckk,
            T::one(),
            dyb,
            ohw as isize,
            1,
            cols,
            1,
            ohw as isize,
            T::one(),
            &mut dw,
            ckk as isize,
            1,
        );
        if let Some(dx) = dx.as_mut() {
            let dxb = &mut dx[b * plane_in..(b + 1) * plane_in];
            // dcol = W^T * dY
            if pointwise {
                T::gemm(
                    ckk,
                    g.o,
                    ohw,
                    T::one(),
                    weight.data(),
                    1,
                    ckk as isize,
                    dyb,
                    ohw as isize,
                    1,
                    T::zero(),
                    dxb,
                    ohw as isize,
                    1,
                );
            } else {
                T::gemm(
                    ckk,
                    g.o,
                    ohw,
                    T::one(),
                    weight.data(),
                    1,
                    ckk as isize,
                    dyb,
                    ohw as isize,
                    1,
                    T::zero(),
                    &mut dcol,
                    ohw as isize,
                    1,
                );
                col2im(&dcol, &g, p, dxb);
            }
        }
    }
    Ok(ConvGrads {
        input: dx.map(|d| Tensor::new(x.shape().to_vec(), d)).transpose()?,
        weight: Tensor::new(weight.shape().to_vec(), dw)?,
        bias: Tensor::new(vec![g.o], db)?,
    })
}

/// Per-axis sampling table for bilinear resizing: `(i0, i1, frac)`.
fn bilinear_axis(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let frac = if i1 == i0 { 0.0 } else { src - i0 as f64 };
            (i0, i1, frac)
        })
        .collect()
}

/// Bilinear resampling with half-pixel centres and edge clamping.
///
/// Interpolation is evaluated as `a + f * (b - a)` so equal neighbours are
/// reproduced exactly.
pub fn bilinear_resize<T: Real>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
        return Err(Error::shape(format!("bilinear_resize: {h}x{w} -> {out_h}x{out_w}")));
    }
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let ys = bilinear_axis(h, out_h);
    let xs: Vec<(usize, usize, T)> = bilinear_axis(w, out_w).into_iter().map(|(a, b, f)| (a, b, T::of(f))).collect();
    let mut out = Vec::with_capacity(n * c * out_h * out_w);
    for plane in x.data().chunks(h * w) {
        for &(y0, y1, fy) in &ys {
            let fy = T::of(fy);
            let r0 = &plane[y0 * w..(y0 + 1) * w];
            let r1 = &plane[y1 * w..(y1 + 1) * w];
            for &(x0, x1, fx) in &xs {
                let top = r0[x0] + fx * (r0[x1] - r0[x0]);
                let bot = r1[x0] + fx * (r1[x1] - r1[x0]);
                out.push(top + fy * (bot - top));
            }
        }
    }
    Tensor::new(vec![n, c, out_h, out_w], out)
}

pub fn bilinear_resize_backward<T: Real>(dy: &Tensor<T>, in_h: usize, in_w: usize) -> Result<Tensor<T>> {
    let (n, c, oh, ow) = dy.dims4()?;
    if (oh, ow) == (in_h, in_w) {
        return Ok(dy.clone());
    }
    let ys = bilinear_axis(in_h, oh);
    let xs: Vec<(usize, usize, T)> = bilinear_axis(in_w, ow).into_iter().map(|(a, b, f)| (a, b, T::of(f))).collect();
    let mut dx = vec![T::zero(); n * c * in_h * in_w];
    for (plane, dplane) in dy.data().chunks(oh * ow).zip(dx.chunks_mut(in_h * in_w)) {
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            let fy = T::of(fy);
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let g = plane[oy * ow + ox];
                let gt = g * (T::one() - fy);
                let gb = g * fy;
                dplane[y0 * in_w + x0] = dplane[y0 * in_w + x0] + gt * (T::one() - fx);
                dplane[y0 * in_w + x1] = dplane[y0 * in_w + x1] + gt * fx;
                dplane[y1 * in_w + x0] = dplane[y1 * in_w + x0] + gb * (T::one() - fx);
                dplane[y1 * in_w + x1] = dplane[y1 * in_w + x1] + gb * fx;
            }
        }
    }
    Tensor::new(vec![n, c, in_h, in_w], dx)
}

pub fn leaky_relu<T: Real>(x: &Tensor<T>, slope: T) -> Tensor<T> {
    x.map(|v| if v >= T::zero() { v } else { slope * v })
}

/// Non-overlapping `k x k` average pooling with ceil extents; partial
/// border cells average only their in-bounds pixels.
pub fn avg_pool<T: Real>(x: &Tensor<T>, k: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    if k == 0 {
        return Err(Error::invalid("avg_pool: kernel must be positive"));
    }
    let (oh, ow) = (h.div_ceil(k), w.div_ceil(k));
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in x.data().chunks(h * w) {
        for oy in 0..oh {
            let (y0, y1) = (oy * k, ((oy + 1) * k).min(h));
            for ox in 0..ow {
                let (x0, x1) = (ox * k, ((ox + 1) * k).min(w));
                let mut acc = 0.0;
                for y in y0..y1 {
                    for v in &plane[y * w + x0..y * w + x1] {
                        acc += v.f64();
                    }
                }
                out.push(T::of(acc / ((y1 - y0) * (x1 - x0)) as f64));
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out)
}

pub fn avg_pool_backward<T: Real>(dy: &Tensor<T>, k: usize, in_h: usize, in_w: usize) -> Result<Tensor<T>> {
    let (n, c, oh, ow) = dy.dims4()?;
    let mut dx = vec![T::zero(); n * c * in_h * in_w];
    for (plane, dplane) in dy.data().chunks(oh * ow).zip(dx.chunks_mut(in_h * in_w)) {
        for oy in 0..oh {
            let (y0, y1) = (oy * k, ((oy + 1) * k).min(in_h));
            for ox in 0..ow {
                let (x0, x1) = (ox * k, ((ox + 1) * k).min(in_w));
                let g = plane[oy * ow + ox] / T::of(((y1 - y0) * (x1 - x0)) as f64);
                for y in y0..y1 {
                    for v in &mut dplane[y * in_w + x0..y * in_w + x1] {
                        *v = g;
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, c, in_h, in_w], dx)
}

/// Sums each `(2r+1)^2` window clipped to the plane, optionally dividing by
/// the in-bounds count.
fn box_filter<T: Real>(x: &Tensor<T>, r: usize, normalize: bool) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    let mut out = Vec::with_capacity(n * c * h * w);
    let mut integral = vec![0.0f64; (h + 1) * (w + 1)];
    for plane in x.data().chunks(h * w) {
        for y in 0..h {
            let mut row = 0.0;
            for xx in 0..w {
                row += plane[y * w + xx].f64();
                integral[(y + 1) * (w + 1) + xx + 1] = integral[y * (w + 1) + xx + 1] + row;
            }
        }
        for y in 0..h {
            let (y0, y1) = (y.saturating_sub(r), (y + r + 1).min(h));
            for xx in 0..w {
                let (x0, x1) = (xx.saturating_sub(r), (xx + r + 1).min(w));
                let s = integral[y1 * (w + 1) + x1] - integral[y0 * (w + 1) + x1] - integral[y1 * (w + 1) + x0]
                    + integral[y0 * (w + 1) + x0];
                let v = if normalize { s / ((y1 - y0) * (x1 - x0)) as f64 } else { s };
                out.push(T::of(v));
            }
        }
    }
    Tensor::new(vec![n, c, h, w], out)
}

/// Mean over the clipped `(2r+1) x (2r+1)` window centred on each pixel.
pub fn box_mean<T: Real>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    box_filter(x, r, true)
}

pub fn box_mean_backward<T: Real>(dy: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let (_, _, h, w) = dy.dims4()?;
    // Window membership is symmetric, so the adjoint is a box sum of dy / count.
    let mut scaled = dy.clone();
    for plane in scaled.data_mut().chunks_mut(h * w) {
        for y in 0..h {
            let ny = (y + r + 1).min(h) - y.saturating_sub(r);
            for xx in 0..w {
                let nx = (xx + r + 1).min(w) - xx.saturating_sub(r);
                let v = &mut plane[y * w + xx];
                *v = *v / T::of((ny * nx) as f64);
            }
        }
    }
    box_filter(&scaled, r, false)
}

pub fn channel_mean<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    let hw = h * w;
    let mut out = Vec::with_capacity(n * hw);
    for frame in x.data().chunks(c * hw) {
        for i in 0..hw {
            let s: f64 = (0..c).map(|ch| frame[ch * hw + i].f64()).sum();
            out.push(T::of(s / c as f64));
        }
    }
    Tensor::new(vec![n, 1, h, w], out)
}

/// Repeats a single-channel map across `channels`.
pub fn expand_channels<T: Real>(x: &Tensor<T>, channels: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    if c != 1 {
        return Err(Error::shape(format!("expand_channels needs 1 channel, got {c}")));
    }
    let mut out = Vec::with_capacity(n * channels * h * w);
    for plane in x.data().chunks(h * w) {
        for _ in 0..channels {
            out.extend_from_slice(plane);
        }
    }
    Tensor::new(vec![n, channels, h, w], out)
}

/// Sums over the channel axis, keeping it as a unit axis.
pub fn sum_channels<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    let hw = h * w;
    let mut out = vec![T::zero(); n * hw];
    for (frame, dst) in x.data().chunks(c * hw).zip(out.chunks_mut(hw)) {
        for plane in frame.chunks(hw) {
            for (d, &v) in dst.iter_mut().zip(plane) {
                *d = *d + v;
            }
        }
    }
    Tensor::new(vec![n, 1, h, w], out)
}

/// Repeats a single-frame tensor `k` times along the batch axis.
pub fn expand_batch<T: Real>(x: &Tensor<T>, k: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    if n != 1 {
        return Err(Error::shape(format!("expand_batch needs batch 1, got {n}")));
    }
    let mut out = Vec::with_capacity(k * x.len());
    for _ in 0..k {
        out.extend_from_slice(x.data());
    }
    Tensor::new(vec![k, c, h, w], out)
}

/// Sums over the batch axis. Each output element adds its `k` terms in
/// sorted order with 64-bit accumulation, which makes the result exactly
/// invariant to permutations of the batch.
pub fn sum_batch<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    let plane = c * h * w;
    if n == 1 {
        return Ok(x.clone());
    }
    let data = x.data();
    let mut terms = vec![T::zero(); n];
    let out = (0..plane)
        .map(|i| {
            for (k, t) in terms.iter_mut().enumerate() {
                *t = data[k * plane + i];
            }
            T::of(sorted_sum(&mut terms))
        })
        .collect();
    Tensor::new(vec![1, c, h, w], out)
}

fn sorted_sum<T: Real>(terms: &mut [T]) -> f64 {
    terms.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    terms.iter().map(|v| v.f64()).sum()
}

/// Softmax across the batch axis, independently per channel and pixel.
pub fn softmax_batch<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    let plane = c * h * w;
    let data = x.data();
    let mut out = vec![T::zero(); data.len()];
    let mut exps = vec![T::zero(); n];
    for i in 0..plane {
        let max = (0..n).map(|k| data[k * plane + i]).fold(T::neg_infinity(), T::max);
        for (k, e) in exps.iter_mut().enumerate() {
            *e = (data[k * plane + i] - max).exp();
        }
        let mut sorted = exps.clone();
        let denom = T::of(sorted_sum(&mut sorted));
        for (k, &e) in exps.iter().enumerate() {
            out[k * plane + i] = e / denom;
        }
    }
    Tensor::new(vec![n, c, h, w], out)
}

pub fn softmax_batch_backward<T: Real>(y: &Tensor<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = y.dims4()?;
    let plane = c * h * w;
    let (yd, gd) = (y.data(), dy.data());
    let mut dx = vec![T::zero(); yd.len()];
    for i in 0..plane {
        let dot: f64 = (0..n).map(|k| (yd[k * plane + i] * gd[k * plane + i]).f64()).sum();
        let dot = T::of(dot);
        for k in 0..n {
            let j = k * plane + i;
            dx[j] = yd[j] * (gd[j] - dot);
        }
    }
    Tensor::new(vec![n, c, h, w], dx)
}

pub fn concat_channels<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, ca, h, w) = a.dims4()?;
    let (nb, cb, hb, wb) = b.dims4()?;
    if (n, h, w) != (nb, hb, wb) {
        return Err(Error::shape(format!("concat: {:?} vs {:?}", a.shape(), b.shape())));
    }
    let hw = h * w;
    let mut out = Vec::with_capacity(a.len() + b.len());
    for k in 0..n {
        out.extend_from_slice(&a.data()[k * ca * hw..(k + 1) * ca * hw]);
        out.extend_from_slice(&b.data()[k * cb * hw..(k + 1) * cb * hw]);
    }
    Tensor::new(vec![n, ca + cb, h, w], out)
}

pub fn split_channels<T: Real>(x: &Tensor<T>, first: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let (n, c, h, w) = x.dims4()?;
    if first > c {
        return Err(Error::shape(format!("split_channels: {first} > {c}")));
    }
    let hw = h * w;
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for frame in x.data().chunks(c * hw) {
        a.extend_from_slice(&frame[..first * hw]);
        b.extend_from_slice(&frame[first * hw..]);
    }
    Ok((Tensor::new(vec![n, first, h, w], a)?, Tensor::new(vec![n, c - first, h, w], b)?))
}

/// Spatial window `[y0, y0+h) x [x0, x0+w)` of every plane.
pub fn crop<T: Real>(x: &Tensor<T>, y0: usize, x0: usize, h: usize, w: usize) -> Result<Tensor<T>> {
    let (n, c, ih, iw) = x.dims4()?;
    if y0 + h > ih || x0 + w > iw {
        return Err(Error::shape(format!("crop {h}x{w}+{y0}+{x0} outside {ih}x{iw}")));
    }
    let mut out = Vec::with_capacity(n * c * h * w);
    for plane in x.data().chunks(ih * iw) {
        for y in y0..y0 + h {
            out.extend_from_slice(&plane[y * iw + x0..y * iw + x0 + w]);
        }
    }
    Tensor::new(vec![n, c, h, w], out)
}

pub fn crop_backward<T: Real>(dy: &Tensor<T>, y0: usize, x0: usize, in_h: usize, in_w: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = dy.dims4()?;
    let mut dx = vec![T::zero(); n * c * in_h * in_w];
    for (src, dst) in dy.data().chunks(h * w).zip(dx.chunks_mut(in_h * in_w)) {
        for y in 0..h {
            dst[(y0 + y) * in_w + x0..(y0 + y) * in_w + x0 + w].copy_from_slice(&src[y * w..(y + 1) * w]);
        }
    }
    Tensor::new(vec![n, c, in_h, in_w], dx)
}
