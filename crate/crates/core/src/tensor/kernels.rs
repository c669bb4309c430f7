//! Forward and backward kernels over raw NCHW buffers.
//!
//! Convolutions return the number of multiply-accumulates they executed. The
//! standard and pointwise paths run as a GEMM over an im2col buffer, the
//! depthwise path as direct loops over a zero-padded copy of each plane, so
//! padded taps are executed (and counted) like any other tap.

use serde::{Deserialize, Serialize};

use super::{expect_rank, Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvMode {
    /// Full cross-channel convolution.
    Standard,
    /// One filter per channel, no channel mixing.
    Depthwise,
    /// 1x1 standard convolution.
    Pointwise,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConvDescriptor {
    pub kernel_size: usize,
    pub stride: usize,
    /// Zero padding per spatial axis, `[height, width]`.
    pub padding: [usize; 2],
    pub in_channels: usize,
    pub out_channels: usize,
    pub mode: ConvMode,
}

impl ConvDescriptor {
    pub fn standard(in_channels: usize, out_channels: usize, kernel_size: usize, stride: usize, padding: usize) -> Self {
        Self {
            kernel_size,
            stride,
            padding: [padding, padding],
            in_channels,
            out_channels,
            mode: ConvMode::Standard,
        }
    }

    pub fn depthwise(channels: usize, kernel_size: usize, stride: usize, padding: usize) -> Self {
        Self {
            kernel_size,
            stride,
            padding: [padding, padding],
            in_channels: channels,
            out_channels: channels,
            mode: ConvMode::Depthwise,
        }
    }

    pub fn pointwise(in_channels: usize, out_channels: usize) -> Self {
        Self {
            kernel_size: 1,
            stride: 1,
            padding: [0, 0],
            in_channels,
            out_channels,
            mode: ConvMode::Pointwise,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel_size == 0 || self.stride == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::invalid(format!("non-positive field in {self:?}")));
        }
        match self.mode {
            ConvMode::Pointwise if self.kernel_size != 1 => {
                Err(Error::invalid("pointwise convolution requires kernel size 1"))
            }
            ConvMode::Depthwise if self.in_channels != self.out_channels => Err(Error::invalid(
                "depthwise convolution requires equal input and output channels",
            )),
            _ => Ok(()),
        }
    }

    /// `[out, in per group, k, k]`.
    pub fn weight_shape(&self) -> [usize; 4] {
        let k = self.kernel_size;
        match self.mode {
            ConvMode::Depthwise => [self.out_channels, 1, k, k],
            _ => [self.out_channels, self.in_channels, k, k],
        }
    }

    /// Fan-in of one output unit.
    pub fn fan_in(&self) -> usize {
        let [_, cin, k, _] = self.weight_shape();
        cin * k * k
    }

    pub fn output_extent(&self, input: usize, axis: usize) -> Option<usize> {
        let padded = input + 2 * self.padding[axis];
        if padded < self.kernel_size {
            return None;
        }
        Some((padded - self.kernel_size) / self.stride + 1)
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        match (self.output_extent(h, 0), self.output_extent(w, 1)) {
            (Some(oh), Some(ow)) => Ok((oh, ow)),
            _ => Err(Error::invalid(format!(
                "input {h}x{w} with padding {:?} admits no {k}x{k} kernel placement",
                self.padding,
                k = self.kernel_size
            ))),
        }
    }

    fn is_plain_1x1(&self) -> bool {
        self.kernel_size == 1 && self.stride == 1 && self.padding == [0, 0]
    }
}

/// Checked strided GEMM: `C = A·B (+ C when accumulate)`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    (rsa, csa): (usize, usize),
    b: &[T],
    (rsb, csb): (usize, usize),
    c: &mut [T],
    rsc: usize,
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    let span = |rows: usize, cols: usize, rs: usize, cs: usize| (rows - 1) * rs + (cols - 1) * cs + 1;
    if k > 0 {
        assert!(span(m, k, rsa, csa) <= a.len(), "gemm: A out of bounds");
        assert!(span(k, n, rsb, csb) <= b.len(), "gemm: B out of bounds");
    }
    assert!(span(m, n, rsc, 1) <= c.len(), "gemm: C out of bounds");
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: every strided access was bounds-checked above.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        )
    }
}

struct ConvGeometry {
    batch: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
}

fn check_conv<T: Real>(input: &Tensor<T>, weight: &Tensor<T>, desc: &ConvDescriptor) -> Result<ConvGeometry> {
    desc.validate()?;
    expect_rank(input, 4, "conv2d input (N, C, H, W)")?;
    if weight.shape() != desc.weight_shape() {
        return Err(Error::ShapeMismatch {
            context: "conv2d weights vs descriptor",
            expected: desc.weight_shape().to_vec(),
            actual: weight.shape().to_vec(),
        });
    }
    let s = input.shape();
    if s[1] != desc.in_channels {
        return Err(Error::ShapeMismatch {
            context: "conv2d input channels vs descriptor",
            expected: vec![s[0], desc.in_channels, s[2], s[3]],
            actual: s.to_vec(),
        });
    }
    let (oh, ow) = desc.output_hw(s[2], s[3])?;
    Ok(ConvGeometry {
        batch: s[0],
        h: s[2],
        w: s[3],
        oh,
        ow,
    })
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Real>(x: &[T], channels: usize, g: &ConvGeometry, desc: &ConvDescriptor, cols: &mut [T]) {
    let k = desc.kernel_size;
    let s = desc.stride;
    let [ph, pw] = desc.padding;
    let p = g.oh * g.ow;
    for c in 0..channels {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for kh in 0..k {
            for kw in 0..k {
                let row = &mut cols[((c * k + kh) * k + kw) * p..][..p];
                for oy in 0..g.oh {
                    let dst = &mut row[oy * g.ow..(oy + 1) * g.ow];
                    let iy = (oy * s + kh) as isize - ph as isize;
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * s + kw) as isize - pw as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], channels: usize, g: &ConvGeometry, desc: &ConvDescriptor, dx: &mut [T]) {
    let k = desc.kernel_size;
    let s = desc.stride;
    let [ph, pw] = desc.padding;
    let p = g.oh * g.ow;
    for c in 0..channels {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for kh in 0..k {
            for kw in 0..k {
                let row = &cols[((c * k + kh) * k + kw) * p..][..p];
                for oy in 0..g.oh {
                    let iy = (oy * s + kh) as isize - ph as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, &v) in row[oy * g.ow..(oy + 1) * g.ow].iter().enumerate() {
                        let ix = (ox * s + kw) as isize - pw as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

fn pad_plane<T: Real>(plane: &[T], h: usize, w: usize, [ph, pw]: [usize; 2], out: &mut [T]) {
    let wp = w + 2 * pw;
    out.fill(T::zero());
    for y in 0..h {
        out[(y + ph) * wp + pw..][..w].copy_from_slice(&plane[y * w..(y + 1) * w]);
    }
}

/// Convolution forward pass. Returns the output and the executed MAC count.
pub fn conv2d_forward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    desc: &ConvDescriptor,
) -> Result<(Tensor<T>, u64)> {
    let g = check_conv(input, weight, desc)?;
    let (ci, co, k) = (desc.in_channels, desc.out_channels, desc.kernel_size);
    let p = g.oh * g.ow;
    let mut out = vec![T::zero(); g.batch * co * p];
    let x = input.data();
    let wt = weight.data();
    let macs;
    match desc.mode {
        ConvMode::Standard | ConvMode::Pointwise => {
            let kk = ci * k * k;
            let mut cols = if desc.is_plain_1x1() { Vec::new() } else { vec![T::zero(); kk * p] };
            for n in 0..g.batch {
                let xn = &x[n * ci * g.h * g.w..(n + 1) * ci * g.h * g.w];
                let b: &[T] = if desc.is_plain_1x1() {
                    xn
                } else {
                    im2col(xn, ci, &g, desc, &mut cols);
                    &cols
                };
                gemm(co, kk, p, wt, (kk, 1), b, (p, 1), &mut out[n * co * p..(n + 1) * co * p], p, false);
            }
            macs = (g.batch * co * kk * p) as u64;
        }
        ConvMode::Depthwise => {
            let s = desc.stride;
            let (hp, wp) = (g.h + 2 * desc.padding[0], g.w + 2 * desc.padding[1]);
            let mut padded = vec![T::zero(); hp * wp];
            for n in 0..g.batch {
                for c in 0..ci {
                    let base = (n * ci + c) * g.h * g.w;
                    pad_plane(&x[base..base + g.h * g.w], g.h, g.w, desc.padding, &mut padded);
                    let dst = &mut out[(n * co + c) * p..(n * co + c + 1) * p];
                    let kern = &wt[c * k * k..(c + 1) * k * k];
                    for kh in 0..k {
                        for kw in 0..k {
                            let wv = kern[kh * k + kw];
                            for oy in 0..g.oh {
                                let src = &padded[(oy * s + kh) * wp + kw..];
                                let row = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                                if s == 1 {
                                    for (o, &v) in row.iter_mut().zip(&src[..g.ow]) {
                                        *o += wv * v;
                                    }
                                } else {
                                    for (ox, o) in row.iter_mut().enumerate() {
                                        *o += wv * src[ox * s];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            macs = (g.batch * ci * k * k * p) as u64;
        }
    }
    Ok((Tensor::new([g.batch, co, g.oh, g.ow], out)?, macs))
}

/// Convolution backward pass: `(d input, d weight)`, each only when requested.
pub fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    desc: &ConvDescriptor,
    grad_out: &[T],
    need_input: bool,
    need_weight: bool,
) -> Result<(Option<Vec<T>>, Option<Vec<T>>)> {
    let g = check_conv(input, weight, desc)?;
    let (ci, co, k) = (desc.in_channels, desc.out_channels, desc.kernel_size);
    let p = g.oh * g.ow;
    let plane = g.h * g.w;
    let x = input.data();
    let wt = weight.data();
    let mut dx = need_input.then(|| vec![T::zero(); x.len()]);
    let mut dw = need_weight.then(|| vec![T::zero(); wt.len()]);
    match desc.mode {
        ConvMode::Standard | ConvMode::Pointwise => {
            let kk = ci * k * k;
            let direct = desc.is_plain_1x1();
            let mut cols = if direct { Vec::new() } else { vec![T::zero(); kk * p] };
            let mut dcols = if direct || !need_input { Vec::new() } else { vec![T::zero(); kk * p] };
            for n in 0..g.batch {
                let xn = &x[n * ci * plane..(n + 1) * ci * plane];
                let dy = &grad_out[n * co * p..(n + 1) * co * p];
                if let Some(dw) = dw.as_mut() {
                    let b: &[T] = if direct {
                        xn
                    } else {
                        im2col(xn, ci, &g, desc, &mut cols);
                        &cols
                    };
                    // dW (co x kk) += dY (co x p) . cols^T (p x kk)
                    gemm(co, p, kk, dy, (p, 1), b, (1, p), dw, kk, true);
                }
                if let Some(dx) = dx.as_mut() {
                    let dxn = &mut dx[n * ci * plane..(n + 1) * ci * plane];
                    // dcols (kk x p) = W^T (kk x co) . dY (co x p)
                    if direct {
                        gemm(kk, co, p, wt, (1, kk), dy, (p, 1), dxn, p, false);
                    } else {
                        gemm(kk, co, p, wt, (1, kk), dy, (p, 1), &mut dcols, p, false);
                        col2im(&dcols, ci, &g, desc, dxn);
                    }
                }
            }
        }
        ConvMode::Depthwise => {
            let s = desc.stride;
            let [ph, pw] = desc.padding;
            let (hp, wp) = (g.h + 2 * ph, g.w + 2 * pw);
            let mut padded = vec![T::zero(); hp * wp];
            let mut dpad = vec![T::zero(); hp * wp];
            for n in 0..g.batch {
                for c in 0..ci {
                    let base = (n * ci + c) * plane;
                    let dy = &grad_out[(n * co + c) * p..(n * co + c + 1) * p];
                    let kern = &wt[c * k * k..(c + 1) * k * k];
                    if need_weight {
                        pad_plane(&x[base..base + plane], g.h, g.w, desc.padding, &mut padded);
                    }
                    if need_input {
                        dpad.fill(T::zero());
                    }
                    for kh in 0..k {
                        for kw in 0..k {
                            let wv = kern[kh * k + kw];
                            let mut acc = T::zero();
                            for oy in 0..g.oh {
                                let off = (oy * s + kh) * wp + kw;
                                let drow = &dy[oy * g.ow..(oy + 1) * g.ow];
                                if need_weight {
                                    let src = &padded[off..];
                                    if s == 1 {
                                        for (&d, &v) in drow.iter().zip(&src[..g.ow]) {
                                            acc += d * v;
                                        }
                                    } else {
                                        for (ox, &d) in drow.iter().enumerate() {
                                            acc += d * src[ox * s];
                                        }
                                    }
                                }
                                if need_input {
                                    let dst = &mut dpad[off..];
                                    if s == 1 {
                                        for (o, &d) in dst[..g.ow].iter_mut().zip(drow) {
                                            *o += wv * d;
                                        }
                                    } else {
                                        for (ox, &d) in drow.iter().enumerate() {
                                            dst[ox * s] += wv * d;
                                        }
                                    }
                                }
                            }
                            if let Some(dw) = dw.as_mut() {
                                dw[c * k * k + kh * k + kw] += acc;
                            }
                        }
                    }
                    if let Some(dx) = dx.as_mut() {
                        for y in 0..g.h {
                            let src = &dpad[(y + ph) * wp + pw..][..g.w];
                            dx[base + y * g.w..base + (y + 1) * g.w].copy_from_slice(src);
                        }
                    }
                }
            }
        }
    }
    Ok((dx, dw))
}

/// Max pooling. Returns the output and, per output element, the flat input
/// index that produced it.
pub fn maxpool2d_forward<T: Real>(input: &Tensor<T>, window: usize, stride: usize) -> Result<(Tensor<T>, Vec<usize>)> {
    expect_rank(input, 4, "maxpool input (N, C, H, W)")?;
    if window == 0 || stride == 0 {
        return Err(Error::invalid("pooling window and stride must be positive"));
    }
    let s = input.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    if h < window || w < window {
        return Err(Error::invalid(format!("input {h}x{w} smaller than pooling window {window}")));
    }
    if stride == window && (h % window != 0 || w % window != 0) {
        return Err(Error::invalid(format!(
            "spatial dims {h}x{w} not divisible by pooling window {window}"
        )));
    }
    let oh = (h - window) / stride + 1;
    let ow = (w - window) / stride + 1;
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * stride * w + ox * stride;
                for ky in 0..window {
                    for kx in 0..window {
                        let idx = base + (oy * stride + ky) * w + ox * stride + kx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
    }
    Ok((Tensor::new([n, c, oh, ow], out)?, argmax))
}

pub fn maxpool2d_backward<T: Real>(input_len: usize, argmax: &[usize], grad_out: &[T]) -> Vec<T> {
    let mut dx = vec![T::zero(); input_len];
    for (&i, &g) in argmax.iter().zip(grad_out) {
        dx[i] += g;
    }
    dx
}

/// Mean over every spatial position: `(N, C, ...) -> (N, C)`.
pub fn global_avgpool_forward<T: Real>(input: &Tensor<T>) -> Result<Tensor<T>> {
    if input.rank() < 3 {
        return Err(Error::ShapeMismatch {
            context: "global average pool input (N, C, spatial...)",
            expected: vec![0, 0, 0],
            actual: input.shape().to_vec(),
        });
    }
    let (n, c) = (input.shape()[0], input.shape()[1]);
    let spatial = input.len() / (n * c);
    let inv = T::one() / T::of(spatial as f64);
    let out = input
        .data()
        .chunks_exact(spatial)
        .map(|ch| ch.iter().copied().sum::<T>() * inv)
        .collect();
    Tensor::new([n, c], out)
}

pub fn global_avgpool_backward<T: Real>(input_shape: &[usize], grad_out: &[T]) -> Vec<T> {
    let planes = input_shape[0] * input_shape[1];
    let spatial: usize = input_shape[2..].iter().product();
    let inv = T::one() / T::of(spatial as f64);
    let mut dx = Vec::with_capacity(planes * spatial);
    for &g in &grad_out[..planes] {
        dx.extend(std::iter::repeat_n(g * inv, spatial));
    }
    dx
}

fn check_linear<T: Real>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<(usize, usize, usize)> {
    expect_rank(input, 2, "fully connected input (N, features)")?;
    expect_rank(weight, 2, "fully connected weights (out, in)")?;
    let (n, fin) = (input.shape()[0], input.shape()[1]);
    let (fout, win) = (weight.shape()[0], weight.shape()[1]);
    if win != fin {
        return Err(Error::ShapeMismatch {
            context: "fully connected weights vs input features",
            expected: vec![fout, fin],
            actual: weight.shape().to_vec(),
        });
    }
    if bias.shape() != [fout] {
        return Err(Error::ShapeMismatch {
            context: "fully connected bias",
            expected: vec![fout],
            actual: bias.shape().to_vec(),
        });
    }
    Ok((n, fin, fout))
}

/// `y = x Wᵀ + b`. Returns the output and the MAC count.
pub fn linear_forward<T: Real>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<(Tensor<T>, u64)> {
    let (n, fin, fout) = check_linear(input, weight, bias)?;
    let mut out = vec![T::zero(); n * fout];
    gemm(n, fin, fout, input.data(), (fin, 1), weight.data(), (1, fin), &mut out, fout, false);
    for row in out.chunks_exact_mut(fout) {
        for (o, &b) in row.iter_mut().zip(bias.data()) {
            *o += b;
        }
    }
    Ok((Tensor::new([n, fout], out)?, (n * fin * fout) as u64))
}

/// `(d input, d weight, d bias)`.
pub fn linear_backward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    grad_out: &[T],
) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    let (n, fin, fout) = check_linear(input, weight, bias)?;
    let mut dx = vec![T::zero(); n * fin];
    gemm(n, fout, fin, grad_out, (fout, 1), weight.data(), (fin, 1), &mut dx, fin, false);
    let mut dw = vec![T::zero(); fout * fin];
    gemm(fout, n, fin, grad_out, (1, fout), input.data(), (fin, 1), &mut dw, fin, false);
    let mut db = vec![T::zero(); fout];
    for row in grad_out.chunks_exact(fout) {
        for (d, &g) in db.iter_mut().zip(row) {
            *d += g;
        }
    }
    Ok((dx, dw, db))
}

pub fn relu6<T: Real>(x: T) -> T {
    x.max(T::zero()).min(T::of(6.0))
}

pub fn relu6_backward<T: Real>(x: &[T], grad_out: &[T]) -> Vec<T> {
    let six = T::of(6.0);
    x.iter()
        .zip(grad_out)
        .map(|(&v, &g)| if v > T::zero() && v < six { g } else { T::zero() })
        .collect()
}

/// Row-wise softmax of a `(batch, classes)` tensor.
pub fn softmax_forward<T: Real>(input: &Tensor<T>) -> Result<Tensor<T>> {
    expect_rank(input, 2, "softmax input (batch, classes)")?;
    let k = input.shape()[1];
    let mut out = input.data().to_vec();
    for row in out.chunks_exact_mut(k) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Tensor::new(input.shape().to_vec(), out)
}

pub fn softmax_backward<T: Real>(probs: &[T], grad_out: &[T], classes: usize) -> Vec<T> {
    let mut dx = Vec::with_capacity(probs.len());
    for (p, g) in probs.chunks_exact(classes).zip(grad_out.chunks_exact(classes)) {
        let dot: T = p.iter().zip(g).map(|(&a, &b)| a * b).sum();
        dx.extend(p.iter().zip(g).map(|(&a, &b)| a * (b - dot)));
    }
    dx
}

/// Saved state of a batch-norm forward pass.
#[derive(Clone, Debug)]
pub struct BatchNormCache<T> {
    pub normalized: Vec<T>,
    pub inv_std: Vec<T>,
    pub training: bool,
}

fn bn_dims<T: Real>(input: &Tensor<T>, channels: usize) -> Result<(usize, usize)> {
    if input.rank() < 2 || input.shape()[1] != channels {
        return Err(Error::ShapeMismatch {
            context: "batch norm input (N, C, ...) vs parameter channels",
            expected: vec![0, channels],
            actual: input.shape().to_vec(),
        });
    }
    let n = input.shape()[0];
    Ok((n, input.len() / (n * channels)))
}

/// Batch statistics: per-channel mean and biased variance.
pub fn channel_moments<T: Real>(input: &Tensor<T>, channels: usize) -> Result<(Vec<T>, Vec<T>)> {
    let (n, spatial) = bn_dims(input, channels)?;
    let x = input.data();
    let count = T::of((n * spatial) as f64);
    let mut mean = vec![T::zero(); channels];
    let mut var = vec![T::zero(); channels];
    for c in 0..channels {
        let mut sum = T::zero();
        for b in 0..n {
            sum += x[(b * channels + c) * spatial..][..spatial].iter().copied().sum::<T>();
        }
        let m = sum / count;
        let mut sq = T::zero();
        for b in 0..n {
            for &v in &x[(b * channels + c) * spatial..][..spatial] {
                sq += (v - m) * (v - m);
            }
        }
        mean[c] = m;
        var[c] = sq / count;
    }
    Ok((mean, var))
}

/// `y = gamma * (x - mean) / sqrt(var + eps) + beta`, per channel.
pub fn batch_norm_forward<T: Real>(
    input: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    mean: &[T],
    var: &[T],
    eps: T,
    training: bool,
) -> Result<(Tensor<T>, BatchNormCache<T>)> {
    let channels = gamma.len();
    let (n, spatial) = bn_dims(input, channels)?;
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let x = input.data();
    let mut normalized = vec![T::zero(); x.len()];
    let mut out = vec![T::zero(); x.len()];
    for b in 0..n {
        for c in 0..channels {
            let off = (b * channels + c) * spatial;
            let (m, is, g, bt) = (mean[c], inv_std[c], gamma[c], beta[c]);
            for i in off..off + spatial {
                let xh = (x[i] - m) * is;
                normalized[i] = xh;
                out[i] = g * xh + bt;
            }
        }
    }
    Ok((
        Tensor::new(input.shape().to_vec(), out)?,
        BatchNormCache {
            normalized,
            inv_std,
            training,
        },
    ))
}

/// `(d input, d gamma, d beta)`.
pub fn batch_norm_backward<T: Real>(
    shape: &[usize],
    gamma: &[T],
    cache: &BatchNormCache<T>,
    grad_out: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let channels = gamma.len();
    let n = shape[0];
    let spatial = grad_out.len() / (n * channels);
    let count = T::of((n * spatial) as f64);
    let xh = &cache.normalized;
    let mut dgamma = vec![T::zero(); channels];
    let mut dbeta = vec![T::zero(); channels];
    for b in 0..n {
        for c in 0..channels {
            let off = (b * channels + c) * spatial;
            for i in off..off + spatial {
                dgamma[c] += grad_out[i] * xh[i];
                dbeta[c] += grad_out[i];
            }
        }
    }
    let mut dx = vec![T::zero(); grad_out.len()];
    for b in 0..n {
        for c in 0..channels {
            let off = (b * channels + c) * spatial;
            let scale = gamma[c] * cache.inv_std[c];
            if cache.training {
                let (sum_dy, sum_dy_xh) = (dbeta[c] / count, dgamma[c] / count);
                for i in off..off + spatial {
                    dx[i] = scale * (grad_out[i] - sum_dy - xh[i] * sum_dy_xh);
                }
            } else {
                for i in off..off + spatial {
                    dx[i] = scale * grad_out[i];
                }
            }
        }
    }
    (dx, dgamma, dbeta)
}
