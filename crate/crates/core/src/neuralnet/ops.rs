//! Forward and backward kernels. Every kernel is a pure function of its
//! arguments; layers own parameters and caches.
//!
//! Batch work runs per sample on the rayon pool. Cross-sample reductions
//! (weight and bias gradients) are formed per sample and summed in sample
//! order, so results do not depend on the number of worker threads.

use rayon::prelude::*;

use super::tensor::{gemm, MatRef, Scalar, Tensor};
use crate::error::{Error, Result};

/// Probability clamp used by the cross-entropy losses.
pub const PROB_CLAMP: f64 = 1e-7;

/// Kernel size, stride and per-side zero padding of a 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub k: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub pad_bottom: usize,
    pub pad_right: usize,
}

impl ConvGeom {
    pub const CONV3X3: ConvGeom = ConvGeom {
        k: 3,
        stride: 1,
        pad_top: 1,
        pad_left: 1,
        pad_bottom: 1,
        pad_right: 1,
    };
    pub const DOWN2X2: ConvGeom = ConvGeom {
        k: 2,
        stride: 2,
        pad_top: 0,
        pad_left: 0,
        pad_bottom: 0,
        pad_right: 0,
    };
    /// 2x2 window anchored top-left with one zero row/column appended at the
    /// bottom and right, so the spatial size is preserved.
    pub const SAME2X2: ConvGeom = ConvGeom {
        k: 2,
        stride: 1,
        pad_top: 0,
        pad_left: 0,
        pad_bottom: 1,
        pad_right: 1,
    };
    pub const POINTWISE: ConvGeom = ConvGeom {
        k: 1,
        stride: 1,
        pad_top: 0,
        pad_left: 0,
        pad_bottom: 0,
        pad_right: 0,
    };

    pub fn out_dims(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let hp = h + self.pad_top + self.pad_bottom;
        let wp = w + self.pad_left + self.pad_right;
        if h == 0 || w == 0 || hp < self.k || wp < self.k {
            return Err(Error::Shape(format!("{h}x{w} input too small for a {0}x{0} kernel", self.k)));
        }
        if self.stride > 1 && ((hp - self.k) % self.stride != 0 || (wp - self.k) % self.stride != 0) {
            return Err(Error::Shape(format!(
                "{h}x{w} input does not tile with stride {}",
                self.stride
            )));
        }
        Ok(((hp - self.k) / self.stride + 1, (wp - self.k) / self.stride + 1))
    }
}

/// Range of output columns `ox` whose input column `ox + off` is in `[0, w)`.
fn valid_span(off: isize, wo: usize, w: usize) -> (usize, usize) {
    let lo = (-off).max(0) as usize;
    let hi = (w as isize - off).clamp(0, wo as isize) as usize;
    (lo.min(hi), hi)
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(x: &[T], ci: usize, h: usize, w: usize, g: ConvGeom, ho: usize, wo: usize, col: &mut [T]) {
    let p = ho * wo;
    let k = g.k;
    for c in 0..ci {
        for ky in 0..k {
            for kx in 0..k {
                let row = ((c * k + ky) * k + kx) * p;
                for oy in 0..ho {
                    let dst = &mut col[row + oy * wo..row + (oy + 1) * wo];
                    let iy = (oy * g.stride + ky) as isize - g.pad_top as isize;
                    if iy < 0 || iy >= h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &x[(c * h + iy as usize) * w..][..w];
                    if g.stride == 1 {
                        let off = kx as isize - g.pad_left as isize;
                        let (lo, hi) = valid_span(off, wo, w);
                        dst[..lo].fill(T::zero());
                        let s0 = (lo as isize + off) as usize;
                        dst[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
                        dst[hi..].fill(T::zero());
                    } else {
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad_left as isize;
                            *d = if ix >= 0 && ix < w as isize { src[ix as usize] } else { T::zero() };
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(col: &[T], ci: usize, h: usize, w: usize, g: ConvGeom, ho: usize, wo: usize, dx: &mut [T]) {
    let p = ho * wo;
    let k = g.k;
    for c in 0..ci {
        for ky in 0..k {
            for kx in 0..k {
                let row = ((c * k + ky) * k + kx) * p;
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad_top as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &col[row + oy * wo..row + (oy + 1) * wo];
                    let dst = &mut dx[(c * h + iy as usize) * w..][..w];
                    if g.stride == 1 {
                        let off = kx as isize - g.pad_left as isize;
                        let (lo, hi) = valid_span(off, wo, w);
                        let d0 = (lo as isize + off) as usize;
                        for (d, &s) in dst[d0..d0 + (hi - lo)].iter_mut().zip(&src[lo..hi]) {
                            *d = *d + s;
                        }
                    } else {
                        for (ox, &s) in src.iter().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad_left as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] = dst[ix as usize] + s;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Convolution output plus the unfolded input needed by the backward pass.
pub struct ConvForward<T> {
    pub output: Tensor<T>,
    pub cols: Vec<T>,
}

/// Cross-correlation of `x` with `weights` laid out `(co, ci, k, k)`.
pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    weights: &[T],
    bias: &[T],
    co: usize,
    g: ConvGeom,
) -> Result<ConvForward<T>> {
    let [n, ci, h, w] = x.shape();
    let kk = ci * g.k * g.k;
    if weights.len() != co * kk || bias.len() != co {
        return Err(Error::Shape(format!(
            "conv expects {co}x{ci}x{0}x{0} weights and {co} biases, got {1} and {2}",
            g.k,
            weights.len(),
            bias.len()
        )));
    }
    let (ho, wo) = g.out_dims(h, w)?;
    let p = ho * wo;
    let mut cols = vec![T::zero(); n * kk * p];
    let mut out = vec![T::zero(); n * co * p];
    out.par_chunks_mut(co * p)
        .zip(cols.par_chunks_mut(kk * p))
        .enumerate()
        .for_each(|(i, (o, col))| {
            im2col(x.sample(i), ci, h, w, g, ho, wo, col);
            for (c, &b) in bias.iter().enumerate() {
                o[c * p..(c + 1) * p].fill(b);
            }
            gemm(co, kk, p, T::one(), MatRef::rows(weights, kk), MatRef::rows(col, p), T::one(), o);
        });
    Ok(ConvForward {
        output: Tensor::new([n, co, ho, wo], out)?,
        cols,
    })
}

pub struct ConvGrads<T> {
    pub dx: Option<Tensor<T>>,
    pub dw: Vec<T>,
    pub db: Vec<T>,
}

pub fn conv2d_backward<T: Scalar>(
    dy: &Tensor<T>,
    weights: &[T],
    cols: &[T],
    x_shape: [usize; 4],
    g: ConvGeom,
    need_dx: bool,
) -> Result<ConvGrads<T>> {
    let [n, ci, h, w] = x_shape;
    let [dn, co, ho, wo] = dy.shape();
    let kk = ci * g.k * g.k;
    let p = ho * wo;
    if dn != n || g.out_dims(h, w)? != (ho, wo) || cols.len() != n * kk * p || weights.len() != co * kk {
        return Err(Error::Shape("conv backward operands disagree".into()));
    }
    let per_sample: Vec<(Vec<T>, Vec<T>, Vec<T>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let dyi = dy.sample(i);
            let col = &cols[i * kk * p..(i + 1) * kk * p];
            let mut dw = vec![T::zero(); co * kk];
            gemm(co, p, kk, T::one(), MatRef::rows(dyi, p), MatRef::transposed(col, p), T::zero(), &mut dw);
            let db = (0..co).map(|c| dyi[c * p..(c + 1) * p].iter().copied().sum()).collect();
            let dx = if need_dx {
                let mut dcol = vec![T::zero(); kk * p];
                gemm(kk, co, p, T::one(), MatRef::transposed(weights, kk), MatRef::rows(dyi, p), T::zero(), &mut dcol);
                let mut dx = vec![T::zero(); ci * h * w];
                col2im(&dcol, ci, h, w, g, ho, wo, &mut dx);
                dx
            } else {
                Vec::new()
            };
            (dw, db, dx)
        })
        .collect();

    let mut dw = vec![T::zero(); co * kk];
    let mut db = vec![T::zero(); co];
    let mut dx = Vec::with_capacity(if need_dx { n * ci * h * w } else { 0 });
    for (sw, sb, sx) in per_sample {
        add_into(&mut dw, &sw);
        add_into(&mut db, &sb);
        dx.extend_from_slice(&sx);
    }
    Ok(ConvGrads {
        dx: if need_dx { Some(Tensor::new(x_shape, dx)?) } else { None },
        dw,
        db,
    })
}

pub(crate) fn add_into<T: Scalar>(acc: &mut [T], v: &[T]) {
    for (a, &b) in acc.iter_mut().zip(v) {
        *a = *a + b;
    }
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    let mut out = vec![T::zero(); n * c * 4 * h * w];
    for (plane, dst) in x.data().chunks(h * w).zip(out.chunks_mut(4 * h * w)) {
        for y in 0..2 * h {
            for xx in 0..2 * w {
                dst[y * 2 * w + xx] = plane[(y / 2) * w + xx / 2];
            }
        }
    }
    Tensor::new([n, c, 2 * h, 2 * w], out).expect("consistent shape")
}

/// Adjoint of [`upsample2`]: sums each 2x2 block.
pub fn upsample2_backward<T: Scalar>(dy: &Tensor<T>) -> Tensor<T> {
    let [n, c, h2, w2] = dy.shape();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut out = vec![T::zero(); n * c * h * w];
    for (plane, dst) in dy.data().chunks(h2 * w2).zip(out.chunks_mut(h * w)) {
        for y in 0..h2 {
            for x in 0..w2 {
                let d = &mut dst[(y / 2) * w + x / 2];
                *d = *d + plane[y * w2 + x];
            }
        }
    }
    Tensor::new([n, c, h, w], out).expect("consistent shape")
}

/// 3x3 convolution with one pixel of zero padding on every side.
pub fn conv3x3<T: Scalar>(x: &Tensor<T>, weights: &[T], bias: &[T], co: usize) -> Result<Tensor<T>> {
    Ok(conv2d_forward(x, weights, bias, co, ConvGeom::CONV3X3)?.output)
}

/// 2x2 convolution with stride 2; spatial dimensions must be even.
pub fn down_conv<T: Scalar>(x: &Tensor<T>, weights: &[T], bias: &[T], co: usize) -> Result<Tensor<T>> {
    if x.h() % 2 != 0 || x.w() % 2 != 0 {
        return Err(Error::Shape(format!("down-conv needs even dims, got {}x{}", x.h(), x.w())));
    }
    Ok(conv2d_forward(x, weights, bias, co, ConvGeom::DOWN2X2)?.output)
}

/// Nearest 2x upsample followed by a size-preserving 2x2 convolution that
/// halves the channel count.
pub fn up_conv<T: Scalar>(x: &Tensor<T>, weights: &[T], bias: &[T]) -> Result<Tensor<T>> {
    if x.c() % 2 != 0 {
        return Err(Error::Shape(format!("up-conv needs an even channel count, got {}", x.c())));
    }
    Ok(conv2d_forward(&upsample2(x), weights, bias, x.c() / 2, ConvGeom::SAME2X2)?.output)
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

pub const BN_EPS: f64 = 1e-5;

pub struct BnForward<T> {
    pub output: Tensor<T>,
    pub xhat: Vec<T>,
    pub inv_std: Vec<f64>,
    pub mean: Vec<f64>,
    /// Biased (population) variance of the batch.
    pub var: Vec<f64>,
}

fn channel_planes<T>(data: &[T], c: usize, ch: usize, hw: usize) -> impl Iterator<Item = &[T]> {
    data.chunks(hw).skip(ch).step_by(c)
}

pub fn batch_norm_train<T: Scalar>(x: &Tensor<T>, gamma: &[T], beta: &[T]) -> Result<BnForward<T>> {
    let [n, c, h, w] = x.shape();
    let hw = h * w;
    let m = n * hw;
    if gamma.len() != c || beta.len() != c {
        return Err(Error::Shape(format!("batch norm over {c} channels got {} scales", gamma.len())));
    }
    if m < 2 {
        return Err(Error::Shape("batch norm needs at least two values per channel".into()));
    }
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let s: f64 = channel_planes(x.data(), c, ch, hw)
            .flat_map(|p| p.iter())
            .map(|v| v.f64())
            .sum();
        let mu = s / m as f64;
        let ss: f64 = channel_planes(x.data(), c, ch, hw)
            .flat_map(|p| p.iter())
            .map(|v| (v.f64() - mu).powi(2))
            .sum();
        mean[ch] = mu;
        var[ch] = ss / m as f64;
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut xhat = vec![T::zero(); x.data().len()];
    let mut out = vec![T::zero(); x.data().len()];
    for (idx, ((src, xh), o)) in x
        .data()
        .chunks(hw)
        .zip(xhat.chunks_mut(hw))
        .zip(out.chunks_mut(hw))
        .enumerate()
    {
        let ch = idx % c;
        let (mu, is) = (T::of(mean[ch]), T::of(inv_std[ch]));
        for ((&v, xh), o) in src.iter().zip(xh.iter_mut()).zip(o.iter_mut()) {
            *xh = (v - mu) * is;
            *o = gamma[ch] * *xh + beta[ch];
        }
    }
    Ok(BnForward {
        output: Tensor::new(x.shape(), out)?,
        xhat,
        inv_std,
        mean,
        var,
    })
}

pub fn batch_norm_eval<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    running_mean: &[T],
    running_var: &[T],
) -> Result<Tensor<T>> {
    let [_, c, h, w] = x.shape();
    if gamma.len() != c || beta.len() != c || running_mean.len() != c || running_var.len() != c {
        return Err(Error::Shape(format!("batch norm over {c} channels got mismatched statistics")));
    }
    let hw = h * w;
    let eps = T::of(BN_EPS);
    let mut out = x.clone();
    for (idx, plane) in out.data_mut().chunks_mut(hw).enumerate() {
        let ch = idx % c;
        let scale = gamma[ch] / (running_var[ch] + eps).sqrt();
        let shift = beta[ch] - running_mean[ch] * scale;
        for v in plane {
            *v = *v * scale + shift;
        }
    }
    Ok(out)
}

pub struct BnGrads<T> {
    pub dx: Tensor<T>,
    pub dgamma: Vec<T>,
    pub dbeta: Vec<T>,
}

pub fn batch_norm_backward<T: Scalar>(dy: &Tensor<T>, xhat: &[T], inv_std: &[f64], gamma: &[T]) -> Result<BnGrads<T>> {
    let [n, c, h, w] = dy.shape();
    let hw = h * w;
    let m = (n * hw) as f64;
    if xhat.len() != dy.data().len() || inv_std.len() != c || gamma.len() != c {
        return Err(Error::Shape("batch norm backward operands disagree".into()));
    }
    let mut sum_dy = vec![0.0; c];
    let mut sum_dy_xhat = vec![0.0; c];
    for (idx, (d, xh)) in dy.data().chunks(hw).zip(xhat.chunks(hw)).enumerate() {
        let ch = idx % c;
        for (&a, &b) in d.iter().zip(xh) {
            sum_dy[ch] += a.f64();
            sum_dy_xhat[ch] += a.f64() * b.f64();
        }
    }
    let mut dx = vec![T::zero(); dy.data().len()];
    for (idx, ((d, xh), o)) in dy.data().chunks(hw).zip(xhat.chunks(hw)).zip(dx.chunks_mut(hw)).enumerate() {
        let ch = idx % c;
        let k = T::of(gamma[ch].f64() * inv_std[ch] / m);
        let mm = T::of(m);
        let (s1, s2) = (T::of(sum_dy[ch]), T::of(sum_dy_xhat[ch]));
        for ((&dv, &xv), o) in d.iter().zip(xh).zip(o.iter_mut()) {
            *o = k * (mm * dv - s1 - xv * s2);
        }
    }
    Ok(BnGrads {
        dx: Tensor::new(dy.shape(), dx)?,
        dgamma: sum_dy_xhat.into_iter().map(T::of).collect(),
        dbeta: sum_dy.into_iter().map(T::of).collect(),
    })
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.max(T::zero()))
}

/// Gradient of ReLU given its output.
pub fn relu_backward<T: Scalar>(dy: &Tensor<T>, y: &Tensor<T>) -> Tensor<T> {
    let data = dy
        .data()
        .iter()
        .zip(y.data())
        .map(|(&d, &v)| if v > T::zero() { d } else { T::zero() })
        .collect();
    Tensor::new(dy.shape(), data).expect("same shape")
}

pub fn sigmoid_scalar<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid_scalar)
}

/// Gradient of the sigmoid given its output.
pub fn sigmoid_backward<T: Scalar>(dy: &Tensor<T>, y: &Tensor<T>) -> Tensor<T> {
    let data = dy
        .data()
        .iter()
        .zip(y.data())
        .map(|(&d, &s)| d * s * (T::one() - s))
        .collect();
    Tensor::new(dy.shape(), data).expect("same shape")
}

/// Row-wise softmax of an `n x k` matrix.
pub fn softmax_rows<T: Scalar>(logits: &[T], k: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(k) {
        let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
        let e: Vec<T> = row.iter().map(|&v| (v - mx).exp()).collect();
        let s: T = e.iter().copied().sum();
        out.extend(e.into_iter().map(|v| v / s));
    }
    out
}

/// Softmax over 4 logits per sample.
pub fn softmax4<T: Scalar>(logits: &[T]) -> Result<Vec<T>> {
    if logits.is_empty() || logits.len() % 4 != 0 {
        return Err(Error::Shape(format!("softmax4 needs 4 logits per sample, got {}", logits.len())));
    }
    Ok(softmax_rows(logits, 4))
}

/// Vector-Jacobian product of the row-wise softmax given its output.
pub fn softmax_backward<T: Scalar>(dp: &[T], p: &[T], k: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(p.len());
    for (d, s) in dp.chunks(k).zip(p.chunks(k)) {
        let dot: T = d.iter().zip(s).map(|(&a, &b)| a * b).sum();
        out.extend(d.iter().zip(s).map(|(&a, &b)| b * (a - dot)));
    }
    out
}

// ---------------------------------------------------------------------------
// Pooling and fully connected
// ---------------------------------------------------------------------------

/// Per-channel spatial mean of the first `channels` channels; `n x channels`.
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>, channels: usize) -> Result<Vec<T>> {
    let [n, c, h, w] = x.shape();
    if channels == 0 || channels > c {
        return Err(Error::Shape(format!("cannot pool {channels} of {c} channels")));
    }
    let hw = h * w;
    let inv = T::of(1.0 / hw as f64);
    let mut out = Vec::with_capacity(n * channels);
    for i in 0..n {
        for ch in 0..channels {
            let plane = &x.sample(i)[ch * hw..(ch + 1) * hw];
            out.push(plane.iter().copied().sum::<T>() * inv);
        }
    }
    Ok(out)
}

pub fn global_avg_pool_backward<T: Scalar>(dpooled: &[T], x_shape: [usize; 4], channels: usize) -> Tensor<T> {
    let [n, c, h, w] = x_shape;
    let hw = h * w;
    let inv = T::of(1.0 / hw as f64);
    let mut dx = Tensor::zeros(x_shape);
    let data = dx.data_mut();
    for i in 0..n {
        for ch in 0..channels {
            let g = dpooled[i * channels + ch] * inv;
            data[(i * c + ch) * hw..(i * c + ch + 1) * hw].fill(g);
        }
    }
    dx
}

/// `y = x W^T + b` for `x: n x fin`, `W: fout x fin`.
pub fn fc_forward<T: Scalar>(x: &[T], weights: &[T], bias: &[T], fin: usize, fout: usize) -> Result<Vec<T>> {
    if fin == 0 || x.len() % fin != 0 || weights.len() != fin * fout || bias.len() != fout {
        return Err(Error::Shape("fully connected operands disagree".into()));
    }
    let n = x.len() / fin;
    let mut y: Vec<T> = (0..n).flat_map(|_| bias.iter().copied()).collect();
    gemm(n, fin, fout, T::one(), MatRef::rows(x, fin), MatRef::transposed(weights, fin), T::one(), &mut y);
    Ok(y)
}

pub struct FcGrads<T> {
    pub dx: Vec<T>,
    pub dw: Vec<T>,
    pub db: Vec<T>,
}

pub fn fc_backward<T: Scalar>(dy: &[T], x: &[T], weights: &[T], fin: usize, fout: usize) -> FcGrads<T> {
    let n = x.len() / fin;
    let mut dx = vec![T::zero(); n * fin];
    gemm(n, fout, fin, T::one(), MatRef::rows(dy, fout), MatRef::rows(weights, fin), T::zero(), &mut dx);
    let mut dw = vec![T::zero(); fout * fin];
    gemm(fout, n, fin, T::one(), MatRef::transposed(dy, fout), MatRef::rows(x, fin), T::zero(), &mut dw);
    let db = (0..fout)
        .map(|o| (0..n).map(|i| dy[i * fout + o]).sum())
        .collect();
    FcGrads { dx, dw, db }
}

/// Channel concatenation `[a, b]`.
pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, ca, h, w] = a.shape();
    if b.n() != n || b.h() != h || b.w() != w {
        return Err(Error::Shape(format!("cannot concatenate {:?} with {:?}", a.shape(), b.shape())));
    }
    let mut data = Vec::with_capacity(a.data().len() + b.data().len());
    for i in 0..n {
        data.extend_from_slice(a.sample(i));
        data.extend_from_slice(b.sample(i));
    }
    Tensor::new([n, ca + b.c(), h, w], data)
}

/// Splits a channel gradient back into the parts of [`concat_channels`].
pub fn split_channels<T: Scalar>(d: &Tensor<T>, ca: usize) -> (Tensor<T>, Tensor<T>) {
    let [n, c, h, w] = d.shape();
    let cut = ca * h * w;
    let mut a = Vec::with_capacity(n * cut);
    let mut b = Vec::with_capacity(n * (c - ca) * h * w);
    for i in 0..n {
        let s = d.sample(i);
        a.extend_from_slice(&s[..cut]);
        b.extend_from_slice(&s[cut..]);
    }
    (
        Tensor::new([n, ca, h, w], a).expect("consistent shape"),
        Tensor::new([n, c - ca, h, w], b).expect("consistent shape"),
    )
}

// ---------------------------------------------------------------------------
// Losses. Each returns the scalar loss and its gradient.
// ---------------------------------------------------------------------------

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// Mean binary cross-entropy over all pixels. The gradient is that of the
/// clamped expression, so it vanishes where the clamp is active.
pub fn seg_bce<T: Scalar>(p: &[T], y: &[T]) -> Result<(f64, Vec<T>)> {
    if p.len() != y.len() || p.is_empty() {
        return Err(Error::Shape(format!("probability map {} vs mask {}", p.len(), y.len())));
    }
    let m = p.len() as f64;
    let mut loss = 0.0;
    let grad = p
        .iter()
        .zip(y)
        .map(|(&pv, &yv)| {
            let (raw, yv) = (pv.f64(), yv.f64());
            let pc = clamp_prob(raw);
            loss -= yv * pc.ln() + (1.0 - yv) * (1.0 - pc).ln();
            if raw != pc {
                T::zero()
            } else {
                T::of((-yv / pc + (1.0 - yv) / (1.0 - pc)) / m)
            }
        })
        .collect();
    Ok((loss / m, grad))
}

/// Sigmoid followed by [`seg_bce`], returning `(loss, probabilities,
/// dlogits)`. The reported loss uses the clamp; the gradient is the exact
/// unclamped `(p - y) / m`, which stays informative at saturation.
pub fn seg_bce_with_logits<T: Scalar>(z: &[T], y: &[T]) -> Result<(f64, Vec<T>, Vec<T>)> {
    if z.len() != y.len() || z.is_empty() {
        return Err(Error::Shape(format!("logit map {} vs mask {}", z.len(), y.len())));
    }
    let m = z.len() as f64;
    let p: Vec<T> = z.iter().map(|&v| sigmoid_scalar(v)).collect();
    let mut loss = 0.0;
    let grad = p
        .iter()
        .zip(y)
        .map(|(&pv, &yv)| {
            let (pc, yv64) = (clamp_prob(pv.f64()), yv.f64());
            loss -= yv64 * pc.ln() + (1.0 - yv64) * (1.0 - pc).ln();
            (pv - yv) * T::of(1.0 / m)
        })
        .collect();
    Ok((loss / m, p, grad))
}

fn check_classes(n_rows: usize, classes: &[u8], k: usize) -> Result<()> {
    if n_rows != classes.len() || classes.is_empty() {
        return Err(Error::Shape(format!("{n_rows} probability rows for {} labels", classes.len())));
    }
    if let Some(c) = classes.iter().find(|&&c| c as usize >= k) {
        return Err(Error::Shape(format!("class {c} out of range for {k} classes")));
    }
    Ok(())
}

/// Mean of `-ln p[class]` over the batch; rows of 4 probabilities.
pub fn cls_ce<T: Scalar>(probs: &[T], classes: &[u8]) -> Result<(f64, Vec<T>)> {
    if probs.len() % 4 != 0 {
        return Err(Error::Shape("class probabilities must come in rows of 4".into()));
    }
    check_classes(probs.len() / 4, classes, 4)?;
    let n = classes.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![T::zero(); probs.len()];
    for (i, &c) in classes.iter().enumerate() {
        let raw = probs[i * 4 + c as usize].f64();
        let pc = clamp_prob(raw);
        loss -= pc.ln();
        if raw == pc {
            grad[i * 4 + c as usize] = T::of(-1.0 / (pc * n));
        }
    }
    Ok((loss / n, grad))
}

/// Softmax followed by [`cls_ce`]: `(loss, probabilities, dlogits)`.
pub fn cls_ce_with_logits<T: Scalar>(logits: &[T], classes: &[u8]) -> Result<(f64, Vec<T>, Vec<T>)> {
    let p = softmax4(logits)?;
    let (loss, _) = cls_ce(&p, classes)?;
    let inv_n = T::of(1.0 / classes.len() as f64);
    let mut grad: Vec<T> = p.iter().map(|&v| v * inv_n).collect();
    for (i, &c) in classes.iter().enumerate() {
        grad[i * 4 + c as usize] = grad[i * 4 + c as usize] - inv_n;
    }
    Ok((loss, p, grad))
}

/// Mean squared difference between the pre-enhanced image and its target.
pub fn pe_l2<T: Scalar>(out: &[T], target: &[T]) -> Result<(f64, Vec<T>)> {
    if out.len() != target.len() || out.is_empty() {
        return Err(Error::Shape(format!("output {} vs target {}", out.len(), target.len())));
    }
    let m = out.len() as f64;
    let loss = out
        .iter()
        .zip(target)
        .map(|(&a, &b)| (a.f64() - b.f64()).powi(2))
        .sum::<f64>()
        / m;
    let scale = T::of(2.0 / m);
    let grad = out.iter().zip(target).map(|(&a, &b)| (a - b) * scale).collect();
    Ok((loss, grad))
}
