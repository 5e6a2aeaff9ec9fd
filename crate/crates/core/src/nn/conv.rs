//! 2-D convolution (cross-correlation) with zero padding, its backward pass,
//! and transposed convolution.

use super::params::ConvLayerParams;
use super::{for_each_chunk, ExecPath};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

/// Output channels computed together by the blocked forward kernel.
const OC_BLOCK: usize = 4;

/// `floor((input + 2 pad - k) / stride) + 1`, or an error when it is < 1.
pub fn conv_output_size(input: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::InvalidGeometry("stride must be >= 1".into()));
    }
    let span = input + 2 * pad;
    if span < k {
        return Err(Error::InvalidGeometry(format!(
            "kernel {k} larger than padded input {span}"
        )));
    }
    Ok((span - k) / stride + 1)
}

/// `stride (input - 1) + k - 2 pad`, or an error when it is < 1.
pub fn transposed_output_size(input: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::InvalidGeometry("stride must be >= 1".into()));
    }
    let full = stride * (input - 1) + k;
    if full <= 2 * pad {
        return Err(Error::InvalidGeometry(format!(
            "transposed convolution output {full} - 2*{pad} is empty"
        )));
    }
    Ok(full - 2 * pad)
}

struct Geometry {
    x: Shape,
    out: Shape,
    k: usize,
    stride: usize,
    pad: usize,
}

fn conv_geometry<T: Scalar>(
    x: &Tensor<T>,
    p: &ConvLayerParams<T>,
    stride: usize,
    pad: usize,
) -> Result<Geometry> {
    let xs = x.shape();
    if xs.c != p.c_in() {
        return Err(Error::shape(format!(
            "input has {} channels, convolution expects {}",
            xs.c,
            p.c_in()
        )));
    }
    if p.bias.len() != p.c_out() {
        return Err(Error::shape(format!(
            "bias length {} != output channels {}",
            p.bias.len(),
            p.c_out()
        )));
    }
    let k = p.k();
    let oh = conv_output_size(xs.h, k, stride, pad)?;
    let ow = conv_output_size(xs.w, k, stride, pad)?;
    Ok(Geometry {
        x: xs,
        out: Shape::new(xs.n, p.c_out(), oh, ow)?,
        k,
        stride,
        pad,
    })
}

/// Input coordinate for output index `o` and kernel tap `t`, if inside `[0, len)`.
#[inline]
fn tap(o: usize, t: usize, stride: usize, pad: usize, len: usize) -> Option<usize> {
    let v = o * stride + t;
    if v < pad || v - pad >= len {
        None
    } else {
        Some(v - pad)
    }
}

pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    p: &ConvLayerParams<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    conv2d_forward_with(x, p, stride, pad, ExecPath::default())
}

pub fn conv2d_forward_with<T: Scalar>(
    x: &Tensor<T>,
    p: &ConvLayerParams<T>,
    stride: usize,
    pad: usize,
    path: ExecPath,
) -> Result<Tensor<T>> {
    let g = conv_geometry(x, p, stride, pad)?;
    let mut out = Tensor::zeros(g.out);
    match path {
        ExecPath::Direct => conv_direct(x, p, &g, out.data_mut()),
        ExecPath::Blocked => conv_blocked(x, p, &g, out.data_mut()),
    }
    Ok(out)
}

fn conv_direct<T: Scalar>(x: &Tensor<T>, p: &ConvLayerParams<T>, g: &Geometry, out: &mut [T]) {
    let Geometry { x: xs, out: os, k, stride, pad } = *g;
    let wt = p.weights.data();
    let work = os.len() * xs.c * k * k;
    for_each_chunk(out, os.plane(), work, |idx, plane| {
        let (b, oc) = (idx / os.c, idx % os.c);
        for oh in 0..os.h {
            for ow in 0..os.w {
                let mut acc = p.bias[oc];
                for ic in 0..xs.c {
                    let xp = x.plane(b, ic);
                    let wbase = (oc * xs.c + ic) * k * k;
                    for kh in 0..k {
                        let Some(ih) = tap(oh, kh, stride, pad, xs.h) else {
                            continue;
                        };
                        for kw in 0..k {
                            let Some(iw) = tap(ow, kw, stride, pad, xs.w) else {
                                continue;
                            };
                            acc = acc + xp[ih * xs.w + iw] * wt[wbase + kh * k + kw];
                        }
                    }
                }
                plane[oh * os.w + ow] = acc;
            }
        }
    });
}

/// Half-open range of output columns whose tap `t` lands inside the input row.
#[inline]
fn valid_cols(t: usize, stride: usize, pad: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    let lo = if pad > t { (pad - t).div_ceil(stride) } else { 0 };
    let hi = if in_len + pad > t {
        ((in_len + pad - t).div_ceil(stride)).min(out_len)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// `dst[o] += src[o * stride + t - pad] * w` for `o` in `lo..hi`.
#[inline]
fn gather_axpy<T: Scalar>(dst: &mut [T], src: &[T], (lo, hi): (usize, usize), stride: usize, shift: usize, pad: usize, w: T) {
    if lo >= hi {
        return;
    }
    if stride == 1 {
        let s = &src[lo + shift - pad..hi + shift - pad];
        for (d, &v) in dst[lo..hi].iter_mut().zip(s) {
            *d = *d + v * w;
        }
    } else {
        for o in lo..hi {
            dst[o] = dst[o] + src[o * stride + shift - pad] * w;
        }
    }
}

/// `dst[o * stride + t - pad] += src[o] * w` for `o` in `lo..hi`.
#[inline]
fn scatter_axpy<T: Scalar>(dst: &mut [T], src: &[T], (lo, hi): (usize, usize), stride: usize, shift: usize, pad: usize, w: T) {
    if lo >= hi {
        return;
    }
    if stride == 1 {
        let d = &mut dst[lo + shift - pad..hi + shift - pad];
        for (d, &v) in d.iter_mut().zip(&src[lo..hi]) {
            *d = *d + v * w;
        }
    } else {
        for o in lo..hi {
            let i = o * stride + shift - pad;
            dst[i] = dst[i] + src[o] * w;
        }
    }
}

/// Dot product with four interleaved partial sums.
#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] = acc[l] + x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail = tail + x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Unfolds image `b` into a `(c k k) x (oh ow)` row-major matrix; padding
/// taps are zero.
fn im2col<T: Scalar>(x: &Tensor<T>, b: usize, g: &Geometry, cols: &[(usize, usize)], out: &mut [T]) {
    let Geometry { x: xs, out: os, k, stride, pad } = *g;
    let n = os.plane();
    out.fill(T::zero());
    for ic in 0..xs.c {
        let xp = x.plane(b, ic);
        for kh in 0..k {
            for (kw, &range) in cols.iter().enumerate() {
                let row = &mut out[((ic * k + kh) * k + kw) * n..][..n];
                for oh in 0..os.h {
                    let Some(ih) = tap(oh, kh, stride, pad, xs.h) else {
                        continue;
                    };
                    let dst = &mut row[oh * os.w..(oh + 1) * os.w];
                    gather_axpy(dst, &xp[ih * xs.w..(ih + 1) * xs.w], range, stride, kw, pad, T::one());
                }
            }
        }
    }
}

// OC_BLOCK output planes are accumulated together from the unfolded input.
// Each output element still sums its (ic, kh, kw) taps in the same order as
// `conv_direct`; padding taps add zero, so the two agree bit for bit.
fn conv_blocked<T: Scalar>(x: &Tensor<T>, p: &ConvLayerParams<T>, g: &Geometry, out: &mut [T]) {
    let Geometry { x: xs, out: os, k, stride, pad } = *g;
    let wt = p.weights.data();
    let plane = os.plane();
    let taps = xs.c * k * k;
    let work = os.len() * taps;
    let cols: Vec<(usize, usize)> = (0..k)
        .map(|kw| valid_cols(kw, stride, pad, xs.w, os.w))
        .collect();
    for_each_chunk(out, os.c * plane, work, |b, batch_out| {
        let mut unfolded = vec![T::zero(); taps * plane];
        im2col(x, b, g, &cols, &mut unfolded);
        for (blk, block_out) in batch_out.chunks_mut(OC_BLOCK * plane).enumerate() {
            let oc0 = blk * OC_BLOCK;
            for (o, dst) in block_out.chunks_mut(plane).enumerate() {
                dst.fill(p.bias[oc0 + o]);
            }
            for r in 0..taps {
                let src = &unfolded[r * plane..(r + 1) * plane];
                for (o, dst) in block_out.chunks_mut(plane).enumerate() {
                    let wv = wt[(oc0 + o) * taps + r];
                    for (d, &v) in dst.iter_mut().zip(src) {
                        *d = *d + v * wv;
                    }
                }
            }
        }
    });
}

/// Returns the input gradient and accumulates into `p.grad_weights` / `p.grad_bias`.
pub fn conv2d_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    x: &Tensor<T>,
    p: &mut ConvLayerParams<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = conv_geometry(x, p, stride, pad)?;
    grad_out.expect_shape(g.out, "convolution output gradient")?;
    let Geometry { x: xs, out: os, k, .. } = g;
    let work = os.len() * xs.c * k * k;

    let stride = g.stride;
    let pad = g.pad;
    let cols: Vec<(usize, usize)> = (0..k).map(|t| valid_cols(t, stride, pad, xs.w, os.w)).collect();
    let rows: Vec<(usize, usize)> = (0..k).map(|t| valid_cols(t, stride, pad, xs.h, os.h)).collect();

    let plane = os.plane();
    let taps = xs.c * k * k;
    let mut unfolded = vec![T::zero(); xs.n * taps * plane];
    for (b, u) in unfolded.chunks_mut(taps * plane).enumerate() {
        im2col(x, b, &g, &cols, u);
    }

    let mut grad_x = Tensor::zeros(xs);
    {
        let wt = p.weights.data();
        for_each_chunk(grad_x.data_mut(), xs.plane(), work, |idx, dst| {
            let (b, ic) = (idx / xs.c, idx % xs.c);
            let mut col = vec![T::zero(); plane];
            for kh in 0..k {
                let (rlo, rhi) = rows[kh];
                for (kw, &range) in cols.iter().enumerate() {
                    let r = (ic * k + kh) * k + kw;
                    col.fill(T::zero());
                    for oc in 0..os.c {
                        let wv = wt[oc * taps + r];
                        for (c, &gv) in col.iter_mut().zip(grad_out.plane(b, oc)) {
                            *c = *c + gv * wv;
                        }
                    }
                    for oh in rlo..rhi {
                        let ih = oh * stride + kh - pad;
                        let grow = &col[oh * os.w..(oh + 1) * os.w];
                        scatter_axpy(&mut dst[ih * xs.w..(ih + 1) * xs.w], grow, range, stride, kw, pad, T::one());
                    }
                }
            }
        });
    }

    for_each_chunk(p.grad_weights.data_mut(), taps, work, |oc, gw| {
        for b in 0..xs.n {
            let gp = grad_out.plane(b, oc);
            let u = &unfolded[b * taps * plane..(b + 1) * taps * plane];
            for (r, acc) in gw.iter_mut().enumerate() {
                *acc = *acc + dot(gp, &u[r * plane..(r + 1) * plane]);
            }
        }
    });

    if p.bias_enabled {
        for oc in 0..os.c {
            let mut acc = T::zero();
            for b in 0..os.n {
                acc = acc + grad_out.plane(b, oc).iter().copied().sum::<T>();
            }
            p.grad_bias[oc] = p.grad_bias[oc] + acc;
        }
    }
    Ok(grad_x)
}

fn transposed_geometry<T: Scalar>(
    x: &Tensor<T>,
    p: &ConvLayerParams<T>,
    stride: usize,
    pad: usize,
) -> Result<Geometry> {
    let xs = x.shape();
    // weights are (c_in, c_out, k, k) here
    let (c_in, c_out) = (p.weights.shape().n, p.weights.shape().c);
    if xs.c != c_in {
        return Err(Error::shape(format!(
            "input has {} channels, transposed convolution expects {c_in}",
            xs.c
        )));
    }
    if p.bias.len() != c_out {
        return Err(Error::shape(format!(
            "bias length {} != output channels {c_out}",
            p.bias.len()
        )));
    }
    let k = p.k();
    let oh = transposed_output_size(xs.h, k, stride, pad)?;
    let ow = transposed_output_size(xs.w, k, stride, pad)?;
    Ok(Geometry {
        x: xs,
        out: Shape::new(xs.n, c_out, oh, ow)?,
        k,
        stride,
        pad,
    })
}

/// Transposed convolution, written as the scatter of every input pixel
/// through the kernel. It is the adjoint of `conv2d_forward` with the same
/// weights (bias aside).
pub fn transposed_conv_forward<T: Scalar>(
    x: &Tensor<T>,
    p: &ConvLayerParams<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = transposed_geometry(x, p, stride, pad)?;
    let Geometry { x: xs, out: os, k, .. } = g;
    let wt = p.weights.data();
    let mut out = Tensor::zeros(os);
    let work = xs.len() * os.c * k * k;
    for_each_chunk(out.data_mut(), os.plane(), work, |idx, plane| {
        let (b, co) = (idx / os.c, idx % os.c);
        plane.fill(p.bias[co]);
        for ci in 0..xs.c {
            let xp = x.plane(b, ci);
            let wbase = (ci * os.c + co) * k * k;
            for iy in 0..xs.h {
                for ix in 0..xs.w {
                    let v = xp[iy * xs.w + ix];
                    for kh in 0..k {
                        let Some(oy) = tap(iy, kh, stride, pad, os.h) else {
                            continue;
                        };
                        for kw in 0..k {
                            let Some(ox) = tap(ix, kw, stride, pad, os.w) else {
                                continue;
                            };
                            let o = oy * os.w + ox;
                            plane[o] = plane[o] + v * wt[wbase + kh * k + kw];
                        }
                    }
                }
            }
        }
    });
    Ok(out)
}

pub fn transposed_conv_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    x: &Tensor<T>,
    p: &mut ConvLayerParams<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = transposed_geometry(x, p, stride, pad)?;
    grad_out.expect_shape(g.out, "transposed convolution output gradient")?;
    let Geometry { x: xs, out: os, k, .. } = g;
    let work = xs.len() * os.c * k * k;

    let mut grad_x = Tensor::zeros(xs);
    {
        let wt = p.weights.data();
        for_each_chunk(grad_x.data_mut(), xs.plane(), work, |idx, plane| {
            let (b, ci) = (idx / xs.c, idx % xs.c);
            for iy in 0..xs.h {
                for ix in 0..xs.w {
                    let mut acc = T::zero();
                    for co in 0..os.c {
                        let gp = grad_out.plane(b, co);
                        let wbase = (ci * os.c + co) * k * k;
                        for kh in 0..k {
                            let Some(oy) = tap(iy, kh, stride, pad, os.h) else {
                                continue;
                            };
                            for kw in 0..k {
                                let Some(ox) = tap(ix, kw, stride, pad, os.w) else {
                                    continue;
                                };
                                acc = acc + gp[oy * os.w + ox] * wt[wbase + kh * k + kw];
                            }
                        }
                    }
                    plane[iy * xs.w + ix] = acc;
                }
            }
        });
    }

    for_each_chunk(p.grad_weights.data_mut(), os.c * k * k, work, |ci, gw| {
        for co in 0..os.c {
            for kh in 0..k {
                for kw in 0..k {
                    let mut acc = T::zero();
                    for b in 0..xs.n {
                        let xp = x.plane(b, ci);
                        let gp = grad_out.plane(b, co);
                        for iy in 0..xs.h {
                            let Some(oy) = tap(iy, kh, stride, pad, os.h) else {
                                continue;
                            };
                            for ix in 0..xs.w {
                                let Some(ox) = tap(ix, kw, stride, pad, os.w) else {
                                    continue;
                                };
                                acc = acc + xp[iy * xs.w + ix] * gp[oy * os.w + ox];
                            }
                        }
                    }
                    let gi = (co * k + kh) * k + kw;
                    gw[gi] = gw[gi] + acc;
                }
            }
        }
    });

    if p.bias_enabled {
        for co in 0..os.c {
            let mut acc = T::zero();
            for b in 0..os.n {
                acc = acc + grad_out.plane(b, co).iter().copied().sum::<T>();
            }
            p.grad_bias[co] = p.grad_bias[co] + acc;
        }
    }
    Ok(grad_x)
}
