//! Per-location normalization over groups of consecutive channels.
//!
//! Channels `[g*group, (g+1)*group)` form one group; at every (batch, row,
//! col) the group's values are normalized together.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

fn check_group<T: Scalar>(x: &Tensor<T>, group: usize) -> Result<()> {
    if group == 0 || !x.shape().c.is_multiple_of(group) {
        return Err(Error::shape(format!(
            "{} channels not divisible into groups of {group}",
            x.shape().c
        )));
    }
    Ok(())
}

/// Calls `f` with the flat offsets of every group's members.
fn for_each_group(x_shape: crate::tensor::Shape, group: usize, mut f: impl FnMut(&[usize])) {
    let plane = x_shape.plane();
    let groups = x_shape.c / group;
    let mut idx = vec![0usize; group];
    for b in 0..x_shape.n {
        for g in 0..groups {
            let base = (b * x_shape.c + g * group) * plane;
            for p in 0..plane {
                for (t, slot) in idx.iter_mut().enumerate() {
                    *slot = base + t * plane + p;
                }
                f(&idx);
            }
        }
    }
}

/// Softmax over each channel group, computed with max subtraction.
pub fn softmax_group<T: Scalar>(x: &Tensor<T>, group: usize) -> Result<Tensor<T>> {
    check_group(x, group)?;
    let src = x.data();
    let mut out = Tensor::zeros(x.shape());
    let dst = out.data_mut();
    for_each_group(x.shape(), group, |idx| {
        let m = idx.iter().map(|&o| src[o]).fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for &o in idx {
            let e = (src[o] - m).exp();
            dst[o] = e;
            total = total + e;
        }
        for &o in idx {
            dst[o] = dst[o] / total;
        }
    });
    Ok(out)
}

/// Given the softmax output `y`, maps `dL/dy` to `dL/dx = y (g - <y, g>)`.
pub fn softmax_group_backward<T: Scalar>(grad_y: &Tensor<T>, y: &Tensor<T>, group: usize) -> Result<Tensor<T>> {
    check_group(y, group)?;
    grad_y.expect_shape(y.shape(), "softmax gradient")?;
    let (g, s) = (grad_y.data(), y.data());
    let mut out = Tensor::zeros(y.shape());
    let dst = out.data_mut();
    for_each_group(y.shape(), group, |idx| {
        let dot: T = idx.iter().map(|&o| g[o] * s[o]).sum();
        for &o in idx {
            dst[o] = s[o] * (g[o] - dot);
        }
    });
    Ok(out)
}

fn sigmoid<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

/// Elementwise logistic function; `group` only validates the channel layout.
pub fn sigmoid_group<T: Scalar>(x: &Tensor<T>, group: usize) -> Result<Tensor<T>> {
    check_group(x, group)?;
    Ok(x.map(sigmoid))
}

pub fn sigmoid_group_backward<T: Scalar>(grad_y: &Tensor<T>, y: &Tensor<T>, group: usize) -> Result<Tensor<T>> {
    check_group(y, group)?;
    grad_y.zip_map(y, |g, s| g * s * (T::one() - s))
}

/// Logistic function followed by division by the group sum.
pub fn sigmoid_norm_group<T: Scalar>(x: &Tensor<T>, group: usize) -> Result<Tensor<T>> {
    check_group(x, group)?;
    let src = x.data();
    let mut out = Tensor::zeros(x.shape());
    let dst = out.data_mut();
    for_each_group(x.shape(), group, |idx| {
        let mut total = T::zero();
        for &o in idx {
            let s = sigmoid(src[o]);
            dst[o] = s;
            total = total + s;
        }
        for &o in idx {
            dst[o] = dst[o] / total;
        }
    });
    Ok(out)
}

/// Needs the pre-activation logits `x`, since `y` alone loses the group sum.
pub fn sigmoid_norm_group_backward<T: Scalar>(grad_y: &Tensor<T>, x: &Tensor<T>, group: usize) -> Result<Tensor<T>> {
    check_group(x, group)?;
    grad_y.expect_shape(x.shape(), "sigmoid-normalize gradient")?;
    let (g, src) = (grad_y.data(), x.data());
    let mut out = Tensor::zeros(x.shape());
    let dst = out.data_mut();
    let mut s = vec![T::zero(); x.shape().c];
    for_each_group(x.shape(), group, |idx| {
        let mut total = T::zero();
        for (t, &o) in idx.iter().enumerate() {
            s[t] = sigmoid(src[o]);
            total = total + s[t];
        }
        // dp_i/ds_j = (delta_ij - p_i) / S
        let dot: T = idx.iter().enumerate().map(|(t, &o)| g[o] * s[t]).sum::<T>() / total;
        for (t, &o) in idx.iter().enumerate() {
            let gs = (g[o] - dot) / total;
            dst[o] = gs * s[t] * (T::one() - s[t]);
        }
    });
    Ok(out)
}
