//! Depth-to-space and its inverse.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

/// `out(b, ch, s*i + di, s*j + dj) = x(b, ch*s*s + di*s + dj, i, j)`.
pub fn pixel_shuffle<T: Scalar>(x: &Tensor<T>, sigma: usize) -> Result<Tensor<T>> {
    let xs = x.shape();
    let s2 = sigma * sigma;
    if sigma == 0 || !xs.c.is_multiple_of(s2) {
        return Err(Error::shape(format!(
            "{} channels not divisible by sigma^2 = {s2}",
            xs.c
        )));
    }
    let os = Shape::new(xs.n, xs.c / s2, xs.h * sigma, xs.w * sigma)?;
    Ok(Tensor::from_fn(os, |b, ch, y, x_| {
        let (i, di) = (y / sigma, y % sigma);
        let (j, dj) = (x_ / sigma, x_ % sigma);
        x.get(b, ch * s2 + di * sigma + dj, i, j)
    }))
}

/// Inverse of [`pixel_shuffle`]; also its adjoint.
pub fn pixel_unshuffle<T: Scalar>(x: &Tensor<T>, sigma: usize) -> Result<Tensor<T>> {
    let xs = x.shape();
    if sigma == 0 || !xs.h.is_multiple_of(sigma) || !xs.w.is_multiple_of(sigma) {
        return Err(Error::shape(format!(
            "spatial size {}x{} not divisible by sigma = {sigma}",
            xs.h, xs.w
        )));
    }
    let s2 = sigma * sigma;
    let os = Shape::new(xs.n, xs.c * s2, xs.h / sigma, xs.w / sigma)?;
    Ok(Tensor::from_fn(os, |b, ch, i, j| {
        let (c0, sub) = (ch / s2, ch % s2);
        let (di, dj) = (sub / sigma, sub % sigma);
        x.get(b, c0, sigma * i + di, sigma * j + dj)
    }))
}
