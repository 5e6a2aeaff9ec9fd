use super::params::{ParamView, Trainable};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Variance guard for [`affine_norm`].
pub const NORM_EPS: f64 = 1e-5;

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.max(T::zero()))
}

/// Passes gradient where the forward input was positive.
pub fn relu_backward<T: Scalar>(grad_y: &Tensor<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    grad_y.zip_map(x, |g, v| if v > T::zero() { g } else { T::zero() })
}

/// Per-channel scale and shift applied after standardization.
#[derive(Debug, Clone)]
pub struct AffineNormParams<T: Scalar = f64> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub grad_gamma: Vec<T>,
    pub grad_beta: Vec<T>,
    velocity_gamma: Vec<T>,
    velocity_beta: Vec<T>,
}

impl<T: Scalar> AffineNormParams<T> {
    /// gamma = 1, beta = 0.
    pub fn identity(channels: usize) -> Self {
        Self::new(vec![T::one(); channels], vec![T::zero(); channels])
    }

    pub fn new(gamma: Vec<T>, beta: Vec<T>) -> Self {
        let c = gamma.len();
        AffineNormParams {
            grad_gamma: vec![T::zero(); c],
            grad_beta: vec![T::zero(); beta.len()],
            gamma,
            beta,
            velocity_gamma: Vec::new(),
            velocity_beta: Vec::new(),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

impl<T: Scalar> Trainable<T> for AffineNormParams<T> {
    fn visit_params(&mut self, f: &mut dyn FnMut(ParamView<'_, T>)) {
        f(ParamView {
            name: "gamma".into(),
            value: &mut self.gamma,
            grad: &mut self.grad_gamma,
            velocity: &mut self.velocity_gamma,
        });
        f(ParamView {
            name: "beta".into(),
            value: &mut self.beta,
            grad: &mut self.grad_beta,
            velocity: &mut self.velocity_beta,
        });
    }
}

#[derive(Debug, Clone)]
pub struct AffineNormCache<T: Scalar = f64> {
    pub x_hat: Tensor<T>,
    pub inv_std: Vec<T>,
}

/// Standardizes each channel over batch and space, then applies `gamma`, `beta`.
pub fn affine_norm<T: Scalar>(x: &Tensor<T>, gamma: &[T], beta: &[T]) -> Result<Tensor<T>> {
    let p = AffineNormParams::new(gamma.to_vec(), beta.to_vec());
    Ok(affine_norm_forward(x, &p)?.0)
}

pub fn affine_norm_forward<T: Scalar>(
    x: &Tensor<T>,
    p: &AffineNormParams<T>,
) -> Result<(Tensor<T>, AffineNormCache<T>)> {
    let s = x.shape();
    if p.gamma.len() != s.c || p.beta.len() != s.c {
        return Err(Error::shape(format!(
            "gamma/beta lengths {}/{} != {} channels",
            p.gamma.len(),
            p.beta.len(),
            s.c
        )));
    }
    let count = T::from_usize(s.n * s.plane()).unwrap();
    let eps = T::of(NORM_EPS);
    let mut x_hat = Tensor::zeros(s);
    let mut y = Tensor::zeros(s);
    let mut inv_std = vec![T::zero(); s.c];
    for ch in 0..s.c {
        let mut sum = T::zero();
        for b in 0..s.n {
            sum = sum + x.plane(b, ch).iter().copied().sum::<T>();
        }
        let mean = sum / count;
        let mut var = T::zero();
        for b in 0..s.n {
            var = var + x.plane(b, ch).iter().map(|&v| (v - mean) * (v - mean)).sum::<T>();
        }
        let istd = T::one() / (var / count + eps).sqrt();
        inv_std[ch] = istd;
        for b in 0..s.n {
            let off = (b * s.c + ch) * s.plane();
            for (t, &v) in x.plane(b, ch).iter().enumerate() {
                let h = (v - mean) * istd;
                x_hat.data_mut()[off + t] = h;
                y.data_mut()[off + t] = p.gamma[ch] * h + p.beta[ch];
            }
        }
    }
    Ok((y, AffineNormCache { x_hat, inv_std }))
}

/// Accumulates gamma/beta gradients and returns the input gradient.
pub fn affine_norm_backward<T: Scalar>(
    grad_y: &Tensor<T>,
    cache: &AffineNormCache<T>,
    p: &mut AffineNormParams<T>,
) -> Result<Tensor<T>> {
    let s = cache.x_hat.shape();
    grad_y.expect_shape(s, "affine norm gradient")?;
    if p.gamma.len() != s.c {
        return Err(Error::shape("gamma length does not match cached channels"));
    }
    let count = T::from_usize(s.n * s.plane()).unwrap();
    let mut grad_x = Tensor::zeros(s);
    for ch in 0..s.c {
        let (mut sum_g, mut sum_gx) = (T::zero(), T::zero());
        for b in 0..s.n {
            for (&g, &h) in grad_y.plane(b, ch).iter().zip(cache.x_hat.plane(b, ch)) {
                sum_g = sum_g + g;
                sum_gx = sum_gx + g * h;
            }
        }
        p.grad_beta[ch] = p.grad_beta[ch] + sum_g;
        p.grad_gamma[ch] = p.grad_gamma[ch] + sum_gx;
        let scale = p.gamma[ch] * cache.inv_std[ch] / count;
        for b in 0..s.n {
            let off = (b * s.c + ch) * s.plane();
            for (t, (&g, &h)) in grad_y.plane(b, ch).iter().zip(cache.x_hat.plane(b, ch)).enumerate() {
                grad_x.data_mut()[off + t] = scale * (count * g - sum_g - h * sum_gx);
            }
        }
    }
    Ok(grad_x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn relu_clamps() {
        let x = Tensor::<f64>::from_vec([1, 1, 1, 2], vec![-1.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 2.0]);
    }

    #[test]
    fn constant_channel_normalizes_to_zero() {
        let x = Tensor::<f64>::new([2, 3, 4, 4], 5.0).unwrap();
        let y = affine_norm(&x, &[1.0; 3], &[0.0; 3]).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn standardizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::<f64>::random_uniform(Shape::new(3, 2, 5, 5).unwrap(), -3.0, 7.0, &mut rng);
        let y = affine_norm(&x, &[2.0, 1.0], &[0.5, -1.0]).unwrap();
        for (ch, (g, bta)) in [(2.0, 0.5), (1.0, -1.0)].into_iter().enumerate() {
            let vals: Vec<f64> = (0..3).flat_map(|b| y.plane(b, ch).to_vec()).collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|u| (u - m) * (u - m)).sum::<f64>() / vals.len() as f64;
            assert!((m - bta).abs() < 1e-12);
            assert!((v.sqrt() - g).abs() < 1e-3);
        }
    }

    #[test]
    fn length_mismatch() {
        let x = Tensor::<f64>::new([1, 3, 2, 2], 0.0).unwrap();
        assert!(matches!(affine_norm(&x, &[1.0; 2], &[0.0; 2]), Err(Error::Shape(_))));
    }
}
