//! Dense 4-D tensors in batch-channel-row-col order.
//!
//! Element `(b, ch, i, j)` lives at offset `((b * c + ch) * h + i) * w + j`.
//! Every op in the crate returns a fresh tensor; in-place mutation is limited
//! to gradient buffers owned by the caller.

use std::fmt;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive};
use rand::Rng;

use crate::error::{Error, Result};

/// Element precision of a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Floating-point element type. Implemented for `f32` and `f64`.
pub trait Scalar:
    Float + FromPrimitive + Sum + Default + fmt::Debug + fmt::Display + Send + Sync + 'static
{
    const DTYPE: DType;

    fn of(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("f64 is representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("float converts to f64")
    }

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
    }
}

/// Batch, channel, height, width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Result<Self> {
        if n == 0 || c == 0 || h == 0 || w == 0 {
            return Err(Error::InvalidShape(vec![n, c, h, w]));
        }
        Ok(Shape { n, c, h, w })
    }

    pub fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    #[inline]
    pub fn offset(&self, b: usize, ch: usize, i: usize, j: usize) -> usize {
        ((b * self.c + ch) * self.h + i) * self.w + j
    }
}

impl TryFrom<[usize; 4]> for Shape {
    type Error = Error;

    fn try_from(d: [usize; 4]) -> Result<Self> {
        Shape::new(d[0], d[1], d[2], d[3])
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T = f64> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("dtype", &T::DTYPE)
            .finish_non_exhaustive()
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn new(dims: [usize; 4], fill: T) -> Result<Self> {
        let shape = Shape::try_from(dims)?;
        Ok(Self::filled(shape, fill))
    }

    pub fn filled(shape: Shape, fill: T) -> Self {
        Tensor {
            shape,
            data: vec![fill; shape.len()],
        }
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::filled(shape, T::zero())
    }

    pub fn from_vec(dims: [usize; 4], data: Vec<T>) -> Result<Self> {
        let shape = Shape::try_from(dims)?;
        Self::from_shape_vec(shape, data)
    }

    pub fn from_shape_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::shape(format!(
                "buffer of length {} does not fit shape {shape} ({} elements)",
                data.len(),
                shape.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(shape.len());
        for b in 0..shape.n {
            for ch in 0..shape.c {
                for i in 0..shape.h {
                    for j in 0..shape.w {
                        data.push(f(b, ch, i, j));
                    }
                }
            }
        }
        Tensor { shape, data }
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn random_uniform<R: Rng + ?Sized>(shape: Shape, lo: f64, hi: f64, rng: &mut R) -> Self {
        let data = (0..shape.len())
            .map(|_| T::of(rng.gen_range(lo..hi)))
            .collect();
        Tensor { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, b: usize, ch: usize, i: usize, j: usize) -> T {
        self.data[self.shape.offset(b, ch, i, j)]
    }

    #[inline]
    pub fn set(&mut self, b: usize, ch: usize, i: usize, j: usize, v: T) {
        let o = self.shape.offset(b, ch, i, j);
        self.data[o] = v;
    }

    /// Contiguous `h * w` plane for one (batch, channel).
    pub fn plane(&self, b: usize, ch: usize) -> &[T] {
        let p = self.shape.plane();
        let start = (b * self.shape.c + ch) * p;
        &self.data[start..start + p]
    }

    pub fn reshape(self, shape: Shape) -> Result<Self> {
        Self::from_shape_vec(shape, self.data)
    }

    /// The `k x k` neighbourhood centred at `center`, zero outside the map.
    pub fn read_window(&self, b: usize, ch: usize, center: (usize, usize), k: usize) -> Result<Window<T>> {
        if k.is_multiple_of(2) {
            return Err(Error::InvalidKernelSize(k));
        }
        let s = self.shape;
        if b >= s.n || ch >= s.c || center.0 >= s.h || center.1 >= s.w {
            return Err(Error::shape(format!(
                "window index ({b}, {ch}, {}, {}) out of range for {s}",
                center.0, center.1
            )));
        }
        let r = (k / 2) as isize;
        let mut values = Vec::with_capacity(k * k);
        for dn in -r..=r {
            for dm in -r..=r {
                let i = center.0 as isize + dn;
                let j = center.1 as isize + dm;
                let v = if i >= 0 && j >= 0 && (i as usize) < s.h && (j as usize) < s.w {
                    self.get(b, ch, i as usize, j as usize)
                } else {
                    T::zero()
                };
                values.push(v);
            }
        }
        Ok(Window {
            center,
            radius: k / 2,
            values,
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_same_shape(other)?;
        Ok(Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn elementwise(&self, other: &Self, op: BinaryOp) -> Result<Self> {
        match op {
            BinaryOp::Add => self.zip_map(other, |a, b| a + b),
            BinaryOp::Sub => self.zip_map(other, |a, b| a - b),
            BinaryOp::Mul => self.zip_map(other, |a, b| a * b),
        }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.elementwise(other, BinaryOp::Add)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.elementwise(other, BinaryOp::Sub)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.elementwise(other, BinaryOp::Mul)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.expect_same_shape(other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn reduce_mean(&self) -> T {
        self.sum() / T::from_usize(self.len()).unwrap()
    }

    pub fn dot(&self, other: &Self) -> Result<T> {
        self.expect_same_shape(other)?;
        Ok(self.data.iter().zip(&other.data).map(|(&a, &b)| a * b).sum())
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        self.expect_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| U::of(v.as_f64())).collect(),
        }
    }

    pub fn expect_shape(&self, shape: Shape, what: &str) -> Result<()> {
        if self.shape != shape {
            return Err(Error::shape(format!(
                "{what}: expected {shape}, got {}",
                self.shape
            )));
        }
        Ok(())
    }

    fn expect_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!("{} vs {}", self.shape, other.shape)));
        }
        Ok(())
    }
}

/// A `k x k` patch read around a source location.
#[derive(Debug, Clone, PartialEq)]
pub struct Window<T> {
    pub center: (usize, usize),
    pub radius: usize,
    /// Row-major, `k * k` values.
    pub values: Vec<T>,
}

impl<T: Copy> Window<T> {
    pub fn size(&self) -> usize {
        2 * self.radius + 1
    }

    /// Value at offset `(dn, dm)` from the centre, each in `[-r, r]`.
    pub fn at(&self, dn: isize, dm: isize) -> T {
        let k = self.size() as isize;
        let r = self.radius as isize;
        self.values[((dn + r) * k + (dm + r)) as usize]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn new_fills() {
        let t = Tensor::<f64>::new([1, 1, 2, 2], 0.0).unwrap();
        assert_eq!(t.data(), &[0.0; 4]);
        let t = Tensor::<f64>::new([2, 3, 4, 5], 1.5).unwrap();
        assert_eq!(t.len(), 120);
        assert!(t.data().iter().all(|&v| v == 1.5));
    }

    #[test]
    fn zero_dimension_rejected() {
        assert!(matches!(
            Tensor::<f64>::new([1, 1, 1, 0], 0.0),
            Err(Error::InvalidShape(_))
        ));
    }

    #[test]
    fn from_vec_length_checked() {
        assert!(Tensor::<f32>::from_vec([1, 1, 2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn window_interior_and_corner() {
        let t = Tensor::<f64>::new([1, 1, 3, 3], 1.0).unwrap();
        let w = t.read_window(0, 0, (1, 1), 3).unwrap();
        assert_eq!(w.values, vec![1.0; 9]);

        let w = t.read_window(0, 0, (0, 0), 3).unwrap();
        assert_eq!(
            w.values,
            vec![0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0]
        );
        assert_eq!(w.values.iter().sum::<f64>(), 4.0);
    }

    #[test]
    fn window_padding_dominates() {
        let t = Tensor::<f64>::new([1, 1, 1, 1], 7.0).unwrap();
        let w = t.read_window(0, 0, (0, 0), 5).unwrap();
        assert_eq!(w.values.len(), 25);
        assert_eq!(w.at(0, 0), 7.0);
        assert_eq!(w.values.iter().filter(|&&v| v == 0.0).count(), 24);
    }

    #[test]
    fn window_even_k_rejected() {
        let t = Tensor::<f64>::new([1, 1, 3, 3], 1.0).unwrap();
        assert!(matches!(
            t.read_window(0, 0, (1, 1), 4),
            Err(Error::InvalidKernelSize(4))
        ));
    }

    #[test]
    fn arithmetic() {
        let a = Tensor::<f64>::from_vec([1, 1, 1, 2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::<f64>::from_vec([1, 1, 1, 2], vec![3.0, 4.0]).unwrap();
        assert_eq!(a.add(&b).unwrap().data(), &[4.0, 6.0]);
        assert_eq!(b.sub(&a).unwrap().data(), &[2.0, 2.0]);
        assert_eq!(a.mul(&b).unwrap().data(), &[3.0, 8.0]);
        assert_eq!(a.scale(0.0).data(), &[0.0, 0.0]);
        let c = Tensor::<f64>::new([2, 2, 3, 3], 2.5).unwrap();
        assert_eq!(c.reduce_mean(), 2.5);

        let d = Tensor::<f64>::new([1, 1, 2, 1], 0.0).unwrap();
        assert!(matches!(a.add(&d), Err(Error::Shape(_))));
    }

    fn shape_strategy() -> impl Strategy<Value = Shape> {
        (1usize..4, 1usize..4, 1usize..7, 1usize..7).prop_map(|(n, c, h, w)| Shape { n, c, h, w })
    }

    proptest! {
        #[test]
        fn set_get_round_trip(shape in shape_strategy(), seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut t = Tensor::<f64>::zeros(shape);
            let vals = Tensor::<f64>::random_uniform(shape, -1.0, 1.0, &mut rng);
            for b in 0..shape.n { for ch in 0..shape.c { for i in 0..shape.h { for j in 0..shape.w {
                t.set(b, ch, i, j, vals.get(b, ch, i, j));
            }}}}
            for b in 0..shape.n { for ch in 0..shape.c { for i in 0..shape.h { for j in 0..shape.w {
                prop_assert_eq!(t.get(b, ch, i, j), vals.data()[((b * shape.c + ch) * shape.h + i) * shape.w + j]);
            }}}}
        }

        #[test]
        fn window_matches_indexing(shape in shape_strategy(), k in prop::sample::select(vec![1usize, 3, 5, 7]), seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = Tensor::<f64>::random_uniform(shape, 0.5, 1.0, &mut rng);
            let r = (k / 2) as isize;
            for i in 0..shape.h { for j in 0..shape.w {
                let w = t.read_window(shape.n - 1, shape.c - 1, (i, j), k).unwrap();
                if k == 1 {
                    prop_assert_eq!(w.values.clone(), vec![t.get(shape.n - 1, shape.c - 1, i, j)]);
                }
                for dn in -r..=r { for dm in -r..=r {
                    let (y, x) = (i as isize + dn, j as isize + dm);
                    let inside = y >= 0 && x >= 0 && (y as usize) < shape.h && (x as usize) < shape.w;
                    let expect = if inside { t.get(shape.n - 1, shape.c - 1, y as usize, x as usize) } else { 0.0 };
                    prop_assert_eq!(w.at(dn, dm), expect);
                }}
            }}
        }
    }
}
