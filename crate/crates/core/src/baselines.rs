//! Rule-based and learned resamplers sharing the operator's shape contract:
//! downsamplers produce `ceil(h / sigma)`, upsamplers `sigma * h`.

use rand::Rng;

use crate::carafe::Direction;
use crate::error::{Error, Result};
use crate::nn::{
    conv2d_backward, conv2d_forward, transposed_conv_backward, transposed_conv_forward, ConvLayerParams,
    ParamView, Trainable,
};
use crate::tensor::{Scalar, Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResampleKind {
    NearestUp,
    BilinearUp,
    MaxPool,
    AvgPool,
    StridedConv,
    TransposedConv,
    NearestPlusConv,
    BilinearPlusConv,
    SpatialAttention(Direction),
}

impl ResampleKind {
    pub const ALL: [ResampleKind; 10] = [
        ResampleKind::NearestUp,
        ResampleKind::BilinearUp,
        ResampleKind::MaxPool,
        ResampleKind::AvgPool,
        ResampleKind::StridedConv,
        ResampleKind::TransposedConv,
        ResampleKind::NearestPlusConv,
        ResampleKind::BilinearPlusConv,
        ResampleKind::SpatialAttention(Direction::Down),
        ResampleKind::SpatialAttention(Direction::Up),
    ];

    pub fn direction(self) -> Direction {
        match self {
            ResampleKind::NearestUp
            | ResampleKind::BilinearUp
            | ResampleKind::TransposedConv
            | ResampleKind::NearestPlusConv
            | ResampleKind::BilinearPlusConv => Direction::Up,
            ResampleKind::MaxPool | ResampleKind::AvgPool | ResampleKind::StridedConv => Direction::Down,
            ResampleKind::SpatialAttention(d) => d,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ResampleKind::NearestUp => "nearest_up",
            ResampleKind::BilinearUp => "bilinear_up",
            ResampleKind::MaxPool => "max_pool",
            ResampleKind::AvgPool => "avg_pool",
            ResampleKind::StridedConv => "strided_conv",
            ResampleKind::TransposedConv => "transposed_conv",
            ResampleKind::NearestPlusConv => "nearest_plus_conv",
            ResampleKind::BilinearPlusConv => "bilinear_plus_conv",
            ResampleKind::SpatialAttention(Direction::Down) => "spatial_attention_down",
            ResampleKind::SpatialAttention(Direction::Up) => "spatial_attention_up",
        }
    }

    pub fn is_learned(self) -> bool {
        !matches!(
            self,
            ResampleKind::NearestUp | ResampleKind::BilinearUp | ResampleKind::MaxPool | ResampleKind::AvgPool
        )
    }
}

impl std::fmt::Display for ResampleKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ResampleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ResampleKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown resampler '{s}'")))
    }
}

/// Kernel size and padding of the transposed-convolution upsampler: exactly
/// `sigma` times the input. `(2 sigma, sigma / 2)` for even ratios,
/// `(2 sigma - 1, (sigma - 1) / 2)` for odd ones.
pub fn deconv_geometry(sigma: usize) -> (usize, usize) {
    if sigma.is_multiple_of(2) {
        (2 * sigma, sigma / 2)
    } else {
        (2 * sigma - 1, (sigma - 1) / 2)
    }
}

/// Leading offset of a pooling window: odd ratios centre the window on the
/// source location `sigma * i'`, even ratios start there.
fn pool_offset(sigma: usize) -> usize {
    if sigma % 2 == 1 {
        (sigma - 1) / 2
    } else {
        0
    }
}

fn check_sigma(sigma: usize) -> Result<()> {
    if sigma == 0 {
        return Err(Error::Config("sigma must be a positive integer".into()));
    }
    Ok(())
}

fn up_shape(s: Shape, sigma: usize) -> Result<Shape> {
    Shape::new(s.n, s.c, s.h * sigma, s.w * sigma)
}

fn down_shape(s: Shape, sigma: usize) -> Result<Shape> {
    Shape::new(s.n, s.c, s.h.div_ceil(sigma), s.w.div_ceil(sigma))
}

pub fn nearest_up<T: Scalar>(x: &Tensor<T>, sigma: usize) -> Result<Tensor<T>> {
    check_sigma(sigma)?;
    let os = up_shape(x.shape(), sigma)?;
    Ok(Tensor::from_fn(os, |b, c, i, j| x.get(b, c, i / sigma, j / sigma)))
}

/// Adjoint of [`nearest_up`]: sums each `sigma x sigma` block.
pub fn nearest_up_backward<T: Scalar>(grad_y: &Tensor<T>, sigma: usize) -> Result<Tensor<T>> {
    check_sigma(sigma)?;
    let gs = grad_y.shape();
    if !gs.h.is_multiple_of(sigma) || !gs.w.is_multiple_of(sigma) {
        return Err(Error::shape(format!("{gs} is not a {sigma}x upsampled shape")));
    }
    let xs = Shape::new(gs.n, gs.c, gs.h / sigma, gs.w / sigma)?;
    Ok(Tensor::from_fn(xs, |b, c, i, j| {
        let mut acc = T::zero();
        for di in 0..sigma {
            for dj in 0..sigma {
                acc = acc + grad_y.get(b, c, i * sigma + di, j * sigma + dj);
            }
        }
        acc
    }))
}

/// Keeps every `sigma`-th row and column, starting at 0.
pub fn decimate<T: Scalar>(x: &Tensor<T>, sigma: usize) -> Result<Tensor<T>> {
    check_sigma(sigma)?;
    let os = down_shape(x.shape(), sigma)?;
    Ok(Tensor::from_fn(os, |b, c, i, j| x.get(b, c, i * sigma, j * sigma)))
}

pub fn decimate_backward<T: Scalar>(grad_y: &Tensor<T>, input: Shape, sigma: usize) -> Result<Tensor<T>> {
    check_sigma(sigma)?;
    grad_y.expect_shape(down_shape(input, sigma)?, "decimation gradient")?;
    let mut gx = Tensor::zeros(input);
    let gs = grad_y.shape();
    for b in 0..gs.n {
        for c in 0..gs.c {
            for i in 0..gs.h {
                for j in 0..gs.w {
                    gx.set(b, c, i * sigma, j * sigma, grad_y.get(b, c, i, j));
                }
            }
        }
    }
    Ok(gx)
}

/// Half-pixel-centre interpolation table for one axis: `(i0, i1, w0, w1)`.
fn bilinear_axis(out_len: usize, in_len: usize, sigma: usize) -> Vec<(usize, usize, f64, f64)> {
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) / sigma as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            let l1 = src - i0 as f64;
            (i0, i1, 1.0 - l1, l1)
        })
        .collect()
}

/// Bilinear upsampling with half-pixel centres (align-corners off) and edge clamping.
pub fn bilinear_up<T: Scalar>(x: &Tensor<T>, sigma: usize) -> Result<Tensor<T>> {
    check_sigma(sigma)?;
    let xs = x.shape();
    let os = up_shape(xs, sigma)?;
    let rows = bilinear_axis(os.h, xs.h, sigma);
    let cols = bilinear_axis(os.w, xs.w, sigma);
    Ok(Tensor::from_fn(os, |b, c, i, j| {
        let (y0, y1, wy0, wy1) = rows[i];
        let (x0, x1, wx0, wx1) = cols[j];
        let (wy0, wy1, wx0, wx1) = (T::of(wy0), T::of(wy1), T::of(wx0), T::of(wx1));
        wy0 * (wx0 * x.get(b, c, y0, x0) + wx1 * x.get(b, c, y0, x1))
            + wy1 * (wx0 * x.get(b, c, y1, x0) + wx1 * x.get(b, c, y1, x1))
    }))
}

pub fn bilinear_up_backward<T: Scalar>(grad_y: &Tensor<T>, input: Shape, sigma: usize) -> Result<Tensor<T>> {
    check_sigma(sigma)?;
    let os = up_shape(input, sigma)?;
    grad_y.expect_shape(os, "bilinear gradient")?;
    let rows = bilinear_axis(os.h, input.h, sigma);
    let cols = bilinear_axis(os.w, input.w, sigma);
    let mut gx = Tensor::zeros(input);
    for b in 0..os.n {
        for c in 0..os.c {
            for (i, &(y0, y1, wy0, wy1)) in rows.iter().enumerate() {
                for (j, &(x0, x1, wx0, wx1)) in cols.iter().enumerate() {
                    let g = grad_y.get(b, c, i, j);
                    for (y, wy) in [(y0, wy0), (y1, wy1)] {
                        for (xx, wx) in [(x0, wx0), (x1, wx1)] {
                            let o = input.offset(b, c, y, xx);
                            let d = gx.data_mut();
                            d[o] = d[o] + T::of(wy * wx) * g;
                        }
                    }
                }
            }
        }
    }
    Ok(gx)
}

/// Rows (or cols) covered by pooling window `o`, clipped to the input.
fn pool_range(o: usize, sigma: usize, len: usize) -> (usize, usize) {
    let start = (o * sigma).saturating_sub(pool_offset(sigma));
    let end = (o * sigma + sigma - pool_offset(sigma)).min(len);
    (start, end)
}

/// Mean over the in-bounds part of each `sigma x sigma` window.
pub fn avg_pool<T: Scalar>(x: &Tensor<T>, sigma: usize) -> Result<Tensor<T>> {
    check_sigma(sigma)?;
    let xs = x.shape();
    let os = down_shape(xs, sigma)?;
    Ok(Tensor::from_fn(os, |b, c, i, j| {
        let (r0, r1) = pool_range(i, sigma, xs.h);
        let (c0, c1) = pool_range(j, sigma, xs.w);
        let mut acc = T::zero();
        for y in r0..r1 {
            for xx in c0..c1 {
                acc = acc + x.get(b, c, y, xx);
            }
        }
        acc / T::from_usize((r1 - r0) * (c1 - c0)).unwrap()
    }))
}

pub fn avg_pool_backward<T: Scalar>(grad_y: &Tensor<T>, input: Shape, sigma: usize) -> Result<Tensor<T>> {
    check_sigma(sigma)?;
    let os = down_shape(input, sigma)?;
    grad_y.expect_shape(os, "average pooling gradient")?;
    let mut gx = Tensor::zeros(input);
    for b in 0..os.n {
        for c in 0..os.c {
            for i in 0..os.h {
                for j in 0..os.w {
                    let (r0, r1) = pool_range(i, sigma, input.h);
                    let (c0, c1) = pool_range(j, sigma, input.w);
                    let g = grad_y.get(b, c, i, j) / T::from_usize((r1 - r0) * (c1 - c0)).unwrap();
                    for y in r0..r1 {
                        for xx in c0..c1 {
                            let v = gx.get(b, c, y, xx);
                            gx.set(b, c, y, xx, v + g);
                        }
                    }
                }
            }
        }
    }
    Ok(gx)
}

/// Max over each window; also returns the flat input offset of each winner
/// (first maximum in row-major order).
pub fn max_pool<T: Scalar>(x: &Tensor<T>, sigma: usize) -> Result<(Tensor<T>, Vec<usize>)> {
    check_sigma(sigma)?;
    let xs = x.shape();
    let os = down_shape(xs, sigma)?;
    let mut arg = Vec::with_capacity(os.len());
    let y = Tensor::from_fn(os, |b, c, i, j| {
        let (r0, r1) = pool_range(i, sigma, xs.h);
        let (c0, c1) = pool_range(j, sigma, xs.w);
        let mut best = (T::neg_infinity(), 0);
        for yy in r0..r1 {
            for xx in c0..c1 {
                let v = x.get(b, c, yy, xx);
                if v > best.0 {
                    best = (v, xs.offset(b, c, yy, xx));
                }
            }
        }
        arg.push(best.1);
        best.0
    });
    Ok((y, arg))
}

pub fn max_pool_backward<T: Scalar>(grad_y: &Tensor<T>, argmax: &[usize], input: Shape) -> Result<Tensor<T>> {
    if argmax.len() != grad_y.len() {
        return Err(Error::shape("argmax table does not match the gradient"));
    }
    let mut gx = Tensor::zeros(input);
    let d = gx.data_mut();
    for (&o, &g) in argmax.iter().zip(grad_y.data()) {
        d[o] = d[o] + g;
    }
    Ok(gx)
}

fn sigmoid<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

#[derive(Debug, Clone)]
enum Cache<T: Scalar> {
    Input(Tensor<T>),
    MaxPool { input: Shape, argmax: Vec<usize> },
    /// Input and the pre-convolution upsampled map.
    UpConv { input: Shape, upsampled: Tensor<T> },
    Attention { x: Tensor<T>, gate: Tensor<T> },
}

/// One baseline resampler with its parameters (for learned kinds).
#[derive(Debug, Clone)]
pub struct ResampleOp<T: Scalar = f64> {
    pub kind: ResampleKind,
    pub sigma: usize,
    pub params: Option<ConvLayerParams<T>>,
    cache: Option<Cache<T>>,
}

impl<T: Scalar> ResampleOp<T> {
    /// Learned kinds get `channels -> channels` convolutions (one output
    /// channel for the attention gate), fan-in uniform initialized.
    pub fn new<R: Rng + ?Sized>(kind: ResampleKind, sigma: usize, channels: usize, rng: &mut R) -> Result<Self> {
        check_sigma(sigma)?;
        let params = match kind {
            ResampleKind::NearestUp | ResampleKind::BilinearUp | ResampleKind::MaxPool | ResampleKind::AvgPool => None,
            ResampleKind::StridedConv | ResampleKind::NearestPlusConv | ResampleKind::BilinearPlusConv => {
                Some(ConvLayerParams::init_uniform(channels, channels, 3, rng)?)
            }
            ResampleKind::TransposedConv => {
                let (k, _) = deconv_geometry(sigma);
                Some(ConvLayerParams::init_transposed(channels, channels, k, rng)?)
            }
            ResampleKind::SpatialAttention(_) => Some(ConvLayerParams::init_uniform(1, channels, 1, rng)?),
        };
        Ok(ResampleOp {
            kind,
            sigma,
            params,
            cache: None,
        })
    }

    pub fn direction(&self) -> Direction {
        self.kind.direction()
    }

    fn params_ref(&self) -> Result<&ConvLayerParams<T>> {
        self.params
            .as_ref()
            .ok_or_else(|| Error::Contract(format!("{} needs convolution parameters", self.kind)))
    }

    fn run(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Cache<T>)> {
        let s = self.sigma;
        Ok(match self.kind {
            ResampleKind::NearestUp => (nearest_up(x, s)?, Cache::Input(x.clone())),
            ResampleKind::BilinearUp => (bilinear_up(x, s)?, Cache::Input(x.clone())),
            ResampleKind::AvgPool => (avg_pool(x, s)?, Cache::Input(x.clone())),
            ResampleKind::MaxPool => {
                let (y, argmax) = max_pool(x, s)?;
                (y, Cache::MaxPool { input: x.shape(), argmax })
            }
            ResampleKind::StridedConv => (conv2d_forward(x, self.params_ref()?, s, 1)?, Cache::Input(x.clone())),
            ResampleKind::TransposedConv => {
                let (_, pad) = deconv_geometry(s);
                (
                    transposed_conv_forward(x, self.params_ref()?, s, pad)?,
                    Cache::Input(x.clone()),
                )
            }
            ResampleKind::NearestPlusConv | ResampleKind::BilinearPlusConv => {
                let up = if self.kind == ResampleKind::NearestPlusConv {
                    nearest_up(x, s)?
                } else {
                    bilinear_up(x, s)?
                };
                let y = conv2d_forward(&up, self.params_ref()?, 1, 1)?;
                (y, Cache::UpConv { input: x.shape(), upsampled: up })
            }
            ResampleKind::SpatialAttention(dir) => {
                let gate = conv2d_forward(x, self.params_ref()?, 1, 0)?.map(sigmoid);
                let xs = x.shape();
                let gated = Tensor::from_fn(xs, |b, c, i, j| x.get(b, c, i, j) * gate.get(b, 0, i, j));
                let y = match dir {
                    Direction::Down => decimate(&gated, s)?,
                    Direction::Up => nearest_up(&gated, s)?,
                };
                (y, Cache::Attention { x: x.clone(), gate })
            }
        })
    }

    /// Forward pass; keeps what the backward pass needs.
    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (y, cache) = self.run(x)?;
        self.cache = Some(cache);
        Ok(y)
    }

    /// Input gradient for the last forward call; learned kinds accumulate
    /// parameter gradients.
    pub fn backward(&mut self, grad_y: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::Contract("backward called before forward".into()))?;
        let s = self.sigma;
        match (self.kind, cache) {
            (ResampleKind::NearestUp, Cache::Input(x)) => {
                grad_y.expect_shape(up_shape(x.shape(), s)?, "nearest gradient")?;
                nearest_up_backward(grad_y, s)
            }
            (ResampleKind::BilinearUp, Cache::Input(x)) => bilinear_up_backward(grad_y, x.shape(), s),
            (ResampleKind::AvgPool, Cache::Input(x)) => avg_pool_backward(grad_y, x.shape(), s),
            (ResampleKind::MaxPool, Cache::MaxPool { input, argmax }) => {
                grad_y.expect_shape(down_shape(*input, s)?, "max pooling gradient")?;
                max_pool_backward(grad_y, argmax, *input)
            }
            (ResampleKind::StridedConv, Cache::Input(x)) => {
                let p = self.params.as_mut().expect("learned kind has params");
                conv2d_backward(grad_y, x, p, s, 1)
            }
            (ResampleKind::TransposedConv, Cache::Input(x)) => {
                let p = self.params.as_mut().expect("learned kind has params");
                transposed_conv_backward(grad_y, x, p, s, deconv_geometry(s).1)
            }
            (ResampleKind::NearestPlusConv, Cache::UpConv { upsampled, .. }) => {
                let p = self.params.as_mut().expect("learned kind has params");
                let g = conv2d_backward(grad_y, upsampled, p, 1, 1)?;
                nearest_up_backward(&g, s)
            }
            (ResampleKind::BilinearPlusConv, Cache::UpConv { input, upsampled }) => {
                let p = self.params.as_mut().expect("learned kind has params");
                let g = conv2d_backward(grad_y, upsampled, p, 1, 1)?;
                bilinear_up_backward(&g, *input, s)
            }
            (ResampleKind::SpatialAttention(dir), Cache::Attention { x, gate }) => {
                let xs = x.shape();
                let g_gated = match dir {
                    Direction::Down => decimate_backward(grad_y, xs, s)?,
                    Direction::Up => {
                        grad_y.expect_shape(up_shape(xs, s)?, "attention gradient")?;
                        nearest_up_backward(grad_y, s)?
                    }
                };
                let mut gx = Tensor::from_fn(xs, |b, c, i, j| g_gated.get(b, c, i, j) * gate.get(b, 0, i, j));
                let g_logit = Tensor::from_fn(gate.shape(), |b, _, i, j| {
                    let gv = gate.get(b, 0, i, j);
                    let dot: T = (0..xs.c).map(|c| g_gated.get(b, c, i, j) * x.get(b, c, i, j)).sum();
                    dot * gv * (T::one() - gv)
                });
                let p = self.params.as_mut().expect("learned kind has params");
                gx.add_assign(&conv2d_backward(&g_logit, x, p, 1, 0)?)?;
                Ok(gx)
            }
            _ => Err(Error::Contract("cache does not belong to this resampler".into())),
        }
    }
}

impl<T: Scalar> Trainable<T> for ResampleOp<T> {
    fn visit_params(&mut self, f: &mut dyn FnMut(ParamView<'_, T>)) {
        if let Some(p) = &mut self.params {
            p.visit_params(f);
        }
    }
}

/// Stateless forward of `op` on `x`.
pub fn resample_forward<T: Scalar>(op: &ResampleOp<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(op.run(x)?.0)
}
