//! Content-aware feature reassembly.
//!
//! Every target location `l' = (i', j')` maps to a source location `l`. A
//! kernel prediction stage turns the source content into one `k x k` kernel
//! per target location; the reassembly stage then takes a kernel-weighted sum
//! over the `k x k` source neighbourhood of `l`, sharing the kernel across
//! all channels.
//!
//! Kernel prediction is
//! `compressor (1x1 conv) -> [affine norm + ReLU] -> encoder conv -> [pixel shuffle] -> normalizer`.
//! For downsampling the encoder runs with stride `sigma`; for upsampling it
//! emits `sigma^2 * k^2` channels that are shuffled into space.
//!
//! Borders are zero-padded: taps that fall outside the input contribute 0.
//! Kernel taps are flattened row-major, channel `t = (n + r) * k + (m + r)`
//! holds offset `(n, m)`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{
    affine_norm_backward, affine_norm_forward, conv2d_backward, conv2d_forward, for_each_chunk,
    pixel_shuffle, pixel_unshuffle, relu, relu_backward, sigmoid_group, sigmoid_group_backward,
    sigmoid_norm_group, sigmoid_norm_group_backward, softmax_group, softmax_group_backward,
    AffineNormCache, AffineNormParams, ConvLayerParams, ExecPath, ParamView, Trainable,
};
use crate::tensor::{Scalar, Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Down,
    Up,
}

impl std::fmt::Display for Direction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Direction::Down => "down",
            Direction::Up => "up",
        })
    }
}

impl std::str::FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "down" => Ok(Direction::Down),
            "up" => Ok(Direction::Up),
            _ => Err(Error::Config(format!("unknown direction '{s}' (expected down|up)"))),
        }
    }
}

/// How raw kernel logits are turned into reassembly weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalizer {
    #[default]
    Softmax,
    Sigmoid,
    SigmoidNormalized,
}

impl Normalizer {
    pub const ALL: [Normalizer; 3] = [
        Normalizer::Softmax,
        Normalizer::Sigmoid,
        Normalizer::SigmoidNormalized,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Normalizer::Softmax => "softmax",
            Normalizer::Sigmoid => "sigmoid",
            Normalizer::SigmoidNormalized => "sigmoid_normalized",
        }
    }

    /// Whether every kernel produced by this normalizer sums to one.
    pub fn sums_to_one(self) -> bool {
        !matches!(self, Normalizer::Sigmoid)
    }
}

impl std::str::FromStr for Normalizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Normalizer::ALL
            .into_iter()
            .find(|n| n.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown normalizer '{s}' (expected softmax|sigmoid|sigmoid_normalized)"
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct CarafeConfig {
    pub direction: Direction,
    pub sigma: usize,
    pub k_encoder: usize,
    pub k_reassembly: usize,
    pub c_mid: usize,
    pub normalizer: Normalizer,
    /// Affine norm + ReLU after the channel compressor.
    pub compressor_norm: bool,
}

pub const DEFAULT_K_ENCODER: usize = 3;
pub const DEFAULT_K_REASSEMBLY: usize = 5;
pub const DEFAULT_C_MID_DOWN: usize = 16;
pub const DEFAULT_C_MID_UP: usize = 64;

impl CarafeConfig {
    pub fn new(direction: Direction, sigma: usize) -> Self {
        match direction {
            Direction::Down => Self::down(sigma),
            Direction::Up => Self::up(sigma),
        }
    }

    pub fn down(sigma: usize) -> Self {
        CarafeConfig {
            direction: Direction::Down,
            sigma,
            k_encoder: DEFAULT_K_ENCODER,
            k_reassembly: DEFAULT_K_REASSEMBLY,
            c_mid: DEFAULT_C_MID_DOWN,
            normalizer: Normalizer::Softmax,
            compressor_norm: true,
        }
    }

    pub fn up(sigma: usize) -> Self {
        CarafeConfig {
            direction: Direction::Up,
            sigma,
            k_encoder: DEFAULT_K_ENCODER,
            k_reassembly: DEFAULT_K_REASSEMBLY,
            c_mid: DEFAULT_C_MID_UP,
            normalizer: Normalizer::Softmax,
            compressor_norm: false,
        }
    }

    pub fn with_kernels(mut self, k_encoder: usize, k_reassembly: usize) -> Self {
        self.k_encoder = k_encoder;
        self.k_reassembly = k_reassembly;
        self
    }

    pub fn with_c_mid(mut self, c_mid: usize) -> Self {
        self.c_mid = c_mid;
        self
    }

    pub fn with_normalizer(mut self, normalizer: Normalizer) -> Self {
        self.normalizer = normalizer;
        self
    }

    pub fn with_compressor_norm(mut self, on: bool) -> Self {
        self.compressor_norm = on;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.sigma == 0 {
            return Err(Error::Config("sigma must be a positive integer".into()));
        }
        for (name, k) in [("k_encoder", self.k_encoder), ("k_reassembly", self.k_reassembly)] {
            if k == 0 || k % 2 == 0 {
                return Err(Error::Config(format!("{name} = {k} must be odd and >= 1")));
            }
        }
        if self.c_mid == 0 {
            return Err(Error::Config("c_mid must be >= 1".into()));
        }
        Ok(())
    }

    /// Channels of the kernel field, `k_reassembly^2`.
    pub fn kernel_channels(&self) -> usize {
        self.k_reassembly * self.k_reassembly
    }

    /// Output channels of the content encoder.
    pub fn encoder_channels(&self) -> usize {
        match self.direction {
            Direction::Down => self.kernel_channels(),
            Direction::Up => self.sigma * self.sigma * self.kernel_channels(),
        }
    }

    pub fn radius(&self) -> usize {
        self.k_reassembly / 2
    }

    /// `ceil(h / sigma)` for downsampling, `sigma * h` for upsampling.
    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        match self.direction {
            Direction::Down => (h.div_ceil(self.sigma), w.div_ceil(self.sigma)),
            Direction::Up => (h * self.sigma, w * self.sigma),
        }
    }

    pub fn output_shape(&self, x: Shape) -> Result<Shape> {
        let (h, w) = self.output_size(x.h, x.w);
        Shape::new(x.n, x.c, h, w)
    }

    fn encoder_stride(&self) -> usize {
        match self.direction {
            Direction::Down => self.sigma,
            Direction::Up => 1,
        }
    }

    /// True on the `k_encoder = k_reassembly - 2` diagonal.
    pub fn on_encoder_diagonal(&self) -> bool {
        self.k_encoder + 2 == self.k_reassembly
    }
}

/// Source location for target location `l_prime`.
#[inline]
pub fn map_target_to_source(l_prime: (usize, usize), cfg: &CarafeConfig) -> (usize, usize) {
    let (i, j) = l_prime;
    match cfg.direction {
        Direction::Down => (cfg.sigma * i, cfg.sigma * j),
        Direction::Up => (i / cfg.sigma, j / cfg.sigma),
    }
}

/// Where a kernel field came from, which decides what reassembly accepts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelKind {
    /// Raw encoder output; not usable for reassembly.
    Logits,
    Normalized(Normalizer),
    /// Caller-provided weights, checked to be non-negative and sum to one.
    Fixed,
    /// Arbitrary weights, used when probing the kernel-path gradient.
    Unconstrained,
}

/// Per-target-location reassembly kernels, shaped `(n, k^2, h_out, w_out)`.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelField<T: Scalar = f64> {
    kernels: Tensor<T>,
    k: usize,
    kind: KernelKind,
}

impl<T: Scalar> KernelField<T> {
    pub fn from_logits(logits: Tensor<T>, k: usize) -> Result<Self> {
        Self::checked(logits, k, KernelKind::Logits)
    }

    /// Applies `normalizer` to each `k^2` channel group of `logits`.
    pub fn normalize(logits: &Tensor<T>, k: usize, normalizer: Normalizer) -> Result<Self> {
        let g = k * k;
        let kernels = match normalizer {
            Normalizer::Softmax => softmax_group(logits, g)?,
            Normalizer::Sigmoid => sigmoid_group(logits, g)?,
            Normalizer::SigmoidNormalized => sigmoid_norm_group(logits, g)?,
        };
        Self::checked(kernels, k, KernelKind::Normalized(normalizer))
    }

    /// Wraps explicit weights after checking each kernel is a convex combination.
    pub fn from_weights(kernels: Tensor<T>, k: usize) -> Result<Self> {
        let field = Self::checked(kernels, k, KernelKind::Fixed)?;
        let tol = match T::DTYPE {
            crate::tensor::DType::F32 => 1e-5,
            crate::tensor::DType::F64 => 1e-10,
        };
        if field.kernels.data().iter().any(|&v| v < T::zero()) {
            return Err(Error::Contract("kernel weights must be non-negative".into()));
        }
        let worst = field.max_sum_error();
        if worst > tol {
            return Err(Error::Contract(format!(
                "kernel weights must sum to 1 (worst deviation {worst:e})"
            )));
        }
        Ok(field)
    }

    /// Wraps arbitrary weights without any sign or sum check.
    pub fn unconstrained(kernels: Tensor<T>, k: usize) -> Result<Self> {
        Self::checked(kernels, k, KernelKind::Unconstrained)
    }

    fn checked(kernels: Tensor<T>, k: usize, kind: KernelKind) -> Result<Self> {
        if k.is_multiple_of(2) {
            return Err(Error::InvalidKernelSize(k));
        }
        if kernels.shape().c != k * k {
            return Err(Error::shape(format!(
                "kernel field has {} channels, expected k^2 = {}",
                kernels.shape().c,
                k * k
            )));
        }
        Ok(KernelField { kernels, k, kind })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn kind(&self) -> KernelKind {
        self.kind
    }

    /// True for normalized fields whose kernels sum to one, and fixed weights.
    pub fn is_normalized(&self) -> bool {
        match self.kind {
            KernelKind::Logits | KernelKind::Unconstrained => false,
            KernelKind::Normalized(n) => n.sums_to_one(),
            KernelKind::Fixed => true,
        }
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.kernels
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.kernels
    }

    pub fn shape(&self) -> Shape {
        self.kernels.shape()
    }

    /// Kernel of target `(b, i, j)`, row-major `k * k`.
    pub fn kernel_at(&self, b: usize, i: usize, j: usize) -> Vec<T> {
        (0..self.k * self.k).map(|t| self.kernels.get(b, t, i, j)).collect()
    }

    /// Largest `|sum - 1|` over all kernels, in f64.
    pub fn max_sum_error(&self) -> f64 {
        let s = self.kernels.shape();
        let mut worst = 0.0f64;
        for b in 0..s.n {
            for i in 0..s.h {
                for j in 0..s.w {
                    let sum: T = (0..s.c).map(|t| self.kernels.get(b, t, i, j)).sum();
                    worst = worst.max((sum.as_f64() - 1.0).abs());
                }
            }
        }
        worst
    }
}

/// Learnable parameters of the kernel prediction stage.
#[derive(Debug, Clone)]
pub struct CarafeParams<T: Scalar = f64> {
    pub compressor: ConvLayerParams<T>,
    pub norm: Option<AffineNormParams<T>>,
    pub encoder: ConvLayerParams<T>,
    version: u64,
}

impl<T: Scalar> CarafeParams<T> {
    /// Fan-in uniform init for both convolutions. The compressor carries no
    /// bias when followed by the affine norm, which would cancel it.
    pub fn init<R: Rng + ?Sized>(channels: usize, cfg: &CarafeConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut compressor = ConvLayerParams::init_uniform(cfg.c_mid, channels, 1, rng)?;
        if cfg.compressor_norm {
            compressor = compressor.without_bias();
        }
        let encoder = ConvLayerParams::init_uniform(cfg.encoder_channels(), cfg.c_mid, cfg.k_encoder, rng)?;
        Ok(CarafeParams {
            compressor,
            norm: cfg.compressor_norm.then(|| AffineNormParams::identity(cfg.c_mid)),
            encoder,
            version: 0,
        })
    }

    /// Sets encoder weights and bias to zero, which makes every kernel uniform
    /// under softmax.
    pub fn zero_encoder(&mut self) {
        self.encoder.weights.data_mut().iter_mut().for_each(|w| *w = T::zero());
        self.encoder.bias.iter_mut().for_each(|b| *b = T::zero());
        self.version += 1;
    }

    /// Bumped on every mutable parameter visit; caches record it.
    pub fn version(&self) -> u64 {
        self.version
    }

    fn check(&self, channels: usize, cfg: &CarafeConfig) -> Result<()> {
        let c = &self.compressor;
        if c.k() != 1 || c.c_in() != channels || c.c_out() != cfg.c_mid {
            return Err(Error::shape(format!(
                "compressor is {}x{} {}->{}, expected 1x1 {channels}->{}",
                c.k(),
                c.k(),
                c.c_in(),
                c.c_out(),
                cfg.c_mid
            )));
        }
        let e = &self.encoder;
        if e.k() != cfg.k_encoder || e.c_in() != cfg.c_mid || e.c_out() != cfg.encoder_channels() {
            return Err(Error::shape(format!(
                "encoder is {}x{} {}->{}, expected {}x{} {}->{}",
                e.k(),
                e.k(),
                e.c_in(),
                e.c_out(),
                cfg.k_encoder,
                cfg.k_encoder,
                cfg.c_mid,
                cfg.encoder_channels()
            )));
        }
        match (&self.norm, cfg.compressor_norm) {
            (Some(n), true) if n.channels() == cfg.c_mid => Ok(()),
            (Some(n), true) => Err(Error::shape(format!(
                "compressor norm has {} channels, expected {}",
                n.channels(),
                cfg.c_mid
            ))),
            (None, false) => Ok(()),
            (None, true) => Err(Error::Contract("config enables compressor norm but params have none".into())),
            (Some(_), false) => Err(Error::Contract("params carry a compressor norm the config disables".into())),
        }
    }
}

impl<T: Scalar> Trainable<T> for CarafeParams<T> {
    fn visit_params(&mut self, f: &mut dyn FnMut(ParamView<'_, T>)) {
        self.version += 1;
        visit_prefixed(&mut self.compressor, "compressor", f);
        if let Some(norm) = &mut self.norm {
            visit_prefixed(norm, "norm", f);
        }
        visit_prefixed(&mut self.encoder, "encoder", f);
    }

    fn zero_grad(&mut self) {
        let zero = |v: &mut [T]| v.iter_mut().for_each(|g| *g = T::zero());
        zero(self.compressor.grad_weights.data_mut());
        zero(&mut self.compressor.grad_bias);
        zero(self.encoder.grad_weights.data_mut());
        zero(&mut self.encoder.grad_bias);
        if let Some(n) = &mut self.norm {
            zero(&mut n.grad_gamma);
            zero(&mut n.grad_beta);
        }
    }
}

pub(crate) fn visit_prefixed<T: Scalar>(
    inner: &mut dyn Trainable<T>,
    prefix: &str,
    f: &mut dyn FnMut(ParamView<'_, T>),
) {
    inner.visit_params(&mut |mut p| {
        p.name = format!("{prefix}.{}", p.name);
        f(p)
    });
}

/// Intermediates of the kernel prediction stage.
#[derive(Debug, Clone)]
struct Prediction<T: Scalar> {
    norm: Option<(Tensor<T>, AffineNormCache<T>)>,
    hidden: Tensor<T>,
    logits: Tensor<T>,
    field: KernelField<T>,
}

fn predict<T: Scalar>(x: &Tensor<T>, params: &CarafeParams<T>, cfg: &CarafeConfig) -> Result<Prediction<T>> {
    cfg.validate()?;
    params.check(x.shape().c, cfg)?;
    let compressed = conv2d_forward(x, &params.compressor, 1, 0)?;
    let (hidden, norm) = match &params.norm {
        Some(np) => {
            let (normed, cache) = affine_norm_forward(&compressed, np)?;
            (relu(&normed), Some((normed, cache)))
        }
        None => (compressed.clone(), None),
    };
    let enc = conv2d_forward(&hidden, &params.encoder, cfg.encoder_stride(), cfg.k_encoder / 2)?;
    let logits = match cfg.direction {
        Direction::Down => enc,
        Direction::Up => pixel_shuffle(&enc, cfg.sigma)?,
    };
    let expected = cfg.output_size(x.shape().h, x.shape().w);
    if (logits.shape().h, logits.shape().w) != expected {
        return Err(Error::InvalidGeometry(format!(
            "encoder produced {}x{}, expected {}x{}",
            logits.shape().h,
            logits.shape().w,
            expected.0,
            expected.1
        )));
    }
    let field = KernelField::normalize(&logits, cfg.k_reassembly, cfg.normalizer)?;
    Ok(Prediction {
        norm,
        hidden,
        logits,
        field,
    })
}

/// Predicts normalized reassembly kernels from the content of `x`.
pub fn predict_kernels<T: Scalar>(x: &Tensor<T>, params: &CarafeParams<T>, cfg: &CarafeConfig) -> Result<KernelField<T>> {
    Ok(predict(x, params, cfg)?.field)
}

fn check_field<T: Scalar>(x: &Tensor<T>, kf: &KernelField<T>, cfg: &CarafeConfig) -> Result<Shape> {
    cfg.validate()?;
    if kf.k() != cfg.k_reassembly {
        return Err(Error::shape(format!(
            "kernel field has k = {}, config has k_reassembly = {}",
            kf.k(),
            cfg.k_reassembly
        )));
    }
    let out = cfg.output_shape(x.shape())?;
    let ks = kf.shape();
    if ks.n != out.n || ks.h != out.h || ks.w != out.w {
        return Err(Error::shape(format!(
            "kernel field {ks} does not cover output {out}"
        )));
    }
    Ok(out)
}

/// Offsets of one target location's taps into a source plane, `None` where
/// the tap is in the zero padding.
struct Taps {
    k: usize,
    r: usize,
    h: usize,
    w: usize,
}

impl Taps {
    #[inline]
    fn row(&self, i: usize, dn: usize) -> Option<usize> {
        let y = i + dn;
        (y >= self.r && y - self.r < self.h).then(|| y - self.r)
    }

    #[inline]
    fn col(&self, j: usize, dm: usize) -> Option<usize> {
        let x = j + dm;
        (x >= self.r && x - self.r < self.w).then(|| x - self.r)
    }

    #[inline]
    fn interior(&self, i: usize, j: usize) -> bool {
        i >= self.r && j >= self.r && i + self.r < self.h && j + self.r < self.w
    }
}

/// Weighted sum of each source neighbourhood with its target's kernel.
///
/// Requires a field whose kernels sum to one, or one produced by the plain
/// sigmoid normalizer.
pub fn reassemble<T: Scalar>(x: &Tensor<T>, kf: &KernelField<T>, cfg: &CarafeConfig) -> Result<Tensor<T>> {
    reassemble_with(x, kf, cfg, ExecPath::default())
}

pub fn reassemble_with<T: Scalar>(
    x: &Tensor<T>,
    kf: &KernelField<T>,
    cfg: &CarafeConfig,
    path: ExecPath,
) -> Result<Tensor<T>> {
    if kf.kind() == KernelKind::Logits {
        return Err(Error::Contract(
            "reassembly needs normalized kernels, got raw logits".into(),
        ));
    }
    let os = check_field(x, kf, cfg)?;
    let mut out = Tensor::zeros(os);
    match path {
        ExecPath::Direct => reassemble_direct(x, kf, cfg, os, out.data_mut()),
        ExecPath::Blocked => reassemble_blocked(x, kf, cfg, os, out.data_mut()),
    }
    Ok(out)
}

fn reassemble_direct<T: Scalar>(x: &Tensor<T>, kf: &KernelField<T>, cfg: &CarafeConfig, os: Shape, out: &mut [T]) {
    let xs = x.shape();
    let k = cfg.k_reassembly;
    let k2 = k * k;
    let taps = Taps { k, r: cfg.radius(), h: xs.h, w: xs.w };
    let kd = kf.tensor().data();
    let plane = os.plane();
    for_each_chunk(out, plane, os.len() * k2, |idx, dst| {
        let (b, c) = (idx / os.c, idx % os.c);
        let xp = x.plane(b, c);
        for ip in 0..os.h {
            for jp in 0..os.w {
                let (i, j) = map_target_to_source((ip, jp), cfg);
                let loc = ip * os.w + jp;
                let mut acc = T::zero();
                for dn in 0..taps.k {
                    let Some(y) = taps.row(i, dn) else { continue };
                    for dm in 0..taps.k {
                        let Some(xx) = taps.col(j, dm) else { continue };
                        let wv = kd[(b * k2 + dn * k + dm) * plane + loc];
                        acc = acc + wv * xp[y * xs.w + xx];
                    }
                }
                dst[loc] = acc;
            }
        }
    });
}

// Kernels are first transposed to location-major order so each location's
// k^2 weights are contiguous, and interior locations skip bounds checks. The
// tap order matches `reassemble_direct`, so results are bit-identical.
fn reassemble_blocked<T: Scalar>(x: &Tensor<T>, kf: &KernelField<T>, cfg: &CarafeConfig, os: Shape, out: &mut [T]) {
    let xs = x.shape();
    let k = cfg.k_reassembly;
    let k2 = k * k;
    let r = cfg.radius();
    let taps = Taps { k, r, h: xs.h, w: xs.w };
    let plane = os.plane();
    let kd = kf.tensor().data();
    let mut local = vec![T::zero(); os.n * plane * k2];
    for b in 0..os.n {
        for t in 0..k2 {
            let src = &kd[(b * k2 + t) * plane..(b * k2 + t + 1) * plane];
            for (loc, &v) in src.iter().enumerate() {
                local[(b * plane + loc) * k2 + t] = v;
            }
        }
    }
    let sources: Vec<(usize, usize)> = (0..plane)
        .map(|loc| map_target_to_source((loc / os.w, loc % os.w), cfg))
        .collect();
    for_each_chunk(out, plane, os.len() * k2, |idx, dst| {
        let (b, c) = (idx / os.c, idx % os.c);
        let xp = x.plane(b, c);
        for (loc, &(i, j)) in sources.iter().enumerate() {
            let kern = &local[(b * plane + loc) * k2..(b * plane + loc + 1) * k2];
            let mut acc = T::zero();
            if taps.interior(i, j) {
                for dn in 0..k {
                    let row = &xp[(i + dn - r) * xs.w + j - r..];
                    let kr = &kern[dn * k..dn * k + k];
                    for dm in 0..k {
                        acc = acc + kr[dm] * row[dm];
                    }
                }
            } else {
                for dn in 0..k {
                    let Some(y) = taps.row(i, dn) else { continue };
                    for dm in 0..k {
                        let Some(xx) = taps.col(j, dm) else { continue };
                        acc = acc + kern[dn * k + dm] * xp[y * xs.w + xx];
                    }
                }
            }
            dst[loc] = acc;
        }
    });
}

/// Adjoint of [`reassemble`]: gradients with respect to the features and to
/// the kernel weights.
pub fn reassemble_backward<T: Scalar>(
    grad_y: &Tensor<T>,
    x: &Tensor<T>,
    kf: &KernelField<T>,
    cfg: &CarafeConfig,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let os = check_field(x, kf, cfg)?;
    grad_y.expect_shape(os, "reassembly output gradient")?;
    let xs = x.shape();
    let k = cfg.k_reassembly;
    let k2 = k * k;
    let taps = Taps { k, r: cfg.radius(), h: xs.h, w: xs.w };
    let plane = os.plane();
    let kd = kf.tensor().data();
    let work = os.len() * k2;

    let mut grad_x = Tensor::zeros(xs);
    for_each_chunk(grad_x.data_mut(), xs.plane(), work, |idx, dst| {
        let (b, c) = (idx / xs.c, idx % xs.c);
        let gp = grad_y.plane(b, c);
        for ip in 0..os.h {
            for jp in 0..os.w {
                let (i, j) = map_target_to_source((ip, jp), cfg);
                let loc = ip * os.w + jp;
                let g = gp[loc];
                for dn in 0..k {
                    let Some(y) = taps.row(i, dn) else { continue };
                    for dm in 0..k {
                        let Some(xx) = taps.col(j, dm) else { continue };
                        let o = y * xs.w + xx;
                        dst[o] = dst[o] + kd[(b * k2 + dn * k + dm) * plane + loc] * g;
                    }
                }
            }
        }
    });

    let mut grad_k = Tensor::zeros(kf.shape());
    for_each_chunk(grad_k.data_mut(), plane, work, |idx, dst| {
        let (b, t) = (idx / k2, idx % k2);
        let (dn, dm) = (t / k, t % k);
        for ip in 0..os.h {
            for jp in 0..os.w {
                let (i, j) = map_target_to_source((ip, jp), cfg);
                let (Some(y), Some(xx)) = (taps.row(i, dn), taps.col(j, dm)) else {
                    continue;
                };
                let loc = ip * os.w + jp;
                let mut acc = T::zero();
                for c in 0..xs.c {
                    acc = acc + grad_y.plane(b, c)[loc] * x.plane(b, c)[y * xs.w + xx];
                }
                dst[loc] = acc;
            }
        }
    });
    Ok((grad_x, grad_k))
}

/// Everything the backward pass needs from a forward call.
#[derive(Debug, Clone)]
pub struct CarafeCache<T: Scalar = f64> {
    cfg: CarafeConfig,
    x: Tensor<T>,
    prediction: Prediction<T>,
    output_shape: Shape,
    params_version: u64,
}

impl<T: Scalar> CarafeCache<T> {
    pub fn kernel_field(&self) -> &KernelField<T> {
        &self.prediction.field
    }

    pub fn config(&self) -> &CarafeConfig {
        &self.cfg
    }
}

/// Predicts kernels from `x` and reassembles `x` with them.
pub fn carafe_forward<T: Scalar>(
    x: &Tensor<T>,
    params: &CarafeParams<T>,
    cfg: &CarafeConfig,
) -> Result<(Tensor<T>, CarafeCache<T>)> {
    let prediction = predict(x, params, cfg)?;
    let y = reassemble(x, &prediction.field, cfg)?;
    let output_shape = y.shape();
    Ok((
        y,
        CarafeCache {
            cfg: *cfg,
            x: x.clone(),
            prediction,
            output_shape,
            params_version: params.version(),
        },
    ))
}

/// Input gradient through both the reassembled features and the kernel
/// prediction path; parameter gradients accumulate into `params`.
pub fn carafe_backward<T: Scalar>(
    grad_y: &Tensor<T>,
    cache: &CarafeCache<T>,
    params: &mut CarafeParams<T>,
) -> Result<Tensor<T>> {
    if cache.params_version != params.version() {
        return Err(Error::Contract(format!(
            "stale cache: recorded parameter version {}, parameters are at {}",
            cache.params_version,
            params.version()
        )));
    }
    grad_y.expect_shape(cache.output_shape, "carafe output gradient")?;
    let cfg = &cache.cfg;
    let pred = &cache.prediction;
    let (mut grad_x, grad_k) = reassemble_backward(grad_y, &cache.x, &pred.field, cfg)?;

    let g = cfg.kernel_channels();
    let grad_logits = match cfg.normalizer {
        Normalizer::Softmax => softmax_group_backward(&grad_k, pred.field.tensor(), g)?,
        Normalizer::Sigmoid => sigmoid_group_backward(&grad_k, pred.field.tensor(), g)?,
        Normalizer::SigmoidNormalized => sigmoid_norm_group_backward(&grad_k, &pred.logits, g)?,
    };
    let grad_enc = match cfg.direction {
        Direction::Down => grad_logits,
        Direction::Up => pixel_unshuffle(&grad_logits, cfg.sigma)?,
    };
    let grad_hidden = conv2d_backward(
        &grad_enc,
        &pred.hidden,
        &mut params.encoder,
        cfg.encoder_stride(),
        cfg.k_encoder / 2,
    )?;
    let grad_compressed = match (&pred.norm, &mut params.norm) {
        (Some((normed, norm_cache)), Some(np)) => {
            let g = relu_backward(&grad_hidden, normed)?;
            affine_norm_backward(&g, norm_cache, np)?
        }
        (None, None) => grad_hidden,
        _ => return Err(Error::Contract("cache and params disagree on compressor norm".into())),
    };
    let grad_pred = conv2d_backward(&grad_compressed, &cache.x, &mut params.compressor, 1, 0)?;
    grad_x.add_assign(&grad_pred)?;
    Ok(grad_x)
}

/// Config, parameters and the cache of the last forward call.
#[derive(Debug, Clone)]
pub struct CarafeLayer<T: Scalar = f64> {
    pub cfg: CarafeConfig,
    pub params: CarafeParams<T>,
    cache: Option<CarafeCache<T>>,
}

impl<T: Scalar> CarafeLayer<T> {
    pub fn new<R: Rng + ?Sized>(channels: usize, cfg: CarafeConfig, rng: &mut R) -> Result<Self> {
        let params = CarafeParams::init(channels, &cfg, rng)?;
        Ok(CarafeLayer { cfg, params, cache: None })
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (y, cache) = carafe_forward(x, &self.params, &self.cfg)?;
        self.cache = Some(cache);
        Ok(y)
    }

    pub fn backward(&mut self, grad_y: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::Contract("backward called before forward".into()))?;
        carafe_backward(grad_y, cache, &mut self.params)
    }

    pub fn last_kernels(&self) -> Option<&KernelField<T>> {
        self.cache.as_ref().map(|c| c.kernel_field())
    }
}
