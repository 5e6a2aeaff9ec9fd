//! Central finite differences as an independent oracle for backward passes.
//!
//! [`check_op`] contracts an op's output with a fixed random tensor `R`,
//! `L(x, theta) = <op(x; theta), R>`, and compares the analytic gradients of
//! `L` (one backward call with `grad_y = R`) against central differences for
//! every input element and every parameter element.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::baselines::{ResampleKind, ResampleOp};
use crate::carafe::{
    carafe_backward, carafe_forward, reassemble, reassemble_backward, CarafeCache, CarafeConfig, CarafeParams,
    Direction, KernelField, Normalizer,
};
use crate::error::{Error, Result};
use crate::nn::{
    affine_norm_backward, affine_norm_forward, conv2d_backward, conv2d_forward, pixel_shuffle, pixel_unshuffle,
    relu, relu_backward, sigmoid_group, sigmoid_group_backward, sigmoid_norm_group, sigmoid_norm_group_backward,
    softmax_group, softmax_group_backward, transposed_conv_backward, transposed_conv_forward, AffineNormCache,
    AffineNormParams, ConvLayerParams, ParamView, Trainable,
};
use crate::tensor::{Shape, Tensor};

/// Base step; the step for element `v` is `DEFAULT_EPS * max(1, |v|)`.
pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_TOL: f64 = 1e-5;

/// `|a - b| / max(|a|, |b|, 1e-12)`.
pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct WorstIndex {
    /// `"input"` or a parameter name such as `"encoder.weights"`.
    pub tensor: String,
    /// `[b, c, i, j]` for the input, `[flat]` for parameters.
    pub index: Vec<usize>,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GradReport {
    pub op: String,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub worst_index: Option<WorstIndex>,
    pub checked: usize,
    pub tol: f64,
    pub pass: bool,
}

/// Central-difference gradient of a scalar function at `x`.
pub fn finite_diff(mut f: impl FnMut(&Tensor<f64>) -> Result<f64>, x: &Tensor<f64>, eps: f64) -> Result<Tensor<f64>> {
    if !(eps > 0.0) {
        return Err(Error::Numeric(format!("step must be positive, got {eps}")));
    }
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for idx in 0..x.len() {
        let v = x.data()[idx];
        let h = eps * v.abs().max(1.0);
        probe.data_mut()[idx] = v + h;
        let up = f(&probe)?;
        probe.data_mut()[idx] = v - h;
        let down = f(&probe)?;
        probe.data_mut()[idx] = v;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Numeric(format!(
                "function is not finite near element {idx} ({up}, {down})"
            )));
        }
        grad.data_mut()[idx] = (up - down) / (2.0 * h);
    }
    Ok(grad)
}

/// An op the oracle can drive. `backward` is always called right after
/// `forward` on the same input.
pub trait GradCheckable {
    fn name(&self) -> String;
    fn forward(&mut self, x: &Tensor<f64>) -> Result<Tensor<f64>>;
    fn backward(&mut self, x: &Tensor<f64>, grad_y: &Tensor<f64>) -> Result<Tensor<f64>>;
    fn params(&mut self) -> Option<&mut dyn Trainable<f64>> {
        None
    }
}

struct Tracker {
    report: GradReport,
}

impl Tracker {
    fn record(&mut self, tensor: &str, index: Vec<usize>, analytic: f64, numeric: f64) {
        let rel = rel_error(analytic, numeric);
        let abs = (analytic - numeric).abs();
        let r = &mut self.report;
        r.checked += 1;
        r.max_abs_error = r.max_abs_error.max(abs);
        // NaN must register as a failure
        if rel > r.max_rel_error || rel.is_nan() {
            r.max_rel_error = if rel.is_nan() { f64::INFINITY } else { rel };
            r.worst_index = Some(WorstIndex {
                tensor: tensor.to_string(),
                index,
                analytic,
                numeric,
            });
        }
    }
}

fn snapshot(p: &mut dyn Trainable<f64>) -> Vec<(String, Vec<f64>, Vec<f64>)> {
    let mut out = Vec::new();
    p.visit_params(&mut |v: ParamView<'_, f64>| out.push((v.name, v.value.to_vec(), v.grad.to_vec())));
    out
}

fn set_param(p: &mut dyn Trainable<f64>, buffer: usize, element: usize, value: f64) {
    let mut i = 0;
    p.visit_params(&mut |v| {
        if i == buffer {
            v.value[element] = value;
        }
        i += 1;
    });
}

/// `<y, proj>` with Neumaier-compensated summation, so rounding in the
/// reduction does not swamp central differences of small gradients.
pub fn projected(y: &Tensor<f64>, proj: &Tensor<f64>) -> Result<f64> {
    y.expect_shape(proj.shape(), "projection")?;
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for (a, b) in y.data().iter().zip(proj.data()) {
        let v = a * b;
        let t = sum + v;
        comp += if sum.abs() >= v.abs() { (sum - t) + v } else { (v - t) + sum };
        sum = t;
    }
    Ok(sum + comp)
}

/// Compares analytic input and parameter gradients of `op` with central
/// differences on a random input of `input_shape`.
pub fn check_op(op: &mut dyn GradCheckable, input_shape: Shape, seed: u64, tol: f64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::<f64>::random_uniform(input_shape, -1.0, 1.0, &mut rng);
    let y = op.forward(&x)?;
    let proj = Tensor::<f64>::random_uniform(y.shape(), -1.0, 1.0, &mut rng);

    if let Some(p) = op.params() {
        p.zero_grad();
    }
    op.forward(&x)?;
    let grad_x = op.backward(&x, &proj)?;
    grad_x.expect_shape(x.shape(), "input gradient")?;
    let analytic_params = op.params().map(snapshot).unwrap_or_default();

    let mut t = Tracker {
        report: GradReport {
            op: op.name(),
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            worst_index: None,
            checked: 0,
            tol,
            pass: false,
        },
    };

    let numeric_x = finite_diff(|xp| projected(&op.forward(xp)?, &proj), &x, DEFAULT_EPS)?;
    let s = x.shape();
    for (flat, (&a, &n)) in grad_x.data().iter().zip(numeric_x.data()).enumerate() {
        let j = flat % s.w;
        let i = (flat / s.w) % s.h;
        let c = (flat / s.plane()) % s.c;
        let b = flat / (s.plane() * s.c);
        t.record("input", vec![b, c, i, j], a, n);
    }

    for (buffer, (name, values, grads)) in analytic_params.iter().enumerate() {
        for (e, (&v, &a)) in values.iter().zip(grads).enumerate() {
            let h = DEFAULT_EPS * v.abs().max(1.0);
            let mut eval = |value: f64| -> Result<f64> {
                set_param(op.params().expect("params present"), buffer, e, value);
                projected(&op.forward(&x)?, &proj)
            };
            let up = eval(v + h)?;
            let down = eval(v - h)?;
            set_param(op.params().expect("params present"), buffer, e, v);
            if !up.is_finite() || !down.is_finite() {
                return Err(Error::Numeric(format!("loss not finite perturbing {name}[{e}]")));
            }
            t.record(name, vec![e], a, (up - down) / (2.0 * h));
        }
    }

    let mut report = t.report;
    report.pass = report.max_rel_error < tol;
    Ok(report)
}

/// Wraps an op and negates its input gradient; a negative control for the oracle.
pub struct SignFlipped<O>(pub O);

impl<O: GradCheckable> GradCheckable for SignFlipped<O> {
    fn name(&self) -> String {
        format!("{}_sign_flipped", self.0.name())
    }

    fn forward(&mut self, x: &Tensor<f64>) -> Result<Tensor<f64>> {
        self.0.forward(x)
    }

    fn backward(&mut self, x: &Tensor<f64>, grad_y: &Tensor<f64>) -> Result<Tensor<f64>> {
        Ok(self.0.backward(x, grad_y)?.scale(-1.0))
    }

    fn params(&mut self) -> Option<&mut dyn Trainable<f64>> {
        self.0.params()
    }
}

pub struct ConvOp {
    pub params: ConvLayerParams<f64>,
    pub stride: usize,
    pub pad: usize,
}

impl GradCheckable for ConvOp {
    fn name(&self) -> String {
        format!("conv2d_k{}_s{}_p{}", self.params.k(), self.stride, self.pad)
    }

    fn forward(&mut self, x: &Tensor<f64>) -> Result<Tensor<f64>> {
        conv2d_forward(x, &self.params, self.stride, self.pad)
    }

    fn backward(&mut self, x: &Tensor<f64>, grad_y: &Tensor<f64>) -> Result<Tensor<f64>> {
        conv2d_backward(grad_y, x, &mut self.params, self.stride, self.pad)
    }

    fn params(&mut self) -> Option<&mut dyn Trainable<f64>> {
        Some(&mut self.params)
    }
}

pub struct TransposedConvOp {
    pub params: ConvLayerParams<f64>,
    pub stride: usize,
    pub pad: usize,
}

impl GradCheckable for TransposedConvOp {
    fn name(&self) -> String {
        format!("transposed_conv_k{}_s{}_p{}", self.params.k(), self.stride, self.pad)
    }

    fn forward(&mut self, x: &Tensor<f64>) -> Result<Tensor<f64>> {
        transposed_conv_forward(x, &self.params, self.stride, self.pad)
    }

    fn backward(&mut self, x: &Tensor<f64>, grad_y: &Tensor<f64>) -> Result<Tensor<f64>> {
        transposed_conv_backward(grad_y, x, &mut self.params, self.stride, self.pad)
    }

    fn params(&mut self) -> Option<&mut dyn Trainable<f64>> {
        Some(&mut self.params)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Elementwise {
    Relu,
    PixelShuffle(usize),
    PixelUnshuffle(usize),
    Softmax(usize),
    Sigmoid(usize),
    SigmoidNormalized(usize),
}

/// Parameter-free ops.
pub struct PlainOp {
    pub kind: Elementwise,
    last_y: Option<Tensor<f64>>,
}

impl PlainOp {
    pub fn new(kind: Elementwise) -> Self {
        PlainOp { kind, last_y: None }
    }
}

impl GradCheckable for PlainOp {
    fn name(&self) -> String {
        match self.kind {
            Elementwise::Relu => "relu".into(),
            Elementwise::PixelShuffle(s) => format!("pixel_shuffle_{s}"),
            Elementwise::PixelUnshuffle(s) => format!("pixel_unshuffle_{s}"),
            Elementwise::Softmax(g) => format!("softmax_group_{g}"),
            Elementwise::Sigmoid(g) => format!("sigmoid_group_{g}"),
            Elementwise::SigmoidNormalized(g) => format!("sigmoid_norm_group_{g}"),
        }
    }

    fn forward(&mut self, x: &Tensor<f64>) -> Result<Tensor<f64>> {
        let y = match self.kind {
            Elementwise::Relu => relu(x),
            Elementwise::PixelShuffle(s) => pixel_shuffle(x, s)?,
            Elementwise::PixelUnshuffle(s) => pixel_unshuffle(x, s)?,
            Elementwise::Softmax(g) => softmax_group(x, g)?,
            Elementwise::Sigmoid(g) => sigmoid_group(x, g)?,
            Elementwise::SigmoidNormalized(g) => sigmoid_norm_group(x, g)?,
        };
        self.last_y = Some(y.clone());
        Ok(y)
    }

    fn backward(&mut self, x: &Tensor<f64>, grad_y: &Tensor<f64>) -> Result<Tensor<f64>> {
        let y = self
            .last_y
            .as_ref()
            .ok_or_else(|| Error::Contract("backward before forward".into()))?;
        match self.kind {
            Elementwise::Relu => relu_backward(grad_y, x),
            Elementwise::PixelShuffle(s) => pixel_unshuffle(grad_y, s),
            Elementwise::PixelUnshuffle(s) => pixel_shuffle(grad_y, s),
            Elementwise::Softmax(g) => softmax_group_backward(grad_y, y, g),
            Elementwise::Sigmoid(g) => sigmoid_group_backward(grad_y, y, g),
            Elementwise::SigmoidNormalized(g) => sigmoid_norm_group_backward(grad_y, x, g),
        }
    }
}

pub struct AffineNormOp {
    pub params: AffineNormParams<f64>,
    cache: Option<AffineNormCache<f64>>,
}

impl AffineNormOp {
    pub fn new(params: AffineNormParams<f64>) -> Self {
        AffineNormOp { params, cache: None }
    }
}

impl GradCheckable for AffineNormOp {
    fn name(&self) -> String {
        "affine_norm".into()
    }

    fn forward(&mut self, x: &Tensor<f64>) -> Result<Tensor<f64>> {
        let (y, cache) = affine_norm_forward(x, &self.params)?;
        self.cache = Some(cache);
        Ok(y)
    }

    fn backward(&mut self, _x: &Tensor<f64>, grad_y: &Tensor<f64>) -> Result<Tensor<f64>> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::Contract("backward before forward".into()))?;
        affine_norm_backward(grad_y, cache, &mut self.params)
    }

    fn params(&mut self) -> Option<&mut dyn Trainable<f64>> {
        Some(&mut self.params)
    }
}

/// Reassembly alone with the kernel field held fixed; checks the feature path.
pub struct ReassembleOp {
    pub cfg: CarafeConfig,
    pub field: KernelField<f64>,
}

impl GradCheckable for ReassembleOp {
    fn name(&self) -> String {
        format!("reassemble_{}", self.cfg.direction)
    }

    fn forward(&mut self, x: &Tensor<f64>) -> Result<Tensor<f64>> {
        reassemble(x, &self.field, &self.cfg)
    }

    fn backward(&mut self, x: &Tensor<f64>, grad_y: &Tensor<f64>) -> Result<Tensor<f64>> {
        Ok(reassemble_backward(grad_y, x, &self.field, &self.cfg)?.0)
    }
}

/// Reassembly as a function of the kernel weights with the features fixed.
pub struct ReassembleKernelOp {
    pub cfg: CarafeConfig,
    pub features: Tensor<f64>,
}

impl GradCheckable for ReassembleKernelOp {
    fn name(&self) -> String {
        format!("reassemble_kernels_{}", self.cfg.direction)
    }

    fn forward(&mut self, k: &Tensor<f64>) -> Result<Tensor<f64>> {
        let field = KernelField::unconstrained(k.clone(), self.cfg.k_reassembly)?;
        reassemble(&self.features, &field, &self.cfg)
    }

    fn backward(&mut self, k: &Tensor<f64>, grad_y: &Tensor<f64>) -> Result<Tensor<f64>> {
        let field = KernelField::unconstrained(k.clone(), self.cfg.k_reassembly)?;
        Ok(reassemble_backward(grad_y, &self.features, &field, &self.cfg)?.1)
    }
}

/// The full operator with kernel prediction.
pub struct CarafeOp {
    pub cfg: CarafeConfig,
    pub params: CarafeParams<f64>,
    cache: Option<CarafeCache<f64>>,
}

impl CarafeOp {
    pub fn new(cfg: CarafeConfig, params: CarafeParams<f64>) -> Self {
        CarafeOp { cfg, params, cache: None }
    }
}

impl GradCheckable for CarafeOp {
    fn name(&self) -> String {
        format!(
            "carafe_{}_s{}_ke{}_kr{}_cm{}_{}",
            self.cfg.direction,
            self.cfg.sigma,
            self.cfg.k_encoder,
            self.cfg.k_reassembly,
            self.cfg.c_mid,
            self.cfg.normalizer.name()
        )
    }

    fn forward(&mut self, x: &Tensor<f64>) -> Result<Tensor<f64>> {
        let (y, cache) = carafe_forward(x, &self.params, &self.cfg)?;
        self.cache = Some(cache);
        Ok(y)
    }

    fn backward(&mut self, _x: &Tensor<f64>, grad_y: &Tensor<f64>) -> Result<Tensor<f64>> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::Contract("backward before forward".into()))?;
        carafe_backward(grad_y, cache, &mut self.params)
    }

    fn params(&mut self) -> Option<&mut dyn Trainable<f64>> {
        Some(&mut self.params)
    }
}

pub struct ResampleCheck(pub ResampleOp<f64>);

impl GradCheckable for ResampleCheck {
    fn name(&self) -> String {
        format!("{}_s{}", self.0.kind, self.0.sigma)
    }

    fn forward(&mut self, x: &Tensor<f64>) -> Result<Tensor<f64>> {
        self.0.forward(x)
    }

    fn backward(&mut self, _x: &Tensor<f64>, grad_y: &Tensor<f64>) -> Result<Tensor<f64>> {
        self.0.backward(grad_y)
    }

    fn params(&mut self) -> Option<&mut dyn Trainable<f64>> {
        self.0.params.as_mut().map(|p| p as &mut dyn Trainable<f64>)
    }
}

/// A named op with the input shape it is checked on.
pub struct RegisteredOp {
    pub name: &'static str,
    pub input_shape: Shape,
    pub build: fn(seed: u64) -> Result<Box<dyn GradCheckable>>,
}

fn shape(n: usize, c: usize, h: usize, w: usize) -> Shape {
    Shape::new(n, c, h, w).expect("registry shapes are valid")
}

fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15)
}

/// Gradient-check configuration of the operator: defaults scaled down to
/// `c_mid = 4` on a 3-channel input.
pub fn small_carafe(direction: Direction, normalizer: Normalizer, seed: u64) -> Result<CarafeOp> {
    let cfg = CarafeConfig::new(direction, 2).with_c_mid(4).with_normalizer(normalizer);
    let mut params = CarafeParams::init(3, &cfg, &mut seeded(seed))?;
    // non-trivial norm affine so its gradients are exercised away from identity
    if let Some(n) = &mut params.norm {
        n.gamma.iter_mut().enumerate().for_each(|(i, g)| *g = 0.8 + 0.1 * i as f64);
        n.beta.iter_mut().enumerate().for_each(|(i, b)| *b = 0.05 * i as f64);
    }
    params.encoder.bias.iter_mut().enumerate().for_each(|(i, b)| *b = 0.01 * (i % 7) as f64);
    Ok(CarafeOp::new(cfg, params))
}

fn learned(kind: ResampleKind, sigma: usize, seed: u64) -> Result<Box<dyn GradCheckable>> {
    let mut op = ResampleOp::new(kind, sigma, 3, &mut seeded(seed))?;
    if let Some(p) = &mut op.params {
        p.bias.iter_mut().enumerate().for_each(|(i, b)| *b = 0.1 * i as f64 - 0.05);
    }
    Ok(Box::new(ResampleCheck(op)))
}

/// Every op certified by the `gradcheck` command.
pub fn registry() -> Vec<RegisteredOp> {
    vec![
        RegisteredOp {
            name: "conv2d",
            input_shape: shape(1, 2, 5, 5),
            build: |seed| {
                let mut p = ConvLayerParams::init_uniform(3, 2, 3, &mut seeded(seed))?;
                p.bias = vec![0.1, -0.2, 0.3];
                Ok(Box::new(ConvOp { params: p, stride: 1, pad: 1 }))
            },
        },
        RegisteredOp {
            name: "conv2d_strided",
            input_shape: shape(1, 2, 5, 5),
            build: |seed| {
                let mut p = ConvLayerParams::init_uniform(3, 2, 3, &mut seeded(seed))?;
                p.bias = vec![0.1, -0.2, 0.3];
                Ok(Box::new(ConvOp { params: p, stride: 2, pad: 1 }))
            },
        },
        RegisteredOp {
            name: "conv2d_batched",
            input_shape: shape(2, 4, 6, 6),
            build: |seed| {
                let p = ConvLayerParams::init_uniform(2, 4, 3, &mut seeded(seed))?;
                Ok(Box::new(ConvOp { params: p, stride: 2, pad: 0 }))
            },
        },
        RegisteredOp {
            name: "transposed_conv",
            input_shape: shape(1, 2, 3, 3),
            build: |seed| {
                let mut p = ConvLayerParams::init_transposed(2, 3, 4, &mut seeded(seed))?;
                p.bias = vec![0.1, -0.2, 0.3];
                Ok(Box::new(TransposedConvOp { params: p, stride: 2, pad: 1 }))
            },
        },
        RegisteredOp {
            name: "pixel_shuffle",
            input_shape: shape(1, 8, 3, 3),
            build: |_| Ok(Box::new(PlainOp::new(Elementwise::PixelShuffle(2)))),
        },
        RegisteredOp {
            name: "softmax_group",
            input_shape: shape(1, 25, 3, 3),
            build: |_| Ok(Box::new(PlainOp::new(Elementwise::Softmax(25)))),
        },
        RegisteredOp {
            name: "sigmoid_group",
            input_shape: shape(1, 18, 3, 3),
            build: |_| Ok(Box::new(PlainOp::new(Elementwise::Sigmoid(9)))),
        },
        RegisteredOp {
            name: "sigmoid_norm_group",
            input_shape: shape(1, 18, 3, 3),
            build: |_| Ok(Box::new(PlainOp::new(Elementwise::SigmoidNormalized(9)))),
        },
        RegisteredOp {
            name: "relu",
            input_shape: shape(2, 4, 6, 6),
            build: |_| Ok(Box::new(PlainOp::new(Elementwise::Relu))),
        },
        RegisteredOp {
            name: "affine_norm",
            input_shape: shape(2, 4, 6, 6),
            build: |_| {
                Ok(Box::new(AffineNormOp::new(AffineNormParams::new(
                    vec![1.0, 0.5, 1.5, 2.0],
                    vec![0.0, 0.1, -0.2, 0.3],
                ))))
            },
        },
        RegisteredOp {
            name: "reassemble_down",
            input_shape: shape(1, 3, 7, 7),
            build: |seed| fixed_field_reassembly(Direction::Down, seed),
        },
        RegisteredOp {
            name: "reassemble_up",
            input_shape: shape(1, 3, 4, 4),
            build: |seed| fixed_field_reassembly(Direction::Up, seed),
        },
        RegisteredOp {
            name: "reassemble_kernels_down",
            input_shape: shape(1, 25, 4, 4),
            build: |seed| kernel_path_reassembly(Direction::Down, seed),
        },
        RegisteredOp {
            name: "reassemble_kernels_up",
            input_shape: shape(1, 25, 8, 8),
            build: |seed| kernel_path_reassembly(Direction::Up, seed),
        },
        RegisteredOp {
            name: "carafe_down",
            input_shape: shape(1, 3, 6, 6),
            build: |seed| Ok(Box::new(small_carafe(Direction::Down, Normalizer::Softmax, seed)?)),
        },
        RegisteredOp {
            name: "carafe_up",
            input_shape: shape(1, 3, 6, 6),
            build: |seed| Ok(Box::new(small_carafe(Direction::Up, Normalizer::Softmax, seed)?)),
        },
        RegisteredOp {
            name: "carafe_down_sigmoid_normalized",
            input_shape: shape(1, 3, 6, 6),
            build: |seed| Ok(Box::new(small_carafe(Direction::Down, Normalizer::SigmoidNormalized, seed)?)),
        },
        RegisteredOp {
            name: "carafe_up_sigmoid",
            input_shape: shape(1, 3, 6, 6),
            build: |seed| Ok(Box::new(small_carafe(Direction::Up, Normalizer::Sigmoid, seed)?)),
        },
        RegisteredOp {
            name: "nearest_up",
            input_shape: shape(1, 3, 4, 4),
            build: |seed| learned(ResampleKind::NearestUp, 2, seed),
        },
        RegisteredOp {
            name: "bilinear_up",
            input_shape: shape(1, 3, 4, 5),
            build: |seed| learned(ResampleKind::BilinearUp, 2, seed),
        },
        RegisteredOp {
            name: "avg_pool",
            input_shape: shape(1, 3, 7, 6),
            build: |seed| learned(ResampleKind::AvgPool, 3, seed),
        },
        RegisteredOp {
            name: "max_pool",
            input_shape: shape(1, 3, 6, 7),
            build: |seed| learned(ResampleKind::MaxPool, 2, seed),
        },
        RegisteredOp {
            name: "strided_conv",
            input_shape: shape(1, 3, 6, 6),
            build: |seed| learned(ResampleKind::StridedConv, 2, seed),
        },
        RegisteredOp {
            name: "deconv",
            input_shape: shape(1, 3, 3, 3),
            build: |seed| learned(ResampleKind::TransposedConv, 2, seed),
        },
        RegisteredOp {
            name: "nearest_plus_conv",
            input_shape: shape(1, 3, 3, 3),
            build: |seed| learned(ResampleKind::NearestPlusConv, 2, seed),
        },
        RegisteredOp {
            name: "bilinear_plus_conv",
            input_shape: shape(1, 3, 3, 3),
            build: |seed| learned(ResampleKind::BilinearPlusConv, 2, seed),
        },
        RegisteredOp {
            name: "spatial_attention_down",
            input_shape: shape(1, 3, 6, 6),
            build: |seed| learned(ResampleKind::SpatialAttention(Direction::Down), 2, seed),
        },
        RegisteredOp {
            name: "spatial_attention_up",
            input_shape: shape(1, 3, 4, 4),
            build: |seed| learned(ResampleKind::SpatialAttention(Direction::Up), 2, seed),
        },
    ]
}

fn fixed_field_reassembly(direction: Direction, seed: u64) -> Result<Box<dyn GradCheckable>> {
    let cfg = CarafeConfig::new(direction, 2);
    let (h, w) = match direction {
        Direction::Down => (4, 4),
        Direction::Up => (8, 8),
    };
    let logits = Tensor::random_uniform(shape(1, 25, h, w), -2.0, 2.0, &mut seeded(seed));
    let field = KernelField::normalize(&logits, 5, Normalizer::Softmax)?;
    Ok(Box::new(ReassembleOp { cfg, field }))
}

fn kernel_path_reassembly(direction: Direction, seed: u64) -> Result<Box<dyn GradCheckable>> {
    let cfg = CarafeConfig::new(direction, 2);
    let (h, w) = match direction {
        Direction::Down => (7, 7),
        Direction::Up => (4, 4),
    };
    let features = Tensor::random_uniform(shape(1, 3, h, w), -1.0, 1.0, &mut seeded(seed));
    Ok(Box::new(ReassembleKernelOp { cfg, features }))
}

/// Looks up a registered op by name.
pub fn find(name: &str) -> Option<RegisteredOp> {
    registry().into_iter().find(|r| r.name == name)
}

/// Runs one registered op through [`check_op`].
pub fn run_registered(op: &RegisteredOp, seed: u64, tol: f64) -> Result<GradReport> {
    let mut built = (op.build)(seed)?;
    let mut report = check_op(built.as_mut(), op.input_shape, seed, tol)?;
    report.op = op.name.to_string();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rel_error_floor() {
        assert_eq!(rel_error(0.0, 0.0), 0.0);
        assert!((rel_error(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-15);
    }

    #[test]
    fn finite_diff_of_square() {
        let x = Tensor::<f64>::from_vec([1, 1, 1, 3], vec![1.0, -2.0, 0.5]).unwrap();
        let g = finite_diff(|t| Ok(t.data().iter().map(|v| v * v).sum()), &x, 1e-5).unwrap();
        for (a, v) in g.data().iter().zip(x.data()) {
            assert!((a - 2.0 * v).abs() < 1e-8);
        }
    }

    #[test]
    fn rejects_non_finite() {
        let x = Tensor::<f64>::zeros(Shape::new(1, 1, 1, 1).unwrap());
        assert!(matches!(finite_diff(|_| Ok(f64::NAN), &x, 1e-5), Err(Error::Numeric(_))));
    }

    #[test]
    fn registry_passes() {
        for op in registry() {
            let r = run_registered(&op, 7, DEFAULT_TOL).unwrap();
            println!("{} {:e} {}", r.op, r.max_rel_error, r.checked);
            assert!(r.pass, "{r:?}");
        }
    }

    #[test]
    fn sign_flip_is_caught() {
        let op = find("conv2d").unwrap();
        let mut flipped = SignFlipped(ConvOp {
            params: ConvLayerParams::init_uniform(3, 2, 3, &mut seeded(1)).unwrap(),
            stride: 1,
            pad: 1,
        });
        let r = check_op(&mut flipped, op.input_shape, 3, DEFAULT_TOL).unwrap();
        assert!(!r.pass);
        assert!(r.max_rel_error > 1.0);
    }
}
