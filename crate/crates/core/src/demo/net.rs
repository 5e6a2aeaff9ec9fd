use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::data::{TaskKind, ToyTask};
use crate::baselines::{avg_pool, bilinear_up, bilinear_up_backward, nearest_up};
use crate::baselines::{ResampleKind, ResampleOp};
use crate::carafe::{visit_prefixed, CarafeConfig, CarafeLayer, Direction};
use crate::error::{Error, Result};
use crate::nn::{
    affine_norm_backward, affine_norm_forward, conv2d_backward, conv2d_forward, relu, relu_backward, AffineNormCache,
    AffineNormParams, ConvLayerParams, ParamView, Trainable,
};
use crate::tensor::Tensor;

/// What fills the resampler slot of a [`MiniNet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlotSpec {
    Baseline(ResampleKind),
    Carafe(CarafeConfig),
}

impl SlotSpec {
    pub fn name(&self) -> String {
        match self {
            SlotSpec::Baseline(k) => k.name().to_string(),
            SlotSpec::Carafe(cfg) => format!("carafe_{}", cfg.direction),
        }
    }

    pub fn direction(&self) -> Direction {
        match self {
            SlotSpec::Baseline(k) => k.direction(),
            SlotSpec::Carafe(cfg) => cfg.direction,
        }
    }

    pub fn sigma(&self) -> Option<usize> {
        match self {
            SlotSpec::Baseline(_) => None,
            SlotSpec::Carafe(cfg) => Some(cfg.sigma),
        }
    }
}

#[derive(Debug, Clone)]
pub enum Resampler {
    Baseline(ResampleOp<f64>),
    Carafe(CarafeLayer<f64>),
}

impl Resampler {
    pub fn new<R: Rng + ?Sized>(spec: SlotSpec, sigma: usize, channels: usize, rng: &mut R) -> Result<Self> {
        Ok(match spec {
            SlotSpec::Baseline(kind) => Resampler::Baseline(ResampleOp::new(kind, sigma, channels, rng)?),
            SlotSpec::Carafe(cfg) => {
                if cfg.sigma != sigma {
                    return Err(Error::Config(format!(
                        "carafe slot has sigma {} but the network uses {sigma}",
                        cfg.sigma
                    )));
                }
                Resampler::Carafe(CarafeLayer::new(channels, cfg, rng)?)
            }
        })
    }

    fn forward(&mut self, x: &Tensor<f64>) -> Result<Tensor<f64>> {
        match self {
            Resampler::Baseline(op) => op.forward(x),
            Resampler::Carafe(l) => l.forward(x),
        }
    }

    fn backward(&mut self, g: &Tensor<f64>) -> Result<Tensor<f64>> {
        match self {
            Resampler::Baseline(op) => op.backward(g),
            Resampler::Carafe(l) => l.backward(g),
        }
    }
}

impl Trainable<f64> for Resampler {
    fn visit_params(&mut self, f: &mut dyn FnMut(ParamView<'_, f64>)) {
        match self {
            Resampler::Baseline(op) => op.visit_params(f),
            Resampler::Carafe(l) => l.params.visit_params(f),
        }
    }
}

#[derive(Debug, Clone)]
pub enum Layer {
    Conv {
        params: ConvLayerParams<f64>,
        stride: usize,
        pad: usize,
        input: Option<Tensor<f64>>,
    },
    Relu {
        input: Option<Tensor<f64>>,
    },
    AffineNorm {
        params: AffineNormParams<f64>,
        cache: Option<AffineNormCache<f64>>,
    },
    Slot(Resampler),
}

impl Layer {
    pub fn conv<R: Rng + ?Sized>(c_in: usize, c_out: usize, k: usize, stride: usize, rng: &mut R) -> Result<Self> {
        Ok(Layer::Conv {
            params: ConvLayerParams::init_uniform(c_out, c_in, k, rng)?,
            stride,
            pad: k / 2,
            input: None,
        })
    }

    /// Zero weights and bias, so a residual branch starts as the identity.
    pub fn conv_zero(c_in: usize, c_out: usize, k: usize, stride: usize) -> Result<Self> {
        Ok(Layer::Conv {
            params: ConvLayerParams::zeros(c_out, c_in, k)?,
            stride,
            pad: k / 2,
            input: None,
        })
    }

    pub fn relu() -> Self {
        Layer::Relu { input: None }
    }

    pub fn affine_norm(channels: usize) -> Self {
        Layer::AffineNorm {
            params: AffineNormParams::identity(channels),
            cache: None,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Conv { .. } => "conv",
            Layer::Relu { .. } => "relu",
            Layer::AffineNorm { .. } => "affine_norm",
            Layer::Slot(_) => "slot",
        }
    }

    fn forward(&mut self, x: &Tensor<f64>) -> Result<Tensor<f64>> {
        match self {
            Layer::Conv {
                params,
                stride,
                pad,
                input,
            } => {
                let y = conv2d_forward(x, params, *stride, *pad)?;
                *input = Some(x.clone());
                Ok(y)
            }
            Layer::Relu { input } => {
                *input = Some(x.clone());
                Ok(relu(x))
            }
            Layer::AffineNorm { params, cache } => {
                let (y, c) = affine_norm_forward(x, params)?;
                *cache = Some(c);
                Ok(y)
            }
            Layer::Slot(r) => r.forward(x),
        }
    }

    fn backward(&mut self, g: &Tensor<f64>) -> Result<Tensor<f64>> {
        let missing = || Error::Contract("backward called before forward".into());
        match self {
            Layer::Conv {
                params,
                stride,
                pad,
                input,
            } => conv2d_backward(g, input.as_ref().ok_or_else(missing)?, params, *stride, *pad),
            Layer::Relu { input } => relu_backward(g, input.as_ref().ok_or_else(missing)?),
            Layer::AffineNorm { params, cache } => affine_norm_backward(g, cache.as_ref().ok_or_else(missing)?, params),
            Layer::Slot(r) => r.backward(g),
        }
    }

    fn visit(&mut self, f: &mut dyn FnMut(ParamView<'_, f64>)) {
        match self {
            Layer::Conv { params, .. } => params.visit_params(f),
            Layer::AffineNorm { params, .. } => params.visit_params(f),
            Layer::Relu { .. } => {}
            Layer::Slot(r) => r.visit_params(f),
        }
    }
}

/// Layers applied in order.
#[derive(Debug, Clone, Default)]
pub struct Seq {
    pub layers: Vec<Layer>,
}

impl Seq {
    pub fn new(layers: Vec<Layer>) -> Self {
        Seq { layers }
    }

    pub fn forward(&mut self, x: &Tensor<f64>) -> Result<Tensor<f64>> {
        let mut h = x.clone();
        for l in &mut self.layers {
            h = l.forward(&h)?;
        }
        Ok(h)
    }

    pub fn backward(&mut self, g: &Tensor<f64>) -> Result<Tensor<f64>> {
        let mut g = g.clone();
        for l in self.layers.iter_mut().rev() {
            g = l.backward(&g)?;
        }
        Ok(g)
    }

    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(ParamView<'_, f64>)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            let name = match l {
                Layer::Slot(_) => format!("{prefix}.slot"),
                _ => format!("{prefix}.{i}"),
            };
            let mut inner = LayerParams(l);
            visit_prefixed(&mut inner, &name, f);
        }
    }
}

struct LayerParams<'a>(&'a mut Layer);

impl Trainable<f64> for LayerParams<'_> {
    fn visit_params(&mut self, f: &mut dyn FnMut(ParamView<'_, f64>)) {
        self.0.visit(f)
    }
}

/// Where the fine level of the pyramid comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FineSource {
    /// Input is the coarse image; the fine level is its nearest upsampling.
    NearestOfInput,
    /// Input is full resolution; the coarse level is its average pooling.
    PooledInput,
}

/// Two-level top-down fusion: coarse features are upsampled by the slot and
/// added to a 1x1 lateral projection of the fine level.
#[derive(Debug, Clone)]
pub struct MiniFpn {
    pub sigma: usize,
    pub fine: FineSource,
    pub coarse: Seq,
    pub slot: Seq,
    pub lateral: Seq,
    pub head: Seq,
    fused: Option<Tensor<f64>>,
}

/// Residual bottleneck whose main branch downsamples in the slot ahead of
/// its 3x3 convolution; a strided 1x1 projection forms the shortcut.
#[derive(Debug, Clone)]
pub struct MiniBottleneck {
    pub sigma: usize,
    pub stem: Seq,
    pub main: Seq,
    pub shortcut: Seq,
    pub head: Seq,
    merged: Option<Tensor<f64>>,
    logits_shape: Option<crate::tensor::Shape>,
}

#[derive(Debug, Clone)]
pub enum MiniNet {
    Fpn(MiniFpn),
    Bottleneck(MiniBottleneck),
}

pub const DEFAULT_WIDTH: usize = 16;

fn layer_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn slot_rng(seed: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(7);
    r
}

impl MiniNet {
    /// The network used for `task`: an FPN for super_res and inpaint, a
    /// bottleneck for seg2. Layers outside the slot draw their initial
    /// weights from a stream that does not depend on the slot.
    pub fn for_task(task: &ToyTask, slot: SlotSpec, width: usize, seed: u64) -> Result<Self> {
        task.validate()?;
        match task.kind {
            TaskKind::SuperRes | TaskKind::Inpaint => {
                let fine = if task.kind == TaskKind::SuperRes {
                    FineSource::NearestOfInput
                } else {
                    FineSource::PooledInput
                };
                Ok(MiniNet::Fpn(MiniFpn::new(task.sigma, fine, slot, width, seed)?))
            }
            TaskKind::Seg2 => Ok(MiniNet::Bottleneck(MiniBottleneck::new(task.sigma, slot, width, seed)?)),
        }
    }

    pub fn forward(&mut self, x: &Tensor<f64>) -> Result<Tensor<f64>> {
        match self {
            MiniNet::Fpn(n) => n.forward(x),
            MiniNet::Bottleneck(n) => n.forward(x),
        }
    }

    /// Accumulates parameter gradients for the last forward call.
    pub fn backward(&mut self, grad_out: &Tensor<f64>) -> Result<()> {
        match self {
            MiniNet::Fpn(n) => n.backward(grad_out),
            MiniNet::Bottleneck(n) => n.backward(grad_out),
        }
    }

    pub fn slot(&self) -> &Resampler {
        let seq = match self {
            MiniNet::Fpn(n) => &n.slot,
            MiniNet::Bottleneck(n) => &n.main,
        };
        seq.layers
            .iter()
            .find_map(|l| match l {
                Layer::Slot(r) => Some(r),
                _ => None,
            })
            .expect("every net has a slot")
    }

    /// `(name, len)` of every parameter buffer outside the resampler slot.
    pub fn non_slot_param_shapes(&mut self) -> Vec<(String, usize)> {
        let mut out = Vec::new();
        self.visit_params(&mut |p| {
            if !p.name.contains(".slot.") {
                out.push((p.name, p.value.len()));
            }
        });
        out
    }
}

fn slot_layer(spec: SlotSpec, sigma: usize, width: usize, seed: u64) -> Result<Layer> {
    Ok(Layer::Slot(Resampler::new(spec, sigma, width, &mut slot_rng(seed))?))
}

impl MiniFpn {
    pub fn new(sigma: usize, fine: FineSource, slot: SlotSpec, width: usize, seed: u64) -> Result<Self> {
        if slot.direction() != Direction::Up {
            return Err(Error::Config(format!("the FPN slot must upsample, got {}", slot.name())));
        }
        let mut rng = layer_rng(seed);
        let coarse = Seq::new(vec![
            Layer::conv(1, width, 3, 1, &mut rng)?,
            Layer::affine_norm(width),
            Layer::relu(),
            Layer::conv(width, width, 3, 1, &mut rng)?,
            Layer::affine_norm(width),
            Layer::relu(),
        ]);
        let lateral = Seq::new(vec![Layer::conv(1, width, 1, 1, &mut rng)?]);
        let head = Seq::new(vec![Layer::relu(), Layer::conv(width, 1, 3, 1, &mut rng)?]);
        Ok(MiniFpn {
            sigma,
            fine,
            coarse,
            slot: Seq::new(vec![slot_layer(slot, sigma, width, seed)?]),
            lateral,
            head,
            fused: None,
        })
    }

    fn levels(&self, x: &Tensor<f64>) -> Result<(Tensor<f64>, Tensor<f64>)> {
        Ok(match self.fine {
            FineSource::NearestOfInput => (x.clone(), nearest_up(x, self.sigma)?),
            FineSource::PooledInput => (avg_pool(x, self.sigma)?, x.clone()),
        })
    }

    pub fn forward(&mut self, x: &Tensor<f64>) -> Result<Tensor<f64>> {
        let (coarse_in, fine_in) = self.levels(x)?;
        let top = self.slot.forward(&self.coarse.forward(&coarse_in)?)?;
        let fused = top.add(&self.lateral.forward(&fine_in)?)?;
        let out = self.head.forward(&fused)?.add(&fine_in)?;
        self.fused = Some(fused);
        Ok(out)
    }

    pub fn backward(&mut self, grad_out: &Tensor<f64>) -> Result<()> {
        if self.fused.is_none() {
            return Err(Error::Contract("backward called before forward".into()));
        }
        let g = self.head.backward(grad_out)?;
        self.lateral.backward(&g)?;
        let g_coarse = self.slot.backward(&g)?;
        self.coarse.backward(&g_coarse)?;
        Ok(())
    }
}

impl MiniBottleneck {
    pub fn new(sigma: usize, slot: SlotSpec, width: usize, seed: u64) -> Result<Self> {
        if slot.direction() != Direction::Down {
            return Err(Error::Config(format!("the bottleneck slot must downsample, got {}", slot.name())));
        }
        let mut rng = layer_rng(seed);
        let inner = (width / 2).max(1);
        let stem = Seq::new(vec![
            Layer::conv(1, width, 3, 1, &mut rng)?,
            Layer::affine_norm(width),
            Layer::relu(),
        ]);
        let pre = Layer::conv(width, inner, 1, 1, &mut rng)?;
        let mid = Layer::conv(inner, inner, 3, 1, &mut rng)?;
        let post = Layer::conv(inner, width, 1, 1, &mut rng)?;
        let shortcut = Seq::new(vec![Layer::conv(width, width, 1, sigma, &mut rng)?]);
        let head = Seq::new(vec![Layer::relu(), Layer::conv(width, 1, 1, 1, &mut rng)?]);
        let main = Seq::new(vec![
            pre,
            Layer::affine_norm(inner),
            Layer::relu(),
            slot_layer(slot, sigma, inner, seed)?,
            mid,
            Layer::affine_norm(inner),
            Layer::relu(),
            post,
        ]);
        Ok(MiniBottleneck {
            sigma,
            stem,
            main,
            shortcut,
            head,
            merged: None,
            logits_shape: None,
        })
    }

    /// Logits at full resolution (fixed bilinear upsampling of the head).
    pub fn forward(&mut self, x: &Tensor<f64>) -> Result<Tensor<f64>> {
        let s = self.stem.forward(x)?;
        let merged = self.main.forward(&s)?.add(&self.shortcut.forward(&s)?)?;
        let logits = self.head.forward(&merged)?;
        self.logits_shape = Some(logits.shape());
        self.merged = Some(merged);
        bilinear_up(&logits, self.sigma)
    }

    pub fn backward(&mut self, grad_out: &Tensor<f64>) -> Result<()> {
        let shape = self
            .logits_shape
            .ok_or_else(|| Error::Contract("backward called before forward".into()))?;
        let g_logits = bilinear_up_backward(grad_out, shape, self.sigma)?;
        let g = self.head.backward(&g_logits)?;
        let mut g_stem = self.main.backward(&g)?;
        g_stem.add_assign(&self.shortcut.backward(&g)?)?;
        self.stem.backward(&g_stem)?;
        Ok(())
    }
}

impl Trainable<f64> for MiniNet {
    fn visit_params(&mut self, f: &mut dyn FnMut(ParamView<'_, f64>)) {
        match self {
            MiniNet::Fpn(n) => {
                n.coarse.visit("coarse", f);
                n.slot.visit("up", f);
                n.lateral.visit("lateral", f);
                n.head.visit("head", f);
            }
            MiniNet::Bottleneck(n) => {
                n.stem.visit("stem", f);
                n.main.visit("main", f);
                n.shortcut.visit("shortcut", f);
                n.head.visit("head", f);
            }
        }
    }
}
