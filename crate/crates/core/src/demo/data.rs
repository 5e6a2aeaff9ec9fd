use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::baselines::avg_pool;
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Recover an image from its `sigma`-times average-pooled version.
    SuperRes,
    /// Fill a masked square back in.
    Inpaint,
    /// Two-class segmentation of noisy shapes.
    Seg2,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::SuperRes, TaskKind::Inpaint, TaskKind::Seg2];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::SuperRes => "super_res",
            TaskKind::Inpaint => "inpaint",
            TaskKind::Seg2 => "seg2",
        }
    }

    pub fn metric_name(self) -> &'static str {
        match self {
            TaskKind::Seg2 => "iou",
            _ => "psnr",
        }
    }
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown task '{s}' (expected super_res, inpaint or seg2)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct ToyTask {
    pub kind: TaskKind,
    pub size: usize,
    pub sigma: usize,
    pub seed: u64,
}

impl ToyTask {
    pub fn new(kind: TaskKind, size: usize, sigma: usize, seed: u64) -> Self {
        ToyTask { kind, size, sigma, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sigma < 1 {
            return Err(Error::Config("sigma must be at least 1".into()));
        }
        if self.size < 4 || !self.size.is_multiple_of(self.sigma) {
            return Err(Error::Config(format!(
                "image size {} must be at least 4 and divisible by sigma {}",
                self.size, self.sigma
            )));
        }
        Ok(())
    }

    pub fn input_shape(&self) -> Shape {
        let s = match self.kind {
            TaskKind::SuperRes => self.size / self.sigma,
            _ => self.size,
        };
        Shape::new(1, 1, s, s).expect("validated size")
    }

    pub fn target_shape(&self) -> Shape {
        Shape::new(1, 1, self.size, self.size).expect("validated size")
    }

    /// Same generator settings, different images.
    pub fn held_out(&self) -> Self {
        ToyTask {
            seed: self.seed ^ 0x5eed_0ff5_e7ee_1001,
            ..*self
        }
    }
}

/// One `(input, target)` pair, each of batch size 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub input: Tensor<f64>,
    pub target: Tensor<f64>,
}

enum Primitive {
    Rect { y0: f64, x0: f64, y1: f64, x1: f64 },
    Disk { cy: f64, cx: f64, r: f64 },
    Bar { c: f64, nx: f64, ny: f64, half: f64 },
}

impl Primitive {
    fn random(rng: &mut ChaCha8Rng, size: f64) -> Self {
        match rng.gen_range(0..3) {
            0 => {
                let (h, w) = (rng.gen_range(0.2..0.6) * size, rng.gen_range(0.2..0.6) * size);
                let y0 = rng.gen_range(-0.1 * size..size - 0.5 * h);
                let x0 = rng.gen_range(-0.1 * size..size - 0.5 * w);
                Primitive::Rect { y0, x0, y1: y0 + h, x1: x0 + w }
            }
            1 => Primitive::Disk {
                cy: rng.gen_range(0.1..0.9) * size,
                cx: rng.gen_range(0.1..0.9) * size,
                r: rng.gen_range(0.1..0.3) * size,
            },
            _ => {
                let angle = rng.gen_range(0.0..std::f64::consts::PI);
                let (ny, nx) = angle.sin_cos();
                let c = rng.gen_range(0.2..0.8) * size * (nx + ny);
                Primitive::Bar { c, nx, ny, half: rng.gen_range(0.05..0.15) * size }
            }
        }
    }

    fn contains(&self, y: f64, x: f64) -> bool {
        match *self {
            Primitive::Rect { y0, x0, y1, x1 } => y >= y0 && y < y1 && x >= x0 && x < x1,
            Primitive::Disk { cy, cx, r } => (y - cy).powi(2) + (x - cx).powi(2) <= r * r,
            Primitive::Bar { c, nx, ny, half } => (x * nx + y * ny - c).abs() <= half,
        }
    }
}

fn shapes_image(rng: &mut ChaCha8Rng, size: usize) -> Tensor<f64> {
    let s = size as f64;
    let base = rng.gen_range(0.1..0.4);
    let (gy, gx) = (rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2));
    let layers: Vec<(Primitive, f64)> = (0..rng.gen_range(2..5))
        .map(|_| (Primitive::random(rng, s), rng.gen_range(0.0..1.0)))
        .collect();
    Tensor::from_fn(Shape::new(1, 1, size, size).expect("size"), |_, _, i, j| {
        let (y, x) = (i as f64 + 0.5, j as f64 + 0.5);
        let mut v = base + gy * y / s + gx * x / s;
        for (p, tone) in &layers {
            if p.contains(y, x) {
                v = *tone;
            }
        }
        v.clamp(0.0, 1.0)
    })
}

fn sample(task: &ToyTask, rng: &mut ChaCha8Rng) -> Result<Sample> {
    let n = task.size;
    Ok(match task.kind {
        TaskKind::SuperRes => {
            let target = shapes_image(rng, n);
            Sample { input: avg_pool(&target, task.sigma)?, target }
        }
        TaskKind::Inpaint => {
            let target = shapes_image(rng, n);
            let side = (n / 4).max(2);
            let (top, left) = (rng.gen_range(0..=n - side), rng.gen_range(0..=n - side));
            let input = Tensor::from_fn(target.shape(), |b, c, i, j| {
                let hole = (top..top + side).contains(&i) && (left..left + side).contains(&j);
                if hole { 0.0 } else { target.get(b, c, i, j) }
            });
            Sample { input, target }
        }
        TaskKind::Seg2 => {
            let s = n as f64;
            let shapes: Vec<Primitive> = (0..rng.gen_range(1..4)).map(|_| Primitive::random(rng, s)).collect();
            let (fg, bg) = (rng.gen_range(0.55..0.8), rng.gen_range(0.2..0.45));
            let shape = Shape::new(1, 1, n, n)?;
            let target = Tensor::from_fn(shape, |_, _, i, j| {
                let (y, x) = (i as f64 + 0.5, j as f64 + 0.5);
                if shapes.iter().any(|p| p.contains(y, x)) { 1.0 } else { 0.0 }
            });
            let mut input = target.map(|t| if t > 0.5 { fg } else { bg });
            for v in input.data_mut() {
                *v = (*v + rng.gen_range(-0.25f64..0.25)).clamp(0.0, 1.0);
            }
            Sample { input, target }
        }
    })
}

/// `count` samples, a pure function of `task` (kind, size, sigma, seed).
pub fn make_dataset(task: &ToyTask, count: usize) -> Result<Vec<Sample>> {
    task.validate()?;
    if count == 0 {
        return Err(Error::Config("dataset needs at least one sample".into()));
    }
    let stream = match task.kind {
        TaskKind::SuperRes => 1,
        TaskKind::Inpaint => 2,
        TaskKind::Seg2 => 3,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(task.seed);
    rng.set_stream(stream);
    (0..count).map(|_| sample(task, &mut rng)).collect()
}

/// Stacks samples along the batch axis.
pub fn stack(samples: &[&Tensor<f64>]) -> Result<Tensor<f64>> {
    let first = samples.first().ok_or_else(|| Error::shape("cannot stack zero tensors"))?.shape();
    let mut data = Vec::with_capacity(first.len() * samples.len());
    for t in samples {
        t.expect_shape(first, "stacked sample")?;
        data.extend_from_slice(t.data());
    }
    Tensor::from_vec([samples.len() * first.n, first.c, first.h, first.w], data)
}
