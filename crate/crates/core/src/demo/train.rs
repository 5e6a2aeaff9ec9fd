use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::data::{make_dataset, stack, Sample, TaskKind, ToyTask};
use super::net::{MiniNet, SlotSpec, DEFAULT_WIDTH};
use crate::error::{Error, Result};
use crate::nn::{Sgd, Trainable};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct TrainOptions {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub train_samples: usize,
    pub eval_samples: usize,
    pub width: usize,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: 10,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 8,
            train_samples: 64,
            eval_samples: 32,
            width: DEFAULT_WIDTH,
            seed: 0,
        }
    }
}

impl TrainOptions {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.train_samples == 0 || self.eval_samples == 0 {
            return Err(Error::Config(
                "epochs, batch size and sample counts must be positive".into(),
            ));
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::Config(format!("learning rate must be finite and >= 0, got {}", self.lr)));
        }
        if self.width == 0 {
            return Err(Error::Config("width must be positive".into()));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.train_samples.div_ceil(self.batch_size)
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainRunReport {
    pub operator: String,
    pub task: ToyTask,
    pub seed: u64,
    pub options: TrainOptions,
    pub param_count: usize,
    /// Mean training loss of each epoch.
    pub epoch_losses: Vec<f64>,
    /// Loss of every optimizer step, in order.
    pub step_losses: Vec<f64>,
    pub eval_loss: f64,
    pub metric: String,
    pub final_metric: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub wall_time_ms: Option<f64>,
}

/// Loss value and its gradient with respect to the network output.
pub fn loss_and_grad(kind: TaskKind, out: &Tensor<f64>, target: &Tensor<f64>) -> Result<(f64, Tensor<f64>)> {
    out.expect_shape(target.shape(), "network output")?;
    let n = out.len() as f64;
    match kind {
        TaskKind::SuperRes | TaskKind::Inpaint => {
            let diff = out.sub(target)?;
            let loss = diff.data().iter().map(|d| d * d).sum::<f64>() / n;
            Ok((loss, diff.scale(2.0 / n)))
        }
        TaskKind::Seg2 => {
            let loss = out
                .data()
                .iter()
                .zip(target.data())
                .map(|(&o, &t)| o.max(0.0) - o * t + (-o.abs()).exp().ln_1p())
                .sum::<f64>()
                / n;
            let grad = out.zip_map(target, |o, t| (1.0 / (1.0 + (-o).exp()) - t) / n)?;
            Ok((loss, grad))
        }
    }
}

/// Mean per-image PSNR in dB for unit-range images.
pub fn psnr(out: &Tensor<f64>, target: &Tensor<f64>) -> Result<f64> {
    out.expect_shape(target.shape(), "prediction")?;
    let s = out.shape();
    let per = s.c * s.plane();
    let mut total = 0.0;
    for (o, t) in out.data().chunks(per).zip(target.data().chunks(per)) {
        let mse = o.iter().zip(t).map(|(a, b)| (a.clamp(0.0, 1.0) - b).powi(2)).sum::<f64>() / per as f64;
        total += 10.0 * (1.0 / mse.max(1e-10)).log10();
    }
    Ok(total / s.n as f64)
}

/// Foreground IoU of `logits > 0` against a binary target, pooled over the batch.
pub fn iou(logits: &Tensor<f64>, target: &Tensor<f64>) -> Result<f64> {
    logits.expect_shape(target.shape(), "prediction")?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&o, &t) in logits.data().iter().zip(target.data()) {
        let (p, t) = (o > 0.0, t > 0.5);
        inter += (p && t) as usize;
        union += (p || t) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

fn batches(samples: &[Sample], order: &[usize], size: usize) -> Result<Vec<(Tensor<f64>, Tensor<f64>)>> {
    order
        .chunks(size)
        .map(|idx| {
            let inputs: Vec<&Tensor<f64>> = idx.iter().map(|&i| &samples[i].input).collect();
            let targets: Vec<&Tensor<f64>> = idx.iter().map(|&i| &samples[i].target).collect();
            Ok((stack(&inputs)?, stack(&targets)?))
        })
        .collect()
}

/// Loss and task metric on `samples`, batched in order.
pub fn evaluate(net: &mut MiniNet, kind: TaskKind, samples: &[Sample], batch_size: usize) -> Result<(f64, f64)> {
    let order: Vec<usize> = (0..samples.len()).collect();
    let (mut outs, mut targets) = (Vec::new(), Vec::new());
    let mut loss = 0.0;
    for (x, t) in batches(samples, &order, batch_size)? {
        let out = net.forward(&x)?;
        loss += loss_and_grad(kind, &out, &t)?.0 * x.shape().n as f64;
        outs.push(out);
        targets.push(t);
    }
    let out = stack(&outs.iter().collect::<Vec<_>>())?;
    let target = stack(&targets.iter().collect::<Vec<_>>())?;
    let metric = match kind {
        TaskKind::Seg2 => iou(&out, &target)?,
        _ => psnr(&out, &target)?,
    };
    Ok((loss / samples.len() as f64, metric))
}

/// Minibatch SGD on a fresh dataset drawn from `task`; the held-out split
/// gives the final metric.
pub fn train(net: &mut MiniNet, operator: &str, task: &ToyTask, opts: &TrainOptions) -> Result<TrainRunReport> {
    opts.validate()?;
    let train_set = make_dataset(task, opts.train_samples)?;
    let eval_set = make_dataset(&task.held_out(), opts.eval_samples)?;
    let sgd = Sgd {
        lr: opts.lr,
        momentum: opts.momentum,
        weight_decay: opts.weight_decay,
    };
    // Batch membership is fixed for the run and only the visiting order is
    // reshuffled; batch statistics in affine_norm then see the same batches
    // every epoch.
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    order.shuffle(&mut rng);
    let train_batches = batches(&train_set, &order, opts.batch_size)?;
    let mut visit: Vec<usize> = (0..train_batches.len()).collect();
    let (mut epoch_losses, mut step_losses) = (Vec::new(), Vec::new());
    let mut batch_loss = vec![0.0; train_batches.len()];
    for epoch in 0..opts.epochs {
        visit.shuffle(&mut rng);
        for (step, &bi) in visit.iter().enumerate() {
            let (x, t) = &train_batches[bi];
            net.zero_grad();
            let out = net.forward(x)?;
            let (loss, grad) = loss_and_grad(task.kind, &out, t)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, step, loss });
            }
            net.backward(&grad)?;
            sgd.step(net);
            batch_loss[bi] = loss * x.shape().n as f64;
            step_losses.push(loss);
        }
        epoch_losses.push(batch_loss.iter().sum::<f64>() / train_set.len() as f64);
    }
    let (eval_loss, final_metric) = evaluate(net, task.kind, &eval_set, opts.batch_size)?;
    if !eval_loss.is_finite() {
        return Err(Error::Diverged {
            epoch: opts.epochs,
            step: 0,
            loss: eval_loss,
        });
    }
    Ok(TrainRunReport {
        operator: operator.to_string(),
        task: *task,
        seed: opts.seed,
        options: *opts,
        param_count: net.param_count(),
        epoch_losses,
        step_losses,
        eval_loss,
        metric: task.kind.metric_name().to_string(),
        final_metric,
        wall_time_ms: None,
    })
}

/// Builds the task's network around `slot` and trains it.
pub fn train_with_slot(task: &ToyTask, slot: SlotSpec, opts: &TrainOptions) -> Result<TrainRunReport> {
    let mut net = MiniNet::for_task(task, slot, opts.width, opts.seed)?;
    train(&mut net, &slot.name(), task, opts)
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ComparisonRow {
    pub operator: String,
    pub metric: String,
    pub per_seed: Vec<f64>,
    pub mean: f64,
    pub sd: f64,
    /// `mean - baseline mean`, where the baseline is the first roster entry.
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ComparisonTable {
    pub task: ToyTask,
    pub seeds: Vec<u64>,
    pub baseline: String,
    pub rows: Vec<ComparisonRow>,
}

/// Sample mean and standard deviation (n - 1 denominator, 0 for one value).
pub fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Trains every roster entry on every seed with the same options; task data
/// and all non-slot initial weights depend on the seed only.
pub fn compare_operators(
    task: &ToyTask,
    roster: &[SlotSpec],
    seeds: &[u64],
    opts: &TrainOptions,
) -> Result<ComparisonTable> {
    if roster.is_empty() || seeds.is_empty() {
        return Err(Error::Config("roster and seeds must be nonempty".into()));
    }
    let mut rows = Vec::new();
    for slot in roster {
        let mut per_seed = Vec::new();
        for &seed in seeds {
            let t = ToyTask { seed, ..*task };
            let report = train_with_slot(&t, *slot, &TrainOptions { seed, ..*opts })?;
            per_seed.push(report.final_metric);
        }
        let (mean, sd) = mean_sd(&per_seed);
        rows.push(ComparisonRow {
            operator: slot.name(),
            metric: task.kind.metric_name().to_string(),
            per_seed,
            mean,
            sd,
            delta: 0.0,
        });
    }
    let base = rows[0].mean;
    rows.iter_mut().for_each(|r| r.delta = r.mean - base);
    Ok(ComparisonTable {
        task: *task,
        seeds: seeds.to_vec(),
        baseline: rows[0].operator.clone(),
        rows,
    })
}
