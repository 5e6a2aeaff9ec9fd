//! Run settings. Every field is optional so a JSON config file and command
//! line flags can be layered: file first, flags on top, defaults last.

use std::path::{Path, PathBuf};

use carafe_core::demo::{TaskKind, ToyTask, TrainOptions};
use carafe_core::{CarafeConfig, Direction, Normalizer};
use serde::{Deserialize, Serialize};

use crate::UsageError;

pub const THREADS_ENV: &str = "CARAFE_THREADS";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Settings {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub out: Option<PathBuf>,

    pub direction: Option<Direction>,
    pub sigma: Option<usize>,
    pub k_encoder: Option<usize>,
    pub k_reassembly: Option<usize>,
    pub c_mid: Option<usize>,
    pub normalizer: Option<Normalizer>,
    pub compressor_norm: Option<bool>,

    pub task: Option<TaskKind>,
    pub size: Option<usize>,
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
    pub momentum: Option<f64>,
    pub weight_decay: Option<f64>,
    pub batch_size: Option<usize>,
    pub train_samples: Option<usize>,
    pub eval_samples: Option<usize>,
    pub width: Option<usize>,
    pub operators: Option<Vec<String>>,
    pub seeds: Option<Vec<u64>>,

    pub ops: Option<Vec<String>>,
    pub tol: Option<f64>,

    pub shape: Option<[usize; 4]>,
    pub warmup: Option<usize>,
    pub repetitions: Option<usize>,
    pub dtype: Option<String>,
    pub exec: Option<String>,

    pub c_mids: Option<Vec<usize>>,
    pub kernels: Option<Vec<[usize; 2]>>,
    pub normalizers: Option<Vec<Normalizer>>,
}

macro_rules! overlay {
    ($base:ident, $top:ident; $($f:ident),* $(,)?) => {
        $( if $top.$f.is_some() { $base.$f = $top.$f; } )*
    };
}

impl Settings {
    pub fn from_file(path: &Path) -> Result<Self, UsageError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| UsageError(format!("bad config {}: {e}", path.display())))
    }

    /// Fields set in `top` replace those in `self`.
    pub fn overlay(mut self, top: Settings) -> Self {
        overlay!(self, top;
            seed, threads, out, direction, sigma, k_encoder, k_reassembly, c_mid, normalizer,
            compressor_norm, task, size, epochs, lr, momentum, weight_decay, batch_size,
            train_samples, eval_samples, width, operators, seeds, ops, tol, shape, warmup,
            repetitions, dtype, exec, c_mids, kernels, normalizers,
        );
        self
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    /// Flag or config file, then `CARAFE_THREADS`, then every available core.
    pub fn threads(&self) -> Result<usize, UsageError> {
        let n = match self.threads {
            Some(n) => n,
            None => match std::env::var(THREADS_ENV) {
                Ok(v) => v
                    .trim()
                    .parse()
                    .map_err(|_| UsageError(format!("{THREADS_ENV}={v:?} is not a thread count")))?,
                Err(_) => std::thread::available_parallelism().map_or(1, |n| n.get()),
            },
        };
        if n == 0 {
            return Err(UsageError("thread count must be at least 1".into()));
        }
        Ok(n)
    }

    pub fn carafe(&self, direction: Direction) -> Result<CarafeConfig, UsageError> {
        let mut c = CarafeConfig::new(direction, self.sigma.unwrap_or(2));
        if let Some(k) = self.k_encoder {
            c.k_encoder = k;
        }
        if let Some(k) = self.k_reassembly {
            c.k_reassembly = k;
        }
        if let Some(m) = self.c_mid {
            c.c_mid = m;
        }
        if let Some(n) = self.normalizer {
            c.normalizer = n;
        }
        if let Some(on) = self.compressor_norm {
            c.compressor_norm = on;
        }
        c.validate().map_err(|e| UsageError(e.to_string()))?;
        Ok(c)
    }

    pub fn task(&self) -> Result<ToyTask, UsageError> {
        let t = ToyTask::new(
            self.task.unwrap_or(TaskKind::SuperRes),
            self.size.unwrap_or(16),
            self.sigma.unwrap_or(2),
            self.seed(),
        );
        t.validate().map_err(|e| UsageError(e.to_string()))?;
        Ok(t)
    }

    pub fn train_options(&self) -> Result<TrainOptions, UsageError> {
        let d = TrainOptions::default();
        let o = TrainOptions {
            epochs: self.epochs.unwrap_or(d.epochs),
            lr: self.lr.unwrap_or(d.lr),
            momentum: self.momentum.unwrap_or(d.momentum),
            weight_decay: self.weight_decay.unwrap_or(d.weight_decay),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            train_samples: self.train_samples.unwrap_or(d.train_samples),
            eval_samples: self.eval_samples.unwrap_or(d.eval_samples),
            width: self.width.unwrap_or(d.width),
            seed: self.seed(),
        };
        o.validate().map_err(|e| UsageError(e.to_string()))?;
        Ok(o)
    }
}

/// `"3:5"` into `[3, 5]`.
pub fn parse_kernel_pair(s: &str) -> Result<[usize; 2], String> {
    let (a, b) = s
        .split_once(':')
        .ok_or_else(|| format!("expected k_encoder:k_reassembly, got {s:?}"))?;
    let p = |v: &str| v.trim().parse::<usize>().map_err(|_| format!("bad kernel size {v:?} in {s:?}"));
    Ok([p(a)?, p(b)?])
}

/// `"1,64,32,32"` into a shape.
pub fn parse_shape(s: &str) -> Result<[usize; 4], String> {
    let v: Vec<usize> = s
        .split(',')
        .map(|d| d.trim().parse().map_err(|_| format!("bad dimension {d:?} in {s:?}")))
        .collect::<Result<_, _>>()?;
    v.try_into().map_err(|v: Vec<usize>| format!("shape needs 4 dimensions, got {}", v.len()))
}
