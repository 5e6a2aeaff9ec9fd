use std::path::PathBuf;

use carafe_core::demo::TaskKind;
use carafe_core::{Direction, Normalizer};
use clap::{Args, Parser, Subcommand};

use crate::config::{parse_kernel_pair, parse_shape, Settings};
use crate::{bench, gradcheck, sweep, train, Failure, UsageError};

#[derive(Debug, Parser)]
#[command(name = "carafe", version, about = "Content-aware feature reassembly: checks, benchmarks and toy experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compare analytic gradients of registered ops with finite differences.
    Gradcheck(GradcheckArgs),
    /// Time resampling operators and print output checksums.
    Bench(BenchArgs),
    /// Train toy networks with a chosen resampler in the slot.
    Train(TrainArgs),
    /// Train one CARAFE network per cell of a C_m x kernel x normalizer grid.
    Sweep(SweepArgs),
}

#[derive(Debug, Args, Default)]
pub struct CommonArgs {
    /// JSON file with settings; flags override it.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads [env: CARAFE_THREADS].
    #[arg(long)]
    pub threads: Option<usize>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Default)]
pub struct CarafeArgs {
    #[arg(long)]
    pub direction: Option<Direction>,
    #[arg(long)]
    pub sigma: Option<usize>,
    #[arg(long)]
    pub k_encoder: Option<usize>,
    #[arg(long)]
    pub k_reassembly: Option<usize>,
    #[arg(long)]
    pub c_mid: Option<usize>,
    #[arg(long)]
    pub normalizer: Option<Normalizer>,
    /// Normalize and rectify the compressed features.
    #[arg(long)]
    pub compressor_norm: Option<bool>,
}

#[derive(Debug, Args, Default)]
pub struct TaskArgs {
    /// super_res, inpaint or seg2.
    #[arg(long)]
    pub task: Option<TaskKind>,
    /// Side length of the target images.
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub train_samples: Option<usize>,
    #[arg(long)]
    pub eval_samples: Option<usize>,
    /// Channel width of the toy network.
    #[arg(long)]
    pub width: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Registered op to check; repeatable. Default: all.
    #[arg(long = "op", value_delimiter = ',')]
    pub ops: Vec<String>,
    /// Largest accepted relative error.
    #[arg(long)]
    pub tol: Option<f64>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub carafe: CarafeArgs,
    /// Operators to time; repeatable. Default: nearest_up,carafe.
    #[arg(long = "operator", value_delimiter = ',')]
    pub operators: Vec<String>,
    /// Input shape as n,c,h,w.
    #[arg(long, value_parser = parse_shape)]
    pub shape: Option<[usize; 4]>,
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long)]
    pub repetitions: Option<usize>,
    /// f64 or f32.
    #[arg(long)]
    pub dtype: Option<String>,
    /// direct or blocked.
    #[arg(long)]
    pub exec: Option<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub carafe: CarafeArgs,
    #[command(flatten)]
    pub task: TaskArgs,
    /// Resampler in the slot; repeatable. Default: carafe.
    #[arg(long = "operator", value_delimiter = ',')]
    pub operators: Vec<String>,
    /// Seeds to train; repeatable. Default: the --seed value.
    #[arg(long = "seeds", value_delimiter = ',')]
    pub seeds: Vec<u64>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub carafe: CarafeArgs,
    #[command(flatten)]
    pub task: TaskArgs,
    /// Compressed channel counts to sweep.
    #[arg(long = "c-mids", value_delimiter = ',')]
    pub c_mids: Vec<usize>,
    /// Kernel pairs k_encoder:k_reassembly to sweep.
    #[arg(long = "kernels", value_delimiter = ',', value_parser = parse_kernel_pair)]
    pub kernels: Vec<[usize; 2]>,
    /// Normalizers to sweep.
    #[arg(long = "normalizers", value_delimiter = ',')]
    pub normalizers: Vec<Normalizer>,
}

fn nonempty<T>(v: Vec<T>) -> Option<Vec<T>> {
    (!v.is_empty()).then_some(v)
}

impl CommonArgs {
    fn settings(&self) -> Result<Settings, UsageError> {
        let file = match &self.config {
            Some(p) => Settings::from_file(p)?,
            None => Settings::default(),
        };
        Ok(file.overlay(Settings {
            seed: self.seed,
            threads: self.threads,
            out: self.out.clone(),
            ..Settings::default()
        }))
    }
}

impl CarafeArgs {
    fn apply(self, s: &mut Settings) {
        *s = std::mem::take(s).overlay(Settings {
            direction: self.direction,
            sigma: self.sigma,
            k_encoder: self.k_encoder,
            k_reassembly: self.k_reassembly,
            c_mid: self.c_mid,
            normalizer: self.normalizer,
            compressor_norm: self.compressor_norm,
            ..Settings::default()
        });
    }
}

impl TaskArgs {
    fn apply(self, s: &mut Settings) {
        *s = std::mem::take(s).overlay(Settings {
            task: self.task,
            size: self.size,
            epochs: self.epochs,
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
            train_samples: self.train_samples,
            eval_samples: self.eval_samples,
            width: self.width,
            ..Settings::default()
        });
    }
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Gradcheck(_) => "gradcheck",
            Command::Bench(_) => "bench",
            Command::Train(_) => "train",
            Command::Sweep(_) => "sweep",
        }
    }

    /// Config file merged with the flags of this subcommand.
    pub fn settings(self) -> Result<Settings, UsageError> {
        match self {
            Command::Gradcheck(a) => {
                let mut s = a.common.settings()?;
                s = s.overlay(Settings { ops: nonempty(a.ops), tol: a.tol, ..Settings::default() });
                Ok(s)
            }
            Command::Bench(a) => {
                let mut s = a.common.settings()?;
                a.carafe.apply(&mut s);
                Ok(s.overlay(Settings {
                    operators: nonempty(a.operators),
                    shape: a.shape,
                    warmup: a.warmup,
                    repetitions: a.repetitions,
                    dtype: a.dtype,
                    exec: a.exec,
                    ..Settings::default()
                }))
            }
            Command::Train(a) => {
                let mut s = a.common.settings()?;
                a.carafe.apply(&mut s);
                a.task.apply(&mut s);
                Ok(s.overlay(Settings {
                    operators: nonempty(a.operators),
                    seeds: nonempty(a.seeds),
                    ..Settings::default()
                }))
            }
            Command::Sweep(a) => {
                let mut s = a.common.settings()?;
                a.carafe.apply(&mut s);
                a.task.apply(&mut s);
                Ok(s.overlay(Settings {
                    c_mids: nonempty(a.c_mids),
                    kernels: nonempty(a.kernels),
                    normalizers: nonempty(a.normalizers),
                    ..Settings::default()
                }))
            }
        }
    }
}

/// Runs a parsed command line on a thread pool sized from the settings.
pub fn dispatch(cli: Cli) -> Result<i32, Failure> {
    let name = cli.command.name();
    let settings = cli.command.settings()?;
    execute(name, &settings)
}

/// Runs subcommand `name` with already merged settings.
pub fn execute(name: &str, settings: &Settings) -> Result<i32, Failure> {
    let threads = settings.threads()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Failure::Run(format!("cannot start thread pool: {e}")))?;
    pool.install(|| match name {
        "gradcheck" => gradcheck::run(settings, threads),
        "bench" => bench::run(settings, threads),
        "train" => train::run(settings, threads),
        "sweep" => sweep::run(settings, threads),
        other => Err(UsageError(format!("unknown subcommand '{other}'")).into()),
    })
}
