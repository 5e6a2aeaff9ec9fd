use std::path::Path;
use std::time::Instant;

use carafe_core::nn::{conv2d_forward_with, ConvLayerParams, ExecPath};
use carafe_core::{
    predict_kernels, CarafeConfig, CarafeParams, Direction, ResampleKind, ResampleOp, Scalar, Shape, Tensor,
};
use carafe_core::baselines::resample_forward;
use carafe_core::carafe::reassemble_with;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::Settings;
use crate::report::{csv_error, ensure_dir, out_dir, usage, write_json, Stanza};
use crate::{Failure, EXIT_OK};

pub const DEFAULT_OPERATORS: [&str; 2] = ["nearest_up", "carafe"];
pub const DEFAULT_SHAPE: [usize; 4] = [1, 64, 32, 32];
pub const CSV_HEADER: [&str; 7] = ["operator", "direction", "shape", "sigma", "median_ns", "p90_ns", "checksum"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

/// Resolved and validated bench settings.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchPlan {
    pub operators: Vec<String>,
    pub shape: [usize; 4],
    pub sigma: usize,
    pub warmup: usize,
    pub repetitions: usize,
    pub dtype: Dtype,
    pub exec: ExecPath,
    #[serde(skip)]
    pub carafe_up: CarafeConfig,
    #[serde(skip)]
    pub carafe_down: CarafeConfig,
}

/// One timed operator. Timings are kept out of the JSON report so reruns
/// compare equal; they go to the CSV.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub operator: String,
    pub direction: Direction,
    pub shape: String,
    pub sigma: usize,
    #[serde(skip)]
    pub median_ns: u128,
    #[serde(skip)]
    pub p90_ns: u128,
    pub checksum: String,
}

impl BenchPlan {
    pub fn resolve(s: &Settings) -> Result<Self, Failure> {
        let operators = s
            .operators
            .clone()
            .unwrap_or_else(|| DEFAULT_OPERATORS.iter().map(|o| o.to_string()).collect());
        let shape = s.shape.unwrap_or(DEFAULT_SHAPE);
        if shape.contains(&0) {
            return Err(usage(format!("shape dimensions must be positive, got {shape:?}")));
        }
        let warmup = s.warmup.unwrap_or(2);
        let repetitions = s.repetitions.unwrap_or(10);
        if warmup < 1 || repetitions < 1 {
            return Err(usage("warmup and repetitions must be at least 1"));
        }
        let dtype = match s.dtype.as_deref().unwrap_or("f64") {
            "f64" | "double" => Dtype::F64,
            "f32" | "single" => Dtype::F32,
            d => return Err(usage(format!("unknown dtype '{d}' (expected f64 or f32)"))),
        };
        let exec = match s.exec.as_deref().unwrap_or("blocked") {
            "blocked" => ExecPath::Blocked,
            "direct" => ExecPath::Direct,
            e => return Err(usage(format!("unknown exec path '{e}' (expected direct or blocked)"))),
        };
        let plan = BenchPlan {
            sigma: s.sigma.unwrap_or(2),
            carafe_up: s.carafe(Direction::Up)?,
            carafe_down: s.carafe(Direction::Down)?,
            operators,
            shape,
            warmup,
            repetitions,
            dtype,
            exec,
        };
        for op in &plan.operators {
            plan.operator_kind(op, s.direction)?;
        }
        Ok(plan)
    }

    fn operator_kind(&self, name: &str, direction: Option<Direction>) -> Result<OpKind, Failure> {
        Ok(match name {
            "conv3x3" => OpKind::Conv3x3,
            "carafe" => OpKind::Carafe(match direction.unwrap_or(Direction::Up) {
                Direction::Up => self.carafe_up,
                Direction::Down => self.carafe_down,
            }),
            "carafe_up" => OpKind::Carafe(self.carafe_up),
            "carafe_down" => OpKind::Carafe(self.carafe_down),
            other => OpKind::Resample(other.parse::<ResampleKind>().map_err(|_| {
                let mut known: Vec<&str> = ResampleKind::ALL.iter().map(|k| k.name()).collect();
                known.extend(["carafe", "carafe_up", "carafe_down", "conv3x3"]);
                usage(format!("unknown operator '{other}'; known: {}", known.join(", ")))
            })?),
        })
    }
}

#[derive(Debug, Clone, Copy)]
enum OpKind {
    Resample(ResampleKind),
    Carafe(CarafeConfig),
    Conv3x3,
}

/// 64-bit FNV-1a over the little-endian bits of every element, widened to f64.
pub fn checksum<T: Scalar>(t: &Tensor<T>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in t.data() {
        for b in v.as_f64().to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    h
}

/// Lower median and nearest-rank 90th percentile.
pub fn median_p90(mut ns: Vec<u128>) -> (u128, u128) {
    ns.sort_unstable();
    let n = ns.len();
    let p90 = (n * 9).div_ceil(10).max(1) - 1;
    (ns[(n - 1) / 2], ns[p90])
}

fn shape_label(s: [usize; 4]) -> String {
    s.map(|d| d.to_string()).join("x")
}

fn bench_one<T: Scalar>(plan: &BenchPlan, name: &str, kind: OpKind, seed: u64) -> Result<BenchRow, Failure> {
    let [n, c, h, w] = plan.shape;
    let shape = Shape::new(n, c, h, w)?;
    let x = Tensor::<T>::random_uniform(shape, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let exec = plan.exec;

    let (direction, sigma, mut f): (Direction, usize, Box<dyn FnMut() -> carafe_core::Result<Tensor<T>>>) = match kind {
        OpKind::Resample(k) => {
            let op = ResampleOp::<T>::new(k, plan.sigma, c, &mut rng).map_err(|e| usage(e.to_string()))?;
            (k.direction(), plan.sigma, Box::new(move || resample_forward(&op, &x)))
        }
        OpKind::Carafe(cfg) => {
            let params = CarafeParams::<T>::init(c, &cfg, &mut rng).map_err(|e| usage(e.to_string()))?;
            (
                cfg.direction,
                cfg.sigma,
                Box::new(move || {
                    let kf = predict_kernels(&x, &params, &cfg)?;
                    reassemble_with(&x, &kf, &cfg, exec)
                }),
            )
        }
        OpKind::Conv3x3 => {
            let p = ConvLayerParams::<T>::init_uniform(c, c, 3, &mut rng)?;
            (Direction::Down, 1, Box::new(move || conv2d_forward_with(&x, &p, 1, 1, exec)))
        }
    };

    for _ in 0..plan.warmup {
        f()?;
    }
    let mut times = Vec::with_capacity(plan.repetitions);
    let mut out = None;
    for _ in 0..plan.repetitions {
        let t0 = Instant::now();
        let y = f()?;
        times.push(t0.elapsed().as_nanos());
        out = Some(y);
    }
    let (median_ns, p90_ns) = median_p90(times);
    Ok(BenchRow {
        operator: name.to_string(),
        direction,
        shape: shape_label(plan.shape),
        sigma,
        median_ns,
        p90_ns,
        checksum: format!("{:016x}", checksum(&out.expect("at least one repetition"))),
    })
}

pub fn bench(settings: &Settings, plan: &BenchPlan) -> Result<Vec<BenchRow>, Failure> {
    plan.operators
        .iter()
        .map(|name| {
            let kind = plan.operator_kind(name, settings.direction)?;
            match plan.dtype {
                Dtype::F64 => bench_one::<f64>(plan, name, kind, settings.seed()),
                Dtype::F32 => bench_one::<f32>(plan, name, kind, settings.seed()),
            }
        })
        .collect()
}

pub fn write_csv(path: &Path, rows: &[BenchRow]) -> Result<(), Failure> {
    let mut wr = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    wr.write_record(CSV_HEADER).map_err(|e| csv_error(path, e))?;
    for r in rows {
        wr.write_record([
            r.operator.clone(),
            r.direction.to_string(),
            r.shape.clone(),
            r.sigma.to_string(),
            r.median_ns.to_string(),
            r.p90_ns.to_string(),
            r.checksum.clone(),
        ])
        .map_err(|e| csv_error(path, e))?;
    }
    wr.flush()?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct BenchResult<'a> {
    plan: &'a BenchPlan,
    rows: &'a [BenchRow],
}

pub fn run(settings: &Settings, threads: usize) -> Result<i32, Failure> {
    let plan = BenchPlan::resolve(settings)?;
    let rows = bench(settings, &plan)?;
    for r in &rows {
        println!(
            "{:<24} {:<4} {} sigma={} median={}ns p90={}ns checksum={}",
            r.operator, r.direction, r.shape, r.sigma, r.median_ns, r.p90_ns, r.checksum
        );
    }
    let dir = out_dir(settings);
    ensure_dir(&dir)?;
    write_csv(&dir.join("bench.csv"), &rows)?;
    write_json(
        &dir.join("bench.json"),
        &Stanza::new("bench", settings, threads),
        &BenchResult { plan: &plan, rows: &rows },
    )?;
    eprintln!("wrote {}", dir.join("bench.csv").display());
    Ok(EXIT_OK)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percentiles() {
        assert_eq!(median_p90(vec![7]), (7, 7));
        assert_eq!(median_p90((1..=10).rev().collect()), (5, 9));
        assert_eq!(median_p90(vec![3, 1]), (1, 3));
    }

    #[test]
    fn checksum_sees_every_bit() {
        let a = Tensor::<f64>::new([1, 1, 1, 2], 1.0).unwrap();
        let mut b = a.clone();
        b.data_mut()[1] = f64::from_bits(1.0f64.to_bits() + 1);
        assert_ne!(checksum(&a), checksum(&b));
        assert_eq!(checksum(&a), checksum(&a.clone()));
    }
}
