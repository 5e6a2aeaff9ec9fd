//! Acceptance suite: one line per criterion, nonzero exit if any fails.

use std::path::Path;
use std::time::{Duration, Instant};

use carafe_cli::config::Settings;
use carafe_core::demo::{compare_operators, ComparisonTable, SlotSpec, TaskKind, ToyTask, TrainOptions};
use carafe_core::gradcheck::{registry, run_registered};
use carafe_core::io::{decode_tensor, encode_tensor, load_pgm, load_tensor, save_pgm, save_tensor};
use carafe_core::nn::{conv2d_forward_with, ConvLayerParams, ExecPath};
use carafe_core::carafe::reassemble_with;
use carafe_core::{
    carafe_forward, map_target_to_source, predict_kernels, reassemble, CarafeConfig, CarafeParams, Direction,
    KernelField, Normalizer, ResampleKind, Scalar, Shape, Tensor,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond { Ok(()) } else { Err(msg()) }
}

fn random_shape(r: &mut ChaCha8Rng, max_c: usize, max_hw: usize) -> Shape {
    Shape::new(r.gen_range(1..=2), r.gen_range(1..=max_c), r.gen_range(1..=max_hw), r.gen_range(1..=max_hw)).unwrap()
}

fn kernel_sums_ok<T: Scalar>(dir: Direction, cases: usize, tol: f64, seed: u64) -> Result<f64, String> {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for case in 0..cases {
        let cfg = CarafeConfig::new(dir, r.gen_range(1..=3)).with_c_mid(r.gen_range(1..=8));
        let x = Tensor::<T>::random_uniform(random_shape(&mut r, 4, 9), -2.0, 2.0, &mut r);
        let p = CarafeParams::<T>::init(x.shape().c, &cfg, &mut r).map_err(|e| e.to_string())?;
        let kf = predict_kernels(&x, &p, &cfg).map_err(|e| e.to_string())?;
        let k = kf.tensor();
        let s = k.shape();
        ensure(s.c == cfg.k_reassembly * cfg.k_reassembly, || format!("case {case}: {} taps", s.c))?;
        for b in 0..s.n {
            for i in 0..s.h {
                for j in 0..s.w {
                    let mut sum = 0.0;
                    for t in 0..s.c {
                        let v = k.get(b, t, i, j).as_f64();
                        ensure(v > 0.0, || format!("case {case}: kernel entry {v} at ({b},{t},{i},{j})"))?;
                        sum += v;
                    }
                    worst = worst.max((sum - 1.0).abs());
                }
            }
        }
        ensure(worst <= tol, || format!("case {case}: kernel sum off by {worst:e}"))?;
    }
    Ok(worst)
}

fn c1_kernel_normalization() -> Outcome {
    let mut parts = Vec::new();
    for (dir, seed) in [(Direction::Down, 10), (Direction::Up, 11)] {
        let d = kernel_sums_ok::<f64>(dir, 100, 1e-12, seed)?;
        let s = kernel_sums_ok::<f32>(dir, 100, 1e-6, seed + 100)?;
        parts.push(format!("{dir}: max |sum-1| {d:.1e} (f64), {s:.1e} (f32)"));
    }
    Ok(format!("100 inputs per direction and dtype, all entries > 0; {}", parts.join("; ")))
}

fn c2_shape_contracts() -> Outcome {
    let mut r = rng(20);
    let mut checked = 0;
    for sigma in 1..=4 {
        for dir in [Direction::Down, Direction::Up] {
            let cfg = CarafeConfig::new(dir, sigma).with_c_mid(2);
            let p = CarafeParams::<f64>::init(1, &cfg, &mut r).unwrap();
            for h in 1..=9 {
                for w in 1..=9 {
                    let x = Tensor::<f64>::random_uniform(Shape::new(1, 1, h, w).unwrap(), -1.0, 1.0, &mut r);
                    let (y, _) = carafe_forward(&x, &p, &cfg).map_err(|e| e.to_string())?;
                    let want = match dir {
                        Direction::Down => (h.div_ceil(sigma), w.div_ceil(sigma)),
                        Direction::Up => (sigma * h, sigma * w),
                    };
                    let s = y.shape();
                    ensure((s.h, s.w) == want && s.c == 1 && s.n == 1, || {
                        format!("{dir} sigma {sigma} on {h}x{w}: got {}x{}, want {}x{}", s.h, s.w, want.0, want.1)
                    })?;
                    checked += 1;
                }
            }
        }
    }
    Ok(format!("{checked} (sigma, H, W, direction) combinations"))
}

fn nearest_oracle(x: &Tensor<f64>, sigma: usize) -> Tensor<f64> {
    let s = x.shape();
    Tensor::from_fn(Shape::new(s.n, s.c, s.h * sigma, s.w * sigma).unwrap(), |b, c, i, j| {
        x.get(b, c, i / sigma, j / sigma)
    })
}

fn decimate_oracle(x: &Tensor<f64>, sigma: usize) -> Tensor<f64> {
    let s = x.shape();
    Tensor::from_fn(Shape::new(s.n, s.c, s.h.div_ceil(sigma), s.w.div_ceil(sigma)).unwrap(), |b, c, i, j| {
        x.get(b, c, i * sigma, j * sigma)
    })
}

/// Zero-padded k x k average at stride sigma, divisor always k^2.
fn box_oracle(x: &Tensor<f64>, k: usize, sigma: usize) -> Tensor<f64> {
    let s = x.shape();
    let r = (k / 2) as isize;
    Tensor::from_fn(Shape::new(s.n, s.c, s.h.div_ceil(sigma), s.w.div_ceil(sigma)).unwrap(), |b, c, i, j| {
        let mut acc = 0.0;
        for di in -r..=r {
            for dj in -r..=r {
                let (y, xx) = ((i * sigma) as isize + di, (j * sigma) as isize + dj);
                if (0..s.h as isize).contains(&y) && (0..s.w as isize).contains(&xx) {
                    acc += x.get(b, c, y as usize, xx as usize);
                }
            }
        }
        acc / (k * k) as f64
    })
}

fn rule_based(x: &Tensor<f64>, dir: Direction, sigma: usize) -> Tensor<f64> {
    match dir {
        Direction::Down => decimate_oracle(x, sigma),
        Direction::Up => nearest_oracle(x, sigma),
    }
}

fn c3_reductions() -> Outcome {
    let mut r = rng(30);
    let mut worst_box: f64 = 0.0;
    let mut cases = 0;
    for dir in [Direction::Down, Direction::Up] {
        for sigma in 1..=4 {
            for _ in 0..5 {
                let x = Tensor::<f64>::random_uniform(random_shape(&mut r, 3, 9), -1.0, 1.0, &mut r);
                let want = rule_based(&x, dir, sigma);

                let cfg = CarafeConfig::new(dir, sigma).with_kernels(3, 1).with_c_mid(4);
                let p = CarafeParams::<f64>::init(x.shape().c, &cfg, &mut r).unwrap();
                let (y, _) = carafe_forward(&x, &p, &cfg).map_err(|e| e.to_string())?;
                ensure(y == want, || format!("(a) k_reassembly=1 {dir} sigma {sigma} differs from oracle"))?;

                let cfg5 = CarafeConfig::new(dir, sigma);
                let (oh, ow) = cfg5.output_size(x.shape().h, x.shape().w);
                let delta = Tensor::from_fn(Shape::new(x.shape().n, 25, oh, ow).unwrap(), |_, t, _, _| {
                    if t == 12 { 1.0 } else { 0.0 }
                });
                let kf = KernelField::from_weights(delta, 5).map_err(|e| e.to_string())?;
                let y = reassemble(&x, &kf, &cfg5).map_err(|e| e.to_string())?;
                ensure(y == want, || format!("(c) delta kernels {dir} sigma {sigma} differ from oracle"))?;

                if dir == Direction::Down {
                    for k in [3, 5, 7] {
                        let cfg = CarafeConfig::down(sigma).with_kernels(3, k);
                        let mut p = CarafeParams::<f64>::init(x.shape().c, &cfg, &mut r).unwrap();
                        p.zero_encoder();
                        let (y, _) = carafe_forward(&x, &p, &cfg).map_err(|e| e.to_string())?;
                        let d = y.max_abs_diff(&box_oracle(&x, k, sigma)).map_err(|e| e.to_string())?;
                        worst_box = worst_box.max(d);
                    }
                }
                cases += 1;
            }
        }
    }
    ensure(worst_box < 1e-12, || format!("(b) zero encoder vs box filter: max diff {worst_box:e}"))?;
    Ok(format!(
        "{cases} inputs: (a) and (c) exact; (b) max diff vs box oracle {worst_box:.1e}"
    ))
}

fn c4_constant_preservation() -> Outcome {
    let mut r = rng(40);
    let mut worst: f64 = 0.0;
    let mut interior = 0usize;
    for dir in [Direction::Down, Direction::Up] {
        for sigma in 1..=3 {
            for _ in 0..6 {
                let cfg = CarafeConfig::new(dir, sigma).with_c_mid(r.gen_range(2..=8));
                let (h, w) = (r.gen_range(9..=13), r.gen_range(9..=13));
                let c = r.gen_range(1..=3);
                let value = r.gen_range(-3.0..3.0);
                let x = Tensor::<f64>::new([1, c, h, w], value).unwrap();
                let mut p = CarafeParams::<f64>::init(c, &cfg, &mut r).unwrap();
                p.encoder.bias.iter_mut().for_each(|b| *b = r.gen_range(-1.0..1.0));
                let (y, _) = carafe_forward(&x, &p, &cfg).map_err(|e| e.to_string())?;
                let rad = cfg.radius();
                let s = y.shape();
                for i in 0..s.h {
                    for j in 0..s.w {
                        let (si, sj) = map_target_to_source((i, j), &cfg);
                        if si < rad || sj < rad || si + rad >= h || sj + rad >= w {
                            continue;
                        }
                        interior += 1;
                        for ch in 0..c {
                            worst = worst.max((y.get(0, ch, i, j) - value).abs());
                        }
                    }
                }
            }
        }
    }
    ensure(interior > 0, || "no interior locations tested".into())?;
    ensure(worst < 1e-12, || format!("max interior error {worst:e}"))?;
    Ok(format!("{interior} interior locations, max error {worst:.1e}"))
}

fn c5_gradient_exactness() -> Outcome {
    let tol = 1e-5;
    let mut worst = (String::new(), 0.0f64);
    let ops = registry();
    for op in &ops {
        let rep = run_registered(op, 0, tol).map_err(|e| format!("{}: {e}", op.name))?;
        ensure(rep.pass, || {
            format!("{} max rel error {:e} at {:?}", op.name, rep.max_rel_error, rep.worst_index)
        })?;
        if rep.max_rel_error > worst.1 {
            worst = (op.name.to_string(), rep.max_rel_error);
        }
    }
    for name in ["carafe_down", "carafe_up"] {
        ensure(ops.iter().any(|o| o.name == name), || format!("{name} is not registered"))?;
    }
    Ok(format!(
        "{} ops incl. carafe_down/carafe_up on (1,3,6,6), k_enc 3, k_re 5, C_m 4; worst {} at {:.1e}",
        ops.len(),
        worst.0,
        worst.1
    ))
}

fn bitwise_eq(a: &Tensor<f64>, b: &Tensor<f64>) -> bool {
    a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn c6_implementation_equivalence() -> Outcome {
    let mut r = rng(60);
    for case in 0..50 {
        let k = [1, 3, 5][r.gen_range(0..3)];
        let x = Tensor::<f64>::random_uniform(random_shape(&mut r, 5, 12), -1.0, 1.0, &mut r);
        let s = x.shape();
        if s.h + 2 * (k / 2) < k || s.w + 2 * (k / 2) < k {
            continue;
        }
        let mut p = ConvLayerParams::<f64>::init_uniform(r.gen_range(1..=5), s.c, k, &mut r).unwrap();
        p.bias.iter_mut().for_each(|b| *b = r.gen_range(-1.0..1.0));
        let (stride, pad) = (r.gen_range(1..=3), r.gen_range(0..=k / 2));
        let d = conv2d_forward_with(&x, &p, stride, pad, ExecPath::Direct);
        let b = conv2d_forward_with(&x, &p, stride, pad, ExecPath::Blocked);
        match (d, b) {
            (Ok(d), Ok(b)) => ensure(bitwise_eq(&d, &b), || format!("conv case {case} differs"))?,
            (Err(_), Err(_)) => {}
            _ => return Err(format!("conv case {case}: only one path failed")),
        }
    }
    for case in 0..50 {
        for dir in [Direction::Down, Direction::Up] {
            let sigma = r.gen_range(1..=3);
            let k = [1, 3, 5, 7][r.gen_range(0..4)];
            let cfg = CarafeConfig::new(dir, sigma).with_kernels(3, k);
            let x = Tensor::<f64>::random_uniform(random_shape(&mut r, 4, 10), -1.0, 1.0, &mut r);
            let (oh, ow) = cfg.output_size(x.shape().h, x.shape().w);
            let logits = Tensor::<f64>::random_uniform(Shape::new(x.shape().n, k * k, oh, ow).unwrap(), -3.0, 3.0, &mut r);
            let kf = KernelField::normalize(&logits, k, Normalizer::Softmax).map_err(|e| e.to_string())?;
            let d = reassemble_with(&x, &kf, &cfg, ExecPath::Direct).map_err(|e| e.to_string())?;
            let b = reassemble_with(&x, &kf, &cfg, ExecPath::Blocked).map_err(|e| e.to_string())?;
            ensure(bitwise_eq(&d, &b), || format!("reassembly case {case} {dir} differs"))?;
        }
    }
    Ok("50 conv cases and 50 reassembly cases per direction bitwise equal".into())
}

fn trend_line(t: &ComparisonTable) -> String {
    t.rows
        .iter()
        .map(|row| {
            let seeds: Vec<String> = row.per_seed.iter().map(|v| format!("{v:.4}")).collect();
            format!("{} {} mean {:.4} [{}]", row.operator, row.metric, row.mean, seeds.join(", "))
        })
        .collect::<Vec<_>>()
        .join("; ")
}

fn trend_options() -> TrainOptions {
    TrainOptions { epochs: 25, width: 16, lr: 0.05, ..TrainOptions::default() }
}

fn c7_super_res_trend() -> Outcome {
    let task = ToyTask::new(TaskKind::SuperRes, 16, 2, 0);
    let roster = [SlotSpec::Baseline(ResampleKind::NearestPlusConv), SlotSpec::Carafe(CarafeConfig::up(2))];
    let t = compare_operators(&task, &roster, &[0, 1, 2], &trend_options()).map_err(|e| e.to_string())?;
    let delta = t.rows[1].delta;
    let losing: Vec<String> = (0..3)
        .filter(|&s| t.rows[1].per_seed[s] <= t.rows[0].per_seed[s])
        .map(|s| s.to_string())
        .collect();
    let line = format!(
        "{}; mean delta {delta:+.4} dB; seeds where carafe does not win: [{}]",
        trend_line(&t),
        losing.join(", ")
    );
    if delta > 0.0 { Ok(line) } else { Err(line) }
}

fn c8_seg2_trend() -> Outcome {
    let task = ToyTask::new(TaskKind::Seg2, 16, 2, 0);
    let roster = [SlotSpec::Baseline(ResampleKind::StridedConv), SlotSpec::Carafe(CarafeConfig::down(2))];
    let t = compare_operators(&task, &roster, &[0, 1, 2], &trend_options()).map_err(|e| e.to_string())?;
    let delta = t.rows[1].delta;
    let line = format!("{}; mean delta {delta:+.4}", trend_line(&t));
    if delta >= 0.0 { Ok(line) } else { Err(line) }
}

/// Runs the `carafe` binary twice with the same config file and compares the
/// named output files byte for byte.
fn run_twice(command: &str, settings: &Settings, files: &[&str]) -> Result<(), String> {
    let work = tempfile::tempdir().unwrap();
    let config = work.path().join("config.json");
    std::fs::write(&config, serde_json::to_string(settings).unwrap()).unwrap();
    let dirs = [work.path().join("a"), work.path().join("b")];
    for d in &dirs {
        let out = std::process::Command::new(env!("CARGO_BIN_EXE_carafe"))
            .arg(command)
            .arg("--config")
            .arg(&config)
            .arg("--out")
            .arg(d)
            .output()
            .map_err(|e| e.to_string())?;
        ensure(out.status.success(), || {
            format!("{command} exited with {:?}: {}", out.status.code(), String::from_utf8_lossy(&out.stderr))
        })?;
    }
    for f in files {
        let read = |d: &Path| std::fs::read(d.join(f)).map_err(|e| format!("{command}: {f}: {e}"));
        let (a, b) = (read(&dirs[0])?, read(&dirs[1])?);
        ensure(a == b, || format!("{command}: {f} differs between runs"))?;
    }
    Ok(())
}

fn c9_determinism() -> Outcome {
    let base = Settings { seed: Some(7), threads: Some(2), ..Settings::default() };
    run_twice(
        "train",
        &Settings {
            operators: Some(vec!["nearest_plus_conv".into(), "carafe".into()]),
            seeds: Some(vec![7, 8]),
            epochs: Some(3),
            size: Some(8),
            width: Some(8),
            ..base.clone()
        },
        &["train.json"],
    )?;
    run_twice(
        "train",
        &Settings { task: Some(TaskKind::Seg2), epochs: Some(2), size: Some(8), width: Some(8), ..base.clone() },
        &["train.json"],
    )?;
    run_twice(
        "sweep",
        &Settings {
            c_mids: Some(vec![4, 8]),
            kernels: Some(vec![[3, 5], [3, 3]]),
            epochs: Some(2),
            size: Some(8),
            width: Some(4),
            ..base.clone()
        },
        &["sweep.json", "sweep_summary.csv", "cells/cell_000.json", "cells/cell_003.json"],
    )?;
    run_twice(
        "gradcheck",
        &Settings { ops: Some(vec!["carafe_up".into(), "conv2d".into()]), ..base.clone() },
        &["gradcheck.json"],
    )?;
    run_twice(
        "bench",
        &Settings {
            operators: Some(vec!["carafe".into(), "bilinear_up".into()]),
            shape: Some([1, 4, 8, 8]),
            repetitions: Some(1),
            warmup: Some(1),
            ..base
        },
        &["bench.json"],
    )?;
    Ok("train (super_res, seg2), sweep, gradcheck and bench JSON byte-identical across reruns at 2 threads".into())
}

fn c10_round_trips() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut r = rng(100);
    let mut worst_pgm: f64 = 0.0;
    for case in 0..100 {
        let shape = random_shape(&mut r, 4, 9);
        let path = dir.path().join(format!("t{case}.crft"));
        if case % 2 == 0 {
            let t = Tensor::<f64>::random_uniform(shape, -1e3, 1e3, &mut r);
            save_tensor(&t, &path).map_err(|e| e.to_string())?;
            let back: Tensor<f64> = load_tensor(&path).map_err(|e| e.to_string())?;
            ensure(bitwise_eq(&t, &back), || format!("f64 tensor {case} changed"))?;
        } else {
            let t = Tensor::<f32>::random_uniform(shape, -1e3, 1e3, &mut r);
            save_tensor(&t, &path).map_err(|e| e.to_string())?;
            let back: Tensor<f32> = load_tensor(&path).map_err(|e| e.to_string())?;
            ensure(
                t.shape() == back.shape() && t.data().iter().zip(back.data()).all(|(a, b)| a.to_bits() == b.to_bits()),
                || format!("f32 tensor {case} changed"),
            )?;
        }
        let t = Tensor::<f64>::random_uniform(shape, -1.0, 1.0, &mut r);
        let bytes = encode_tensor(&t).map_err(|e| e.to_string())?;
        let cut = r.gen_range(0..bytes.len());
        ensure(decode_tensor::<f64>(&bytes[..cut]).is_err(), || format!("truncation to {cut} bytes accepted"))?;

        let img = Tensor::<f64>::random_uniform(Shape::new(1, 1, shape.h, shape.w).unwrap(), 0.0, 1.0, &mut r);
        let pgm = dir.path().join(format!("i{case}.pgm"));
        save_pgm(&img, &pgm).map_err(|e| e.to_string())?;
        let back = load_pgm(&pgm).map_err(|e| e.to_string())?;
        worst_pgm = worst_pgm.max(img.max_abs_diff(&back).map_err(|e| e.to_string())?);
    }
    ensure(worst_pgm <= 1.0 / 510.0, || format!("PGM error {worst_pgm}"))?;
    Ok(format!(
        "100 tensors bitwise (f64/f32), truncations rejected, PGM max error {worst_pgm:.5} <= 1/510"
    ))
}

fn main() {
    let criteria: [(&str, u64, fn() -> Outcome); 10] = [
        ("kernel normalization", 10, c1_kernel_normalization),
        ("shape contracts", 30, c2_shape_contracts),
        ("reductions", 30, c3_reductions),
        ("constant preservation", 10, c4_constant_preservation),
        ("gradient exactness", 300, c5_gradient_exactness),
        ("implementation equivalence", 120, c6_implementation_equivalence),
        ("super_res trend: carafe up vs nearest+conv", 600, c7_super_res_trend),
        ("seg2 trend: carafe down vs strided conv", 600, c8_seg2_trend),
        ("determinism", 120, c9_determinism),
        ("file round trips", 10, c10_round_trips),
    ];
    let mut failed = 0;
    for (i, (name, limit, f)) in criteria.into_iter().enumerate() {
        let t0 = Instant::now();
        let outcome = f();
        let took = t0.elapsed();
        let in_time = took <= Duration::from_secs(limit);
        let (pass, detail) = match outcome {
            Ok(d) => (in_time, d),
            Err(d) => (false, d),
        };
        if !pass {
            failed += 1;
        }
        println!(
            "criterion {:>2} {} | {name} | {detail} | {:.1}s of {limit}s{}",
            i + 1,
            if pass { "PASS" } else { "FAIL" },
            took.as_secs_f64(),
            if in_time { "" } else { " (over time limit)" }
        );
    }
    println!("acceptance: {} of 10 criteria passed", 10 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
