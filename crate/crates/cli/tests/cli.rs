use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn carafe(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_carafe"))
        .args(args)
        .arg("--out")
        .arg(dir)
        .env_remove("CARAFE_THREADS")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header: Vec<String> = r.headers().unwrap().iter().map(String::from).collect();
    let mut rows = vec![header];
    rows.extend(r.records().map(|rec| rec.unwrap().iter().map(String::from).collect()));
    rows
}

const SMALL_TRAIN: [&str; 6] = ["--epochs", "1", "--size", "8", "--width", "4"];

#[test]
fn help_and_usage_errors() {
    let d = tempfile::tempdir().unwrap();
    let help = Command::new(env!("CARGO_BIN_EXE_carafe")).arg("--help").output().unwrap();
    assert_eq!(code(&help), 0);
    assert!(String::from_utf8_lossy(&help.stdout).contains("gradcheck"));
    assert_eq!(code(&carafe(&["frobnicate"], d.path())), 2);
    assert_eq!(code(&carafe(&["train", "--epochs", "many"], d.path())), 2);
    assert_eq!(code(&carafe(&["train", "--epochs", "0"], d.path())), 2);
    assert_eq!(code(&carafe(&["train", "--k-encoder", "4"], d.path())), 2);
    assert_eq!(code(&carafe(&["train", "--threads", "0"], d.path())), 2);
    assert_eq!(code(&carafe(&["train", "--task", "seg2", "--operator", "nearest_up"], d.path())), 2);
    assert_eq!(code(&carafe(&["bench", "--dtype", "f16"], d.path())), 2);
    assert_eq!(code(&carafe(&["bench", "--repetitions", "0"], d.path())), 2);
    assert_eq!(code(&carafe(&["sweep", "--kernels", "3-5"], d.path())), 2);
    assert!(!d.path().join("train.json").exists(), "usage errors must not start a run");
}

#[test]
fn gradcheck_passes_and_reports() {
    let d = tempfile::tempdir().unwrap();
    let o = carafe(&["gradcheck", "--op", "conv2d", "--op", "carafe_down"], d.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v = json(&d.path().join("gradcheck.json"));
    assert_eq!(v["schema"], 1);
    assert_eq!(v["run"]["command"], "gradcheck");
    assert_eq!(v["run"]["tool"], "carafe");
    assert!(v["run"]["version"].is_string());
    assert_eq!(v["result"]["pass"], true);
    assert_eq!(v["result"]["reports"].as_array().unwrap().len(), 2);
}

#[test]
fn gradcheck_zero_tolerance_fails() {
    let d = tempfile::tempdir().unwrap();
    let o = carafe(&["gradcheck", "--op", "conv2d", "--tol", "0"], d.path());
    assert_eq!(code(&o), 1);
    let v = json(&d.path().join("gradcheck.json"));
    assert_eq!(v["result"]["pass"], false);
}

#[test]
fn gradcheck_unknown_op_lists_registry() {
    let d = tempfile::tempdir().unwrap();
    let o = carafe(&["gradcheck", "--op", "warp_drive"], d.path());
    assert_eq!(code(&o), 2);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("warp_drive") && err.contains("conv2d") && err.contains("carafe_up"), "{err}");
}

#[test]
fn bench_rows_and_single_repetition() {
    let d = tempfile::tempdir().unwrap();
    let o = carafe(
        &["bench", "--operator", "nearest_up,carafe", "--shape", "1,64,32,32", "--sigma", "2", "--repetitions", "1", "--warmup", "1"],
        d.path(),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let rows = csv_rows(&d.path().join("bench.csv"));
    assert_eq!(rows[0], ["operator", "direction", "shape", "sigma", "median_ns", "p90_ns", "checksum"]);
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[1][0], "nearest_up");
    assert_eq!(rows[2][0], "carafe");
    for r in &rows[1..] {
        assert_eq!(r[2], "1x64x32x32");
        assert_eq!(r[3], "2");
        assert_eq!(r[4], r[5], "one repetition: p90 equals median");
    }
}

#[test]
fn bench_checksums_agree_across_exec_paths() {
    let checksums = |exec: &str| {
        let d = tempfile::tempdir().unwrap();
        let o = carafe(
            &["bench", "--operator", "conv3x3,carafe_up,carafe_down", "--shape", "2,6,11,9", "--exec", exec, "--repetitions", "2", "--warmup", "1"],
            d.path(),
        );
        assert_eq!(code(&o), 0);
        csv_rows(&d.path().join("bench.csv"))[1..].iter().map(|r| r[6].clone()).collect::<Vec<_>>()
    };
    assert_eq!(checksums("direct"), checksums("blocked"));
}

#[test]
fn sweep_grid_and_diagonal_flag() {
    let d = tempfile::tempdir().unwrap();
    let mut args = vec!["sweep", "--c-mids", "16,64", "--kernels", "3:5"];
    args.extend(SMALL_TRAIN);
    let o = carafe(&args, d.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let rows = csv_rows(&d.path().join("sweep_summary.csv"));
    assert_eq!(rows.len(), 3);
    assert_eq!((rows[1][2].as_str(), rows[2][2].as_str()), ("16", "64"));
    assert!(rows[1..].iter().all(|r| r[6] == "true" && r[7] == "ok"));
    assert!(d.path().join("cells/cell_001.json").exists());

    let d = tempfile::tempdir().unwrap();
    let mut args = vec!["sweep", "--c-mids", "4", "--kernels", "3:5,3:3,1:3", "--normalizers", "softmax,sigmoid_normalized"];
    args.extend(SMALL_TRAIN);
    assert_eq!(code(&carafe(&args, d.path())), 0);
    let rows = csv_rows(&d.path().join("sweep_summary.csv"));
    assert_eq!(rows.len(), 7);
    let flags: Vec<(&str, &str, &str)> = rows[1..].iter().map(|r| (r[3].as_str(), r[4].as_str(), r[6].as_str())).collect();
    for (ke, kr, flag) in flags {
        let diag = ke.parse::<usize>().unwrap() + 2 == kr.parse::<usize>().unwrap();
        assert_eq!(flag, diag.to_string());
    }
    let v = json(&d.path().join("cells/cell_000.json"));
    let w = json(&d.path().join("cells/cell_005.json"));
    assert_eq!(v["result"]["outcome"]["seed"], w["result"]["outcome"]["seed"]);
}

#[test]
fn divergent_cells_are_recorded_and_sweep_continues() {
    let d = tempfile::tempdir().unwrap();
    let o = carafe(
        &["sweep", "--c-mids", "2,4", "--lr", "1e9", "--epochs", "1", "--size", "8", "--width", "4"],
        d.path(),
    );
    assert_eq!(code(&o), 1);
    let rows = csv_rows(&d.path().join("sweep_summary.csv"));
    assert_eq!(rows.len(), 3);
    assert!(rows[1..].iter().all(|r| r[7] == "failed" && r[10].contains("diverged")));
}

#[test]
fn train_comparison_and_determinism() {
    let run = || {
        let d = tempfile::tempdir().unwrap();
        let mut args = vec!["train", "--operator", "bilinear_up,carafe", "--seeds", "1,2", "--seed", "3"];
        args.extend(SMALL_TRAIN);
        let o = carafe(&args, d.path());
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        std::fs::read(d.path().join("train.json")).unwrap()
    };
    let a = run();
    assert_eq!(a, run());
    let v: Value = serde_json::from_slice(&a).unwrap();
    assert_eq!(v["run"]["seed"], 3);
    assert_eq!(v["result"]["runs"].as_array().unwrap().len(), 4);
    let rows = v["result"]["comparison"]["rows"].as_array().unwrap();
    assert_eq!(rows[0]["operator"], "bilinear_up");
    assert_eq!(rows[1]["operator"], "carafe_up");
    assert_eq!(rows[0]["delta"], 0.0);
}

#[test]
fn diverged_training_exits_one() {
    let d = tempfile::tempdir().unwrap();
    let mut args = vec!["train", "--lr", "1e9"];
    args.extend(SMALL_TRAIN);
    assert_eq!(code(&carafe(&args, d.path())), 1);
    let v = json(&d.path().join("train.json"));
    assert_eq!(v["result"]["runs"][0]["status"], "failed");
}

#[test]
fn flags_override_config_file() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("run.json");
    std::fs::write(&cfg, r#"{"seed": 5, "epochs": 1, "size": 8, "width": 4, "threads": 1, "c_mid": 8}"#).unwrap();
    let o = carafe(&["train", "--config", cfg.to_str().unwrap(), "--seed", "6"], d.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v = json(&d.path().join("train.json"));
    assert_eq!(v["run"]["seed"], 6);
    assert_eq!(v["run"]["config"]["epochs"], 1);
    assert_eq!(v["run"]["config"]["c_mid"], 8);
    assert_eq!(v["result"]["plan"]["options"]["seed"], 6);

    std::fs::write(&cfg, r#"{"epochz": 1}"#).unwrap();
    assert_eq!(code(&carafe(&["train", "--config", cfg.to_str().unwrap()], d.path())), 2);
}

#[test]
fn thread_count_resolution() {
    let d = tempfile::tempdir().unwrap();
    let run = |env: Option<&str>, flag: Option<&str>| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_carafe"));
        c.args(["gradcheck", "--op", "relu", "--out"]).arg(d.path());
        if let Some(f) = flag {
            c.args(["--threads", f]);
        }
        match env {
            Some(e) => c.env("CARAFE_THREADS", e),
            None => c.env_remove("CARAFE_THREADS"),
        };
        let o = c.output().unwrap();
        (code(&o), json(&d.path().join("gradcheck.json"))["run"]["threads"].clone())
    };
    assert_eq!(run(Some("3"), None), (0, Value::from(3)));
    assert_eq!(run(Some("3"), Some("2")), (0, Value::from(2)));
    assert_eq!(run(Some("lots"), None).0, 2);
}
