use carafe_core::gradcheck::{find, registry, run_registered, GradReport, RegisteredOp};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::Settings;
use crate::report::{ensure_dir, out_dir, usage, write_json, Stanza};
use crate::{Failure, EXIT_FAILURE, EXIT_OK};

pub const DEFAULT_TOL: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckResult {
    pub tol: f64,
    pub pass: bool,
    pub reports: Vec<GradReport>,
}

/// The ops to check: all registered ones unless `settings.ops` names some.
pub fn select(settings: &Settings) -> Result<Vec<RegisteredOp>, Failure> {
    let Some(names) = &settings.ops else {
        return Ok(registry());
    };
    names
        .iter()
        .map(|n| {
            find(n).ok_or_else(|| {
                let known: Vec<&str> = registry().iter().map(|r| r.name).collect();
                usage(format!("unknown op '{n}'; registered ops: {}", known.join(", ")))
            })
        })
        .collect()
}

pub fn check(settings: &Settings) -> Result<GradcheckResult, Failure> {
    let tol = settings.tol.unwrap_or(DEFAULT_TOL);
    if !(tol >= 0.0) {
        return Err(usage(format!("tolerance must be >= 0, got {tol}")));
    }
    let ops = select(settings)?;
    let seed = settings.seed();
    let reports = ops
        .par_iter()
        .map(|op| run_registered(op, seed, tol))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(GradcheckResult { tol, pass: reports.iter().all(|r| r.pass), reports })
}

pub fn run(settings: &Settings, threads: usize) -> Result<i32, Failure> {
    let result = check(settings)?;
    for r in &result.reports {
        println!(
            "{:<32} {}  max_rel={:.3e}  max_abs={:.3e}  checked={}",
            r.op,
            if r.pass { "ok  " } else { "FAIL" },
            r.max_rel_error,
            r.max_abs_error,
            r.checked
        );
    }
    let dir = out_dir(settings);
    ensure_dir(&dir)?;
    let path = dir.join("gradcheck.json");
    write_json(&path, &Stanza::new("gradcheck", settings, threads), &result)?;
    eprintln!("wrote {}", path.display());
    Ok(if result.pass { EXIT_OK } else { EXIT_FAILURE })
}
