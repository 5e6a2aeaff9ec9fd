use std::path::Path;

use carafe_core::demo::{SlotSpec, TaskKind, ToyTask, TrainOptions};
use carafe_core::{CarafeConfig, Direction, Normalizer};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::Settings;
use crate::report::{csv_error, ensure_dir, out_dir, usage, write_json, Stanza};
use crate::train::{task_direction, train_one, RunOutcome};
use crate::{Failure, EXIT_FAILURE, EXIT_OK};

pub const CSV_HEADER: [&str; 11] = [
    "cell", "direction", "c_mid", "k_encoder", "k_reassembly", "normalizer", "diagonal", "status", "metric", "value",
    "error",
];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Cell {
    pub index: usize,
    pub config: CarafeConfig,
    /// Whether `k_encoder == k_reassembly - 2`.
    pub diagonal: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepPlan {
    pub task: ToyTask,
    pub options: TrainOptions,
    pub cells: Vec<Cell>,
}

impl SweepPlan {
    /// Every cell shares the task, options and seed; only the swept fields
    /// differ. All cell configs are validated here, before any training.
    pub fn resolve(s: &Settings) -> Result<Self, Failure> {
        let direction = match (s.task, s.direction) {
            (Some(t), Some(d)) if task_direction(t) != d => {
                return Err(usage(format!("task {t} needs direction {}, not {d}", task_direction(t))))
            }
            (Some(t), _) => task_direction(t),
            (None, d) => d.unwrap_or(Direction::Up),
        };
        let kind = s.task.unwrap_or(match direction {
            Direction::Up => TaskKind::SuperRes,
            Direction::Down => TaskKind::Seg2,
        });
        let task = Settings { task: Some(kind), ..s.clone() }.task()?;
        let options = s.train_options()?;

        let base = s.carafe(direction)?;
        let c_mids = s.c_mids.clone().unwrap_or_else(|| vec![base.c_mid]);
        let kernels = s.kernels.clone().unwrap_or_else(|| vec![[base.k_encoder, base.k_reassembly]]);
        let normalizers = s.normalizers.clone().unwrap_or_else(|| vec![base.normalizer]);
        if c_mids.is_empty() || kernels.is_empty() || normalizers.is_empty() {
            return Err(usage("sweep grid is empty"));
        }

        let mut cells = Vec::new();
        for &c_mid in &c_mids {
            for &[ke, kr] in &kernels {
                for &normalizer in &normalizers {
                    let cell = Settings {
                        c_mid: Some(c_mid),
                        k_encoder: Some(ke),
                        k_reassembly: Some(kr),
                        normalizer: Some(normalizer),
                        ..s.clone()
                    };
                    let config = cell.carafe(direction)?;
                    cells.push(Cell { index: cells.len(), config, diagonal: ke + 2 == kr });
                }
            }
        }
        Ok(SweepPlan { task, options, cells })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellResult {
    pub cell: Cell,
    pub outcome: RunOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub cell: usize,
    pub direction: Direction,
    pub c_mid: usize,
    pub k_encoder: usize,
    pub k_reassembly: usize,
    pub normalizer: Normalizer,
    pub diagonal: bool,
    pub status: &'static str,
    pub metric: String,
    pub value: Option<f64>,
    pub error: Option<String>,
}

impl SummaryRow {
    fn of(r: &CellResult, task: &ToyTask) -> Self {
        let c = &r.cell.config;
        SummaryRow {
            cell: r.cell.index,
            direction: c.direction,
            c_mid: c.c_mid,
            k_encoder: c.k_encoder,
            k_reassembly: c.k_reassembly,
            normalizer: c.normalizer,
            diagonal: r.cell.diagonal,
            status: r.outcome.status,
            metric: task.kind.metric_name().to_string(),
            value: r.outcome.report.as_ref().map(|rep| rep.final_metric),
            error: r.outcome.error.clone(),
        }
    }
}

/// Trains every cell on the current rayon pool. Cells are independent; a
/// diverged cell is recorded as failed and the others still run.
pub fn sweep(plan: &SweepPlan) -> Result<Vec<CellResult>, Failure> {
    plan.cells
        .par_iter()
        .map(|cell| {
            let outcome = train_one(&plan.task, SlotSpec::Carafe(cell.config), &plan.options, plan.task.seed)?;
            Ok(CellResult { cell: cell.clone(), outcome })
        })
        .collect()
}

pub fn write_summary_csv(path: &Path, rows: &[SummaryRow]) -> Result<(), Failure> {
    let mut wr = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    wr.write_record(CSV_HEADER).map_err(|e| csv_error(path, e))?;
    for r in rows {
        wr.write_record([
            r.cell.to_string(),
            r.direction.to_string(),
            r.c_mid.to_string(),
            r.k_encoder.to_string(),
            r.k_reassembly.to_string(),
            r.normalizer.name().to_string(),
            r.diagonal.to_string(),
            r.status.to_string(),
            r.metric.clone(),
            r.value.map(|v| format!("{v:.6}")).unwrap_or_default(),
            r.error.clone().unwrap_or_default(),
        ])
        .map_err(|e| csv_error(path, e))?;
    }
    wr.flush()?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct SweepSummary<'a> {
    task: &'a ToyTask,
    options: &'a TrainOptions,
    cells: &'a [SummaryRow],
}

pub fn run(settings: &Settings, threads: usize) -> Result<i32, Failure> {
    let plan = SweepPlan::resolve(settings)?;
    let results = sweep(&plan)?;
    let stanza = Stanza::new("sweep", settings, threads);

    let dir = out_dir(settings);
    let cell_dir = dir.join("cells");
    ensure_dir(&cell_dir)?;
    for r in &results {
        write_json(&cell_dir.join(format!("cell_{:03}.json", r.cell.index)), &stanza, r)?;
    }
    let rows: Vec<SummaryRow> = results.iter().map(|r| SummaryRow::of(r, &plan.task)).collect();
    for r in &rows {
        println!(
            "cell {:<3} c_mid={:<3} k={}:{} {:<18} diagonal={:<5} {} {}",
            r.cell,
            r.c_mid,
            r.k_encoder,
            r.k_reassembly,
            r.normalizer.name(),
            r.diagonal,
            r.status,
            r.value.map(|v| format!("{}={v:.4}", r.metric)).unwrap_or_else(|| r.error.clone().unwrap_or_default()),
        );
    }
    write_summary_csv(&dir.join("sweep_summary.csv"), &rows)?;
    write_json(
        &dir.join("sweep.json"),
        &stanza,
        &SweepSummary { task: &plan.task, options: &plan.options, cells: &rows },
    )?;
    eprintln!("wrote {}", dir.join("sweep_summary.csv").display());
    Ok(if rows.iter().all(|r| r.status == "ok") { EXIT_OK } else { EXIT_FAILURE })
}
