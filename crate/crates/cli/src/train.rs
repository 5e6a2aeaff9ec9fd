use carafe_core::demo::{mean_sd, train_with_slot, ComparisonRow, ComparisonTable, SlotSpec, TaskKind, ToyTask, TrainOptions, TrainRunReport};
use carafe_core::{Direction, Error, ResampleKind};
use serde::Serialize;

use crate::config::Settings;
use crate::report::{ensure_dir, out_dir, usage, write_json, Stanza};
use crate::{Failure, EXIT_FAILURE, EXIT_OK};

/// The resampling direction a task's network slot needs.
pub fn task_direction(kind: TaskKind) -> Direction {
    match kind {
        TaskKind::Seg2 => Direction::Down,
        TaskKind::SuperRes | TaskKind::Inpaint => Direction::Up,
    }
}

/// Resolves an operator name for a slot of `direction`. `carafe` takes the
/// direction from the task.
pub fn slot_for(name: &str, direction: Direction, settings: &Settings) -> Result<SlotSpec, Failure> {
    let slot = match name {
        "carafe" => SlotSpec::Carafe(settings.carafe(direction)?),
        "carafe_up" => SlotSpec::Carafe(settings.carafe(Direction::Up)?),
        "carafe_down" => SlotSpec::Carafe(settings.carafe(Direction::Down)?),
        other => SlotSpec::Baseline(other.parse::<ResampleKind>().map_err(|_| {
            let mut known: Vec<&str> = ResampleKind::ALL.iter().map(|k| k.name()).collect();
            known.extend(["carafe", "carafe_up", "carafe_down"]);
            usage(format!("unknown operator '{other}'; known: {}", known.join(", ")))
        })?),
    };
    if slot.direction() != direction {
        return Err(usage(format!(
            "operator '{name}' resamples {} but the task needs {direction}",
            slot.direction()
        )));
    }
    Ok(slot)
}

/// Fully resolved training plan.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainPlan {
    pub task: ToyTask,
    pub options: TrainOptions,
    pub operators: Vec<String>,
    pub seeds: Vec<u64>,
    #[serde(skip)]
    pub slots: Vec<SlotSpec>,
}

impl TrainPlan {
    pub fn resolve(s: &Settings) -> Result<Self, Failure> {
        let task = s.task()?;
        let options = s.train_options()?;
        let direction = task_direction(task.kind);
        if let Some(d) = s.direction {
            if d != direction {
                return Err(usage(format!("task {} needs direction {direction}, not {d}", task.kind)));
            }
        }
        let operators = s.operators.clone().unwrap_or_else(|| vec!["carafe".to_string()]);
        let slots = operators
            .iter()
            .map(|o| slot_for(o, direction, s))
            .collect::<Result<Vec<_>, _>>()?;
        let seeds = s.seeds.clone().unwrap_or_else(|| vec![s.seed()]);
        if operators.is_empty() || seeds.is_empty() {
            return Err(usage("operators and seeds must be nonempty"));
        }
        Ok(TrainPlan { task, options, operators, seeds, slots })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunOutcome {
    pub operator: String,
    pub seed: u64,
    pub status: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub report: Option<TrainRunReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainResult {
    pub plan: TrainPlan,
    pub runs: Vec<RunOutcome>,
    /// Per-operator statistics when every run finished; the first operator
    /// is the baseline.
    pub comparison: Option<ComparisonTable>,
}

/// Trains one run; a diverged run is an outcome, other errors abort.
pub fn train_one(task: &ToyTask, slot: SlotSpec, opts: &TrainOptions, seed: u64) -> Result<RunOutcome, Failure> {
    let t = ToyTask { seed, ..*task };
    let o = TrainOptions { seed, ..*opts };
    let (status, report, error) = match train_with_slot(&t, slot, &o) {
        Ok(r) => ("ok", Some(r), None),
        Err(e @ Error::Diverged { .. }) => ("failed", None, Some(e.to_string())),
        Err(e) => return Err(e.into()),
    };
    Ok(RunOutcome { operator: slot.name(), seed, status, report, error })
}

pub fn train_plan(plan: &TrainPlan) -> Result<TrainResult, Failure> {
    let mut runs = Vec::new();
    for &slot in &plan.slots {
        for &seed in &plan.seeds {
            runs.push(train_one(&plan.task, slot, &plan.options, seed)?);
        }
    }
    let comparison = runs.iter().all(|r| r.report.is_some()).then(|| {
        let mut rows: Vec<ComparisonRow> = runs
            .chunks(plan.seeds.len())
            .map(|chunk| {
                let per_seed: Vec<f64> = chunk.iter().map(|r| r.report.as_ref().expect("ok run").final_metric).collect();
                let (mean, sd) = mean_sd(&per_seed);
                ComparisonRow {
                    operator: chunk[0].operator.clone(),
                    metric: plan.task.kind.metric_name().to_string(),
                    per_seed,
                    mean,
                    sd,
                    delta: 0.0,
                }
            })
            .collect();
        let base = rows[0].mean;
        rows.iter_mut().for_each(|r| r.delta = r.mean - base);
        ComparisonTable {
            task: plan.task,
            seeds: plan.seeds.clone(),
            baseline: rows[0].operator.clone(),
            rows,
        }
    });
    Ok(TrainResult { plan: plan.clone(), runs, comparison })
}

pub fn run(settings: &Settings, threads: usize) -> Result<i32, Failure> {
    let plan = TrainPlan::resolve(settings)?;
    let result = train_plan(&plan)?;
    for r in &result.runs {
        match (&r.report, &r.error) {
            (Some(rep), _) => println!(
                "{:<24} seed={:<4} {}={:.4} eval_loss={:.6}",
                r.operator, r.seed, rep.metric, rep.final_metric, rep.eval_loss
            ),
            (None, e) => println!("{:<24} seed={:<4} FAILED {}", r.operator, r.seed, e.as_deref().unwrap_or("")),
        }
    }
    if let Some(t) = &result.comparison {
        if t.rows.len() > 1 || t.seeds.len() > 1 {
            for row in &t.rows {
                println!(
                    "{:<24} {} mean={:.4} sd={:.4} delta={:+.4}",
                    row.operator, row.metric, row.mean, row.sd, row.delta
                );
            }
        }
    }
    let dir = out_dir(settings);
    ensure_dir(&dir)?;
    let path = dir.join("train.json");
    write_json(&path, &Stanza::new("train", settings, threads), &result)?;
    eprintln!("wrote {}", path.display());
    Ok(if result.runs.iter().all(|r| r.status == "ok") { EXIT_OK } else { EXIT_FAILURE })
}
