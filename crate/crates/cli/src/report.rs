//! JSON report envelope shared by every subcommand.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::Settings;
use crate::{Failure, UsageError};

pub const SCHEMA: u32 = 1;
pub const TOOL: &str = "carafe";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// What is needed to rerun a report: tool version, merged settings, seed and
/// thread count. Output paths are left out so reruns elsewhere compare equal.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Stanza {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    /// Settings that were set by file or flag; resolved values live in
    /// each command's result.
    pub config: serde_json::Map<String, serde_json::Value>,
    pub seed: u64,
    pub threads: usize,
}

impl Stanza {
    pub fn new(command: &str, settings: &Settings, threads: usize) -> Self {
        Stanza {
            tool: TOOL,
            version: VERSION,
            command: command.to_string(),
            config: explicit(settings),
            seed: settings.seed(),
            threads,
        }
    }
}

fn explicit(settings: &Settings) -> serde_json::Map<String, serde_json::Value> {
    let Ok(serde_json::Value::Object(mut map)) = serde_json::to_value(Settings { out: None, ..settings.clone() }) else {
        unreachable!("settings serialize to an object")
    };
    map.retain(|_, v| !v.is_null());
    map
}

#[derive(Debug, Serialize)]
pub struct Report<'a, T: Serialize> {
    pub schema: u32,
    pub run: &'a Stanza,
    pub result: &'a T,
}

pub fn out_dir(settings: &Settings) -> PathBuf {
    settings.out.clone().unwrap_or_else(|| PathBuf::from("carafe-out"))
}

pub fn ensure_dir(dir: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(dir).map_err(|e| Failure::Run(format!("cannot create {}: {e}", dir.display())))
}

pub fn to_json<T: Serialize>(stanza: &Stanza, result: &T) -> Result<String, Failure> {
    let mut s = serde_json::to_string_pretty(&Report { schema: SCHEMA, run: stanza, result })
        .map_err(|e| Failure::Run(format!("cannot serialize report: {e}")))?;
    s.push('\n');
    Ok(s)
}

pub fn write_json<T: Serialize>(path: &Path, stanza: &Stanza, result: &T) -> Result<(), Failure> {
    let text = to_json(stanza, result)?;
    std::fs::write(path, text).map_err(|e| Failure::Run(format!("cannot write {}: {e}", path.display())))
}

pub fn csv_error(path: &Path, e: csv::Error) -> Failure {
    Failure::Run(format!("cannot write {}: {e}", path.display()))
}

pub fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(UsageError(msg.into()))
}
