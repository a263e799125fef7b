//! Artifact directory layout: one CSV per table, `manifest.json`, and
//! `error.json` when a run fails.

use std::path::{Path, PathBuf};

use bilevel_core::export::Table;
use serde_json::{json, Value};

use crate::error::CliError;

pub const OUTPUT_ROOT_ENV: &str = "BILEVEL_OUTPUT_ROOT";

pub fn output_dir(dir: &str) -> PathBuf {
    let root = std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("output"));
    root.join(dir)
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io { path: path.display().to_string(), message: e.to_string() }
}

pub fn prepare(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    // a stale error record from an earlier run would be misleading
    let stale = dir.join("error.json");
    if stale.exists() {
        std::fs::remove_file(&stale).map_err(|e| io_err(&stale, e))?;
    }
    Ok(())
}

/// Writes every table and returns the manifest artifact entries.
pub fn write_tables(dir: &Path, tables: &[Table]) -> Result<Vec<Value>, CliError> {
    let mut artifacts = Vec::with_capacity(tables.len());
    for t in tables {
        let file = format!("{}.csv", t.name);
        let path = dir.join(&file);
        t.write_csv(&path).map_err(|e| io_err(&path, e))?;
        artifacts.push(json!({ "file": file, "table": t.name, "columns": t.columns, "rows": t.rows.len() }));
    }
    Ok(artifacts)
}

pub fn write_json(path: &Path, value: &Value) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("json values serialize");
    std::fs::write(path, text + "\n").map_err(|e| io_err(path, e))
}
