//! Report types and writers.
//!
//! A suite writes two files into the output directory:
//!
//! * `<suite>.csv`: the metric table, one header row. Cells are exact
//!   (floats in shortest round-trip form), so two runs with the same seed
//!   produce byte-identical files.
//! * `<suite>.json`: the table again plus config echo, verdicts, environment
//!   and wall-clock timings. Timings differ between runs; nothing else does.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::EvalError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(columns: &[&str]) -> Self {
        Table { columns: columns.iter().map(|c| c.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        assert_eq!(row.len(), self.columns.len(), "row width");
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.columns).expect("in-memory write");
        for r in &self.rows {
            w.write_record(r).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }

    /// Cells of `column`, in row order.
    pub fn column(&self, column: &str) -> Vec<&str> {
        let i = self.columns.iter().position(|c| c == column).expect("known column");
        self.rows.iter().map(|r| r[i].as_str()).collect()
    }
}

/// Exact, locale-free float formatting.
pub fn num(v: f64) -> String {
    format!("{v:?}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub criterion: u32,
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub os: String,
    pub arch: String,
    pub cpus: usize,
    pub package_version: String,
    pub debug_assertions: bool,
}

impl Environment {
    pub fn current() -> Self {
        Environment {
            os: std::env::consts::OS.into(),
            arch: std::env::consts::ARCH.into(),
            cpus: std::thread::available_parallelism().map_or(1, |n| n.get()),
            package_version: env!("CARGO_PKG_VERSION").into(),
            debug_assertions: cfg!(debug_assertions),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub experiment: String,
    pub seed: u64,
    pub config: Value,
    pub table: Table,
    pub verdicts: Vec<Verdict>,
    /// Wall-clock measurements; the only part that varies between runs.
    pub timing: Value,
    pub environment: Environment,
}

impl ExperimentReport {
    pub fn passed(&self) -> bool {
        self.verdicts.iter().all(|v| v.passed)
    }

    /// Writes `<experiment>.csv` and `<experiment>.json` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<(PathBuf, PathBuf), EvalError> {
        let io = |p: &Path| {
            let path = p.display().to_string();
            move |source| EvalError::Io { path, source }
        };
        fs::create_dir_all(dir).map_err(io(dir))?;
        let csv = dir.join(format!("{}.csv", self.experiment));
        let json = dir.join(format!("{}.json", self.experiment));
        fs::write(&csv, self.table.to_csv()).map_err(io(&csv))?;
        let body = serde_json::to_string_pretty(self).expect("report serializes");
        fs::write(&json, body + "\n").map_err(io(&json))?;
        Ok((csv, json))
    }
}
