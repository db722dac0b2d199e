#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub const BIN: &str = env!("CARGO_BIN_EXE_pathscan");

pub struct Run {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

impl Run {
    #[track_caller]
    pub fn ok(self) -> Self {
        assert_eq!(self.code, 0, "stderr: {}", self.stderr);
        self
    }
}

fn finish(o: Output) -> Run {
    Run {
        code: o.status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&o.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&o.stderr).into_owned(),
    }
}

/// Runs the binary in `dir` with PATHSCAN_SEED cleared.
pub fn run(dir: &Path, args: &[&str]) -> Run {
    finish(
        Command::new(BIN)
            .current_dir(dir)
            .env_remove("PATHSCAN_SEED")
            .args(args)
            .output()
            .expect("spawn pathscan"),
    )
}

pub fn run_env(dir: &Path, args: &[&str], key: &str, val: &str) -> Run {
    finish(
        Command::new(BIN)
            .current_dir(dir)
            .env(key, val)
            .args(args)
            .output()
            .expect("spawn pathscan"),
    )
}

/// A small, fast configuration for pipeline tests.
pub const FAST: &str = r#"
[gen]
grid_rows = 16
grid_cols = 16
samples_per_reader = 200

[heatmap]
epochs = 2

[scanpath]
epochs = 1
examples_per_epoch = 16

[inference.ior]
window = 8

[eval]
grid_cells = 16
"#;

pub fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

pub fn read(dir: &Path, name: &str) -> String {
    std::fs::read_to_string(dir.join(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

/// CSV body without the `#` provenance lines.
pub fn csv_rows(text: &str) -> Vec<Vec<String>> {
    text.lines()
        .filter(|l| !l.starts_with('#') && !l.is_empty())
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

/// Value of `col` in the row whose first field is `key`.
pub fn cell(rows: &[Vec<String>], key: &str, col: &str) -> Option<f64> {
    let c = rows[0].iter().position(|h| h == col).unwrap_or_else(|| panic!("no column {col}"));
    let row = rows.iter().find(|r| r[0] == key).unwrap_or_else(|| panic!("no row {key}"));
    row[c].parse().ok()
}
