//! Provenance stamping and file writing shared by all commands.

use std::io::Write;
use std::path::Path;

use serde_json::{json, Value};

use crate::config::Config;
use crate::error::{io_err, Result};

pub const TOOL: &str = "pathscan";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Tool name, version, command and the full resolved config.
pub fn provenance(command: &str, cfg: &Config) -> Value {
    json!({
        "tool": TOOL,
        "version": VERSION,
        "command": command,
        "config": cfg.to_json(),
    })
}

/// Writes via a sibling temporary file and a rename so readers never see a
/// partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    std::fs::rename(&tmp, path).map_err(io_err(path))
}

/// CSV text preceded by `#` comment lines carrying the provenance block.
pub struct CsvOut {
    buf: Vec<u8>,
    rows: csv::Writer<Vec<u8>>,
}

impl CsvOut {
    pub fn new(prov: &Value, header: &[String]) -> Result<Self> {
        let mut buf = Vec::new();
        writeln!(buf, "# {TOOL} {VERSION}").expect("write to Vec");
        writeln!(buf, "# provenance: {}", serde_json::to_string(prov)?).expect("write to Vec");
        let mut rows = csv::Writer::from_writer(Vec::new());
        rows.write_record(header)?;
        Ok(Self { buf, rows })
    }

    pub fn row(&mut self, fields: &[String]) -> Result<()> {
        self.rows.write_record(fields)?;
        Ok(())
    }

    pub fn into_bytes(mut self) -> Result<Vec<u8>> {
        self.rows.flush().map_err(|e| crate::error::CliError::Data(e.to_string()))?;
        let body = self
            .rows
            .into_inner()
            .map_err(|e| crate::error::CliError::Data(e.to_string()))?;
        self.buf.extend_from_slice(&body);
        Ok(self.buf)
    }

    pub fn save(self, path: &Path) -> Result<()> {
        write_atomic(path, &self.into_bytes()?)
    }
}

/// Reads a CSV written by [`CsvOut`], skipping the comment lines.
pub fn read_csv(text: &str) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let body: String = text
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| format!("{l}\n"))
        .collect();
    let mut r = csv::Reader::from_reader(body.as_bytes());
    let header = r.headers()?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        rows.push(rec?.iter().map(str::to_string).collect());
    }
    Ok((header, rows))
}

/// Fixed-precision number, or empty for an absent value.
pub fn num(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}
