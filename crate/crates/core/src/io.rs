//! JSON-lines readers and writers for trajectories and scanpaths.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::trajectory::{Expertise, Fixation, MagLevel, RawTrajectory, Scanpath, ViewportSample};

/// One trajectory sample as stored on disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub wsi: String,
    pub reader: String,
    pub expertise: Expertise,
    pub x: f64,
    pub y: f64,
    pub mag: MagLevel,
    pub t_ms: f64,
}

/// Parses trajectory JSONL. Consecutive records sharing `(wsi, reader)`
/// form one trajectory. Blank lines are ignored.
pub fn read_trajectories(reader: impl BufRead) -> Result<Vec<RawTrajectory>> {
    let mut out: Vec<RawTrajectory> = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SampleRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: lineno,
            msg: e.to_string(),
        })?;
        if !(rec.x.is_finite() && rec.y.is_finite()) || rec.x < 0.0 || rec.y < 0.0 {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("coordinates ({}, {}) must be finite and non-negative", rec.x, rec.y),
            });
        }
        if !(rec.t_ms.is_finite() && rec.t_ms >= 0.0) {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("t_ms {} must be finite and >= 0", rec.t_ms),
            });
        }
        let sample = ViewportSample {
            x: rec.x,
            y: rec.y,
            mag: rec.mag,
            t: rec.t_ms,
        };
        match out.last_mut() {
            Some(t) if t.wsi_id == rec.wsi && t.reader_id == rec.reader => {
                if t.expertise != rec.expertise {
                    return Err(Error::Parse {
                        line: lineno,
                        msg: format!("expertise changes within trajectory {}/{}", rec.wsi, rec.reader),
                    });
                }
                t.samples.push(sample);
            }
            _ => out.push(RawTrajectory {
                wsi_id: rec.wsi,
                reader_id: rec.reader,
                expertise: rec.expertise,
                samples: vec![sample],
            }),
        }
    }
    Ok(out)
}

pub fn write_trajectories(mut w: impl Write, trajs: &[RawTrajectory]) -> Result<()> {
    for t in trajs {
        for s in &t.samples {
            let rec = SampleRecord {
                wsi: t.wsi_id.clone(),
                reader: t.reader_id.clone(),
                expertise: t.expertise,
                x: s.x,
                y: s.y,
                mag: s.mag,
                t_ms: s.t,
            };
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n")?;
        }
    }
    Ok(())
}

/// One scanpath per line, with optional provenance blocks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanpathRecord {
    pub wsi: String,
    pub reader: String,
    pub fixations: Vec<Fixation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<Value>,
}

impl ScanpathRecord {
    pub fn from_scanpath(sp: &Scanpath) -> Self {
        Self {
            wsi: sp.wsi_id.clone(),
            reader: sp.reader_id.clone(),
            fixations: sp.fixations.clone(),
            meta: None,
            generator: None,
        }
    }

    pub fn to_scanpath(&self) -> Scanpath {
        Scanpath {
            wsi_id: self.wsi.clone(),
            reader_id: self.reader.clone(),
            fixations: self.fixations.clone(),
        }
    }
}

pub fn read_scanpath_records(reader: impl BufRead) -> Result<Vec<ScanpathRecord>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ScanpathRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        if rec.fixations.is_empty() {
            return Err(Error::Parse {
                line: i + 1,
                msg: "scanpath has no fixations".into(),
            });
        }
        if let Some(f) = rec.fixations.iter().find(|f| !(f.dur >= 0.0 && f.x.is_finite() && f.y.is_finite())) {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("invalid fixation {f:?}"),
            });
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn read_scanpaths(reader: impl BufRead) -> Result<Vec<Scanpath>> {
    Ok(read_scanpath_records(reader)?
        .iter()
        .map(ScanpathRecord::to_scanpath)
        .collect())
}

pub fn write_scanpath_records(mut w: impl Write, recs: &[ScanpathRecord]) -> Result<()> {
    for r in recs {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}
