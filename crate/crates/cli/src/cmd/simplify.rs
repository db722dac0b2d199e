use std::io::BufReader;
use std::path::Path;

use pathscan::io::{read_scanpath_records, read_trajectories, write_scanpath_records, ScanpathRecord};
use pathscan::{RawTrajectory, Scanpath, SimplifyParams};
use serde_json::json;

use crate::config::Config;
use crate::error::{io_err, CliError, Context, Result};
use crate::output::{provenance, write_atomic};

pub fn read_trajectory_file(path: &Path) -> Result<Vec<RawTrajectory>> {
    let f = std::fs::File::open(path).map_err(io_err(path))?;
    read_trajectories(BufReader::new(f)).ctx(|| format!("parsing {}", path.display()))
}

pub fn read_scanpath_file(path: &Path) -> Result<Vec<ScanpathRecord>> {
    let f = std::fs::File::open(path).map_err(io_err(path))?;
    read_scanpath_records(BufReader::new(f)).ctx(|| format!("parsing {}", path.display()))
}

pub fn read_scanpaths(path: &Path) -> Result<Vec<Scanpath>> {
    Ok(read_scanpath_file(path)?.iter().map(ScanpathRecord::to_scanpath).collect())
}

pub fn simplify_all(trajs: &[RawTrajectory], params: &SimplifyParams) -> Result<Vec<Scanpath>> {
    trajs
        .iter()
        .map(|t| pathscan::trajectory::simplify(t, params).ctx(|| format!("simplifying {}/{}", t.wsi_id, t.reader_id)))
        .collect()
}

/// One simplified scanpath per input trajectory, each carrying the
/// parameters and provenance in its `meta` block. Returns the count.
pub fn run(cfg: &Config, input: &Path, out: &Path) -> Result<usize> {
    let trajs = read_trajectory_file(input)?;
    let sps = simplify_all(&trajs, &cfg.simplify)?;
    let meta = json!({
        "params": cfg.simplify,
        "provenance": provenance("simplify", cfg),
    });
    let recs: Vec<ScanpathRecord> = sps
        .iter()
        .map(|sp| ScanpathRecord {
            meta: Some(meta.clone()),
            ..ScanpathRecord::from_scanpath(sp)
        })
        .collect();
    let mut bytes = Vec::new();
    write_scanpath_records(&mut bytes, &recs).ctx(|| "encoding scanpaths".into())?;
    write_atomic(out, &bytes)?;
    Ok(recs.len())
}

/// Restricts `sps` to the given slides; all when `wsis` is empty.
pub fn select(sps: Vec<Scanpath>, wsis: &[String]) -> Vec<Scanpath> {
    if wsis.is_empty() {
        return sps;
    }
    sps.into_iter().filter(|s| wsis.contains(&s.wsi_id)).collect()
}

pub fn require_non_empty<T>(v: Vec<T>, what: &str) -> Result<Vec<T>> {
    if v.is_empty() {
        return Err(CliError::Data(format!("no {what} selected")));
    }
    Ok(v)
}
