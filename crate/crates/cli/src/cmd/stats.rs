use std::path::Path;

use pathscan::baselines::{estimate_transition_matrix, TransitionStats};
use pathscan::Scanpath;

use crate::config::Config;
use crate::error::{Context, Result};
use crate::output::{provenance, write_atomic};

/// Per-level decrease/stay/increase counts as CSV, preceded by provenance
/// comment lines.
pub fn run(cfg: &Config, sps: &[Scanpath], out: &Path) -> Result<TransitionStats> {
    let stats = estimate_transition_matrix(sps).ctx(|| "estimating transitions".into())?;
    let mut bytes = Vec::new();
    let prov = provenance("stats-mag", cfg);
    bytes.extend_from_slice(format!("# {} {}\n", crate::output::TOOL, crate::output::VERSION).as_bytes());
    bytes.extend_from_slice(format!("# provenance: {}\n", serde_json::to_string(&prov)?).as_bytes());
    stats.write_csv(&mut bytes).ctx(|| "encoding CSV".into())?;
    write_atomic(out, &bytes)?;
    Ok(stats)
}
