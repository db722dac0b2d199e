use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use pathscan::baselines::estimate_transition_matrix;
use pathscan::heatmap::{fixations_to_heatmap, GridShape, SigmaRule};
use pathscan::heatmap_model::{train_heatmap_with, HeatmapExample, HeatmapModel};
use pathscan::inference::mean_length;
use pathscan::scanpath_model::{self, EpochLog, ScanpathModelMeta, SlideGrids};
use pathscan::{MagLevel, Scanpath};
use pathscan_autodiff::Checkpoint;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::cmd::simplify::{read_scanpaths, require_non_empty, select, simplify_all};
use crate::config::Config;
use crate::corpus::{sha256_hex, Corpus};
use crate::error::{io_err, CliError, Context, Result};
use crate::output::{num, provenance, write_atomic, CsvOut};

/// Training scanpaths: the given file, or the corpus trajectories
/// simplified with the configured parameters; restricted to `wsis`.
pub fn training_scanpaths(cfg: &Config, corpus: &Corpus, file: Option<&Path>, wsis: &[String]) -> Result<Vec<Scanpath>> {
    let all = match file {
        Some(p) => read_scanpaths(p)?,
        None => simplify_all(&corpus.trajectories()?, &cfg.simplify)?,
    };
    for w in wsis {
        corpus.entry(w)?;
    }
    let known = corpus.wsi_ids();
    let sps: Vec<Scanpath> = select(all, wsis).into_iter().filter(|s| known.contains(&s.wsi_id)).collect();
    require_non_empty(sps, "training scanpaths")
}

pub fn save_checkpoint(ck: &Checkpoint<f64>, path: &Path) -> Result<()> {
    let bytes = ck
        .to_bytes()
        .map_err(pathscan::Error::from)
        .ctx(|| format!("encoding {}", path.display()))?;
    write_atomic(path, &bytes)
}

pub fn load_checkpoint(path: &Path) -> Result<(Checkpoint<f64>, String)> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    let ck = Checkpoint::from_bytes(&bytes)
        .map_err(pathscan::Error::from)
        .ctx(|| format!("reading checkpoint {}", path.display()))?;
    Ok((ck, sha256_hex(&bytes)))
}

fn numeric_abort(e: CliError, out: &Path) -> CliError {
    match e {
        CliError::Core { source, context } if source.is_numeric() => CliError::Numeric(format!(
            "{context}: {source}; last good checkpoint kept at {}",
            out.display()
        )),
        other => other,
    }
}

fn slide_selection(corpus: &Corpus, sps: &[Scanpath]) -> Vec<String> {
    let mut ids: Vec<String> = corpus.wsi_ids().into_iter().filter(|w| sps.iter().any(|s| &s.wsi_id == w)).collect();
    ids.dedup();
    ids
}

/// Trains the stage-1 model for one magnification. The checkpoint at `out`
/// is rewritten after every epoch, so an aborted run leaves the last good
/// epoch on disk. Returns the per-epoch mean losses.
pub fn train_heatmap(
    cfg: &Config,
    corpus: &Corpus,
    mag: MagLevel,
    scanpaths: Option<&Path>,
    wsis: &[String],
    out: &Path,
    log: &Path,
) -> Result<Vec<f64>> {
    let sps = training_scanpaths(cfg, corpus, scanpaths, wsis)?;
    let ids = slide_selection(corpus, &sps);
    let mut grids = Vec::with_capacity(ids.len());
    let mut targets = Vec::with_capacity(ids.len());
    for id in &ids {
        let grid = corpus.grid(id, mag)?;
        let b = corpus.bounds(id)?;
        let on: Vec<Scanpath> = sps.iter().filter(|s| &s.wsi_id == id).cloned().collect();
        targets.push(fixations_to_heatmap(&on, mag, GridShape::of(&grid), SigmaRule::for_width(b.width.max(b.height))));
        grids.push(grid);
    }
    let examples: Vec<HeatmapExample> = grids
        .iter()
        .zip(&targets)
        .map(|(grid, target)| HeatmapExample { grid, target })
        .collect();
    let prov = provenance("train-heatmap", cfg);
    let header = vec!["epoch".to_string(), "loss".to_string()];
    let mut losses = Vec::new();
    let result = train_heatmap_with::<f64>(&examples, mag, &cfg.heatmap, |model, epoch, loss| {
        losses.push(loss);
        let extra = json!({"provenance": prov, "epoch": epoch, "slides": ids});
        let ck = model.to_checkpoint(extra)?;
        let bytes = ck.to_bytes()?;
        write_atomic(out, &bytes).map_err(|e| pathscan::Error::InvalidInput(e.to_string()))?;
        Ok(())
    })
    .ctx(|| format!("training {mag} heatmap model"));
    let mut csv = CsvOut::new(&prov, &header)?;
    for (i, l) in losses.iter().enumerate() {
        csv.row(&[(i + 1).to_string(), num(Some(*l))])?;
    }
    csv.save(log)?;
    result.map_err(|e| numeric_abort(e, out))?;
    if losses.is_empty() {
        let model = HeatmapModel::<f64>::init(&cfg.heatmap, mag, grids[0].rows, grids[0].cols).ctx(|| "init".into())?;
        let ck = model
            .to_checkpoint(json!({"provenance": prov, "epoch": 0, "slides": ids}))
            .ctx(|| "checkpoint".into())?;
        save_checkpoint(&ck, out)?;
    }
    Ok(losses)
}

/// A stage-1 checkpoint used to contextualize stage-2 input grids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderRef {
    pub path: PathBuf,
    pub sha256: String,
    pub mag: MagLevel,
}

pub struct Encoders {
    pub refs: Vec<EncoderRef>,
    models: BTreeMap<MagLevel, HeatmapModel<f64>>,
}

impl Encoders {
    pub fn none() -> Self {
        Self {
            refs: Vec::new(),
            models: BTreeMap::new(),
        }
    }

    pub fn load(paths: &[PathBuf]) -> Result<Self> {
        let mut e = Self::none();
        for p in paths {
            let (ck, sha) = load_checkpoint(p)?;
            let m = HeatmapModel::<f64>::from_checkpoint(&ck).ctx(|| format!("loading {}", p.display()))?;
            if m.mag != MagLevel::X2 && m.mag != MagLevel::X10 {
                return Err(CliError::Usage(format!(
                    "{}: stage-1 model is for {}, only 2X and 10X encoders are used",
                    p.display(),
                    m.mag
                )));
            }
            if e.models.contains_key(&m.mag) {
                return Err(CliError::Usage(format!("two stage-1 models given for {}", m.mag)));
            }
            e.refs.push(EncoderRef {
                path: p.clone(),
                sha256: sha,
                mag: m.mag,
            });
            e.models.insert(m.mag, m);
        }
        Ok(e)
    }

    /// Reloads the encoders recorded in a stage-2 checkpoint, checking that
    /// the files are unchanged.
    pub fn from_refs(refs: &[EncoderRef]) -> Result<Self> {
        let e = Self::load(&refs.iter().map(|r| r.path.clone()).collect::<Vec<_>>())?;
        for (want, got) in refs.iter().zip(&e.refs) {
            if want.sha256 != got.sha256 {
                return Err(CliError::Data(format!(
                    "stage-1 checkpoint {} changed since stage-2 training",
                    want.path.display()
                )));
            }
        }
        Ok(e)
    }

    pub fn slide_grids(&self, corpus: &Corpus, wsi: &str) -> Result<SlideGrids> {
        let get = |mag: MagLevel| -> Result<_> {
            let g = corpus.grid(wsi, mag)?;
            match self.models.get(&mag) {
                Some(m) => m.encode(&g).ctx(|| format!("encoding {mag} grid of {wsi}")),
                None => Ok(g),
            }
        };
        Ok(SlideGrids {
            f2x: get(MagLevel::X2)?,
            f10x: get(MagLevel::X10)?,
        })
    }
}

/// Stage-2 extras stored in the checkpoint metadata.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScanpathExtra {
    pub provenance: Value,
    pub epoch: usize,
    pub slides: Vec<String>,
    #[serde(default)]
    pub stage1: Vec<EncoderRef>,
}

pub fn train_scanpath(
    cfg: &Config,
    corpus: &Corpus,
    scanpaths: Option<&Path>,
    wsis: &[String],
    stage1: &[PathBuf],
    out: &Path,
    log: &Path,
) -> Result<Vec<EpochLog>> {
    let sps = training_scanpaths(cfg, corpus, scanpaths, wsis)?;
    let ids = slide_selection(corpus, &sps);
    let enc = Encoders::load(stage1)?;
    let mut grids = BTreeMap::new();
    for id in &ids {
        grids.insert(id.clone(), enc.slide_grids(corpus, id)?);
    }
    let meta = ScanpathModelMeta {
        mean_length: mean_length(&sps),
        transition: Some(estimate_transition_matrix(&sps).ctx(|| "transition prior".into())?.matrix),
        ..Default::default()
    };
    let prov = provenance("train-scanpath", cfg);
    let header: Vec<String> = ["epoch", "L_fix", "L_mag", "L_total"].map(String::from).to_vec();
    let mut rows: Vec<EpochLog> = Vec::new();
    let result = scanpath_model::train_scanpath::<f64>(&sps, &grids, &cfg.scanpath, meta, |model, row| {
        rows.push(*row);
        let extra = ScanpathExtra {
            provenance: prov.clone(),
            epoch: row.epoch,
            slides: ids.clone(),
            stage1: enc.refs.clone(),
        };
        let ck = model.to_checkpoint(serde_json::to_value(&extra)?)?;
        let bytes = ck.to_bytes()?;
        write_atomic(out, &bytes).map_err(|e| pathscan::Error::InvalidInput(e.to_string()))?;
        Ok(())
    })
    .ctx(|| "training scanpath model".into());
    let mut csv = CsvOut::new(&prov, &header)?;
    for r in &rows {
        csv.row(&[r.epoch.to_string(), num(Some(r.l_fix)), num(Some(r.l_mag)), num(Some(r.l_total))])?;
    }
    csv.save(log)?;
    let trained = result.map_err(|e| numeric_abort(e, out))?;
    if rows.is_empty() {
        let extra = ScanpathExtra {
            provenance: prov,
            epoch: 0,
            slides: ids,
            stage1: enc.refs.clone(),
        };
        let ck = trained
            .model
            .to_checkpoint(serde_json::to_value(&extra)?)
            .ctx(|| "checkpoint".into())?;
        save_checkpoint(&ck, out)?;
    }
    Ok(rows)
}

/// Default log path: `<out>.log.csv`.
pub fn default_log(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".log.csv");
    PathBuf::from(s)
}
