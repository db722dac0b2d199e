use std::path::{Path, PathBuf};

use pathscan::baselines::{random1_scanpath, random2_scanpath};
use pathscan::inference::{infer_length, rollout, MagMode};
use pathscan::io::{write_scanpath_records, ScanpathRecord};
use pathscan::scanpath_model::ScanpathModel;
use pathscan::Scanpath;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::cmd::simplify::require_non_empty;
use crate::cmd::train::{load_checkpoint, Encoders, ScanpathExtra};
use crate::config::{derive_seed, Config};
use crate::corpus::Corpus;
use crate::error::{CliError, Context, Result};
use crate::output::{provenance, write_atomic};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Baseline {
    Random1,
    Random2,
}

impl std::str::FromStr for Baseline {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "random1" => Ok(Self::Random1),
            "random2" => Ok(Self::Random2),
            o => Err(format!("unknown baseline {o} (random1|random2)")),
        }
    }
}

/// Scanpath length: a fixed count or the training mean.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Length {
    Auto,
    Fixed(usize),
}

impl std::str::FromStr for Length {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s == "auto" {
            return Ok(Self::Auto);
        }
        match s.parse::<usize>() {
            Ok(n) if n >= 1 => Ok(Self::Fixed(n)),
            _ => Err(format!("--n must be 'auto' or a positive integer, got {s}")),
        }
    }
}

/// A loaded stage-2 model and the stage-1 encoders it was trained with.
pub struct Pat {
    pub path: PathBuf,
    pub sha256: String,
    pub model: ScanpathModel<f64>,
    pub encoders: Encoders,
}

impl Pat {
    pub fn load(path: &Path) -> Result<Self> {
        let (ck, sha256) = load_checkpoint(path)?;
        let model = ScanpathModel::<f64>::from_checkpoint(&ck).ctx(|| format!("loading {}", path.display()))?;
        let meta: serde_json::Value = serde_json::from_str(&ck.meta)?;
        let encoders = match meta.get("extra").cloned().map(serde_json::from_value::<ScanpathExtra>) {
            Some(Ok(extra)) => Encoders::from_refs(&extra.stage1)?,
            _ => Encoders::none(),
        };
        Ok(Self {
            path: path.to_path_buf(),
            sha256,
            model,
            encoders,
        })
    }
}

pub enum Generator {
    Pat(Box<Pat>),
    Baseline {
        kind: Baseline,
        /// Donor scanpaths (Random2) and length source (`--n auto`).
        train: Vec<Scanpath>,
    },
}

pub struct PredictOpts {
    pub wsis: Vec<String>,
    pub mode: MagMode,
    pub n: Length,
    pub samples: usize,
    pub jobs: usize,
}

pub fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| CliError::Usage(format!("--jobs: {e}")))
}

fn resolve_length(gen: &Generator, n: Length) -> Result<Option<usize>> {
    Ok(match (n, gen) {
        (Length::Fixed(k), _) => Some(k),
        (Length::Auto, Generator::Pat(p)) => {
            let m = p.model.meta.mean_length.round() as usize;
            if m == 0 {
                return Err(CliError::Data("checkpoint records no training length; pass --n".into()));
            }
            Some(m)
        }
        (Length::Auto, Generator::Baseline { kind: Baseline::Random1, train }) => {
            if train.is_empty() {
                return Err(CliError::Usage("random1 with --n auto needs --train scanpaths".into()));
            }
            Some(infer_length(train).ctx(|| "inferring length".into())?)
        }
        (Length::Auto, Generator::Baseline { kind: Baseline::Random2, .. }) => None,
    })
}

/// Generates `samples` scanpaths per slide. Each (slide, sample) pair has
/// its own seed derived from the config seed, so output does not depend on
/// `jobs`.
pub fn generate(cfg: &Config, corpus: &Corpus, gen: &Generator, opts: &PredictOpts) -> Result<Vec<ScanpathRecord>> {
    let wsis = if opts.wsis.is_empty() {
        corpus.wsi_ids()
    } else {
        opts.wsis.clone()
    };
    let wsis = require_non_empty(wsis, "slides")?;
    let n = resolve_length(gen, opts.n)?;
    let prov = provenance("predict", cfg);
    let ior = &cfg.inference.ior;
    let jobs: Vec<(String, usize)> = wsis
        .iter()
        .flat_map(|w| (0..opts.samples).map(move |s| (w.clone(), s)))
        .collect();
    let run = |(wsi, s): &(String, usize)| -> Result<ScanpathRecord> {
        let bounds = corpus.bounds(wsi)?;
        let seed = derive_seed(cfg.seed, &format!("rollout/{wsi}/{s}"));
        let (mut sp, generator) = match gen {
            Generator::Pat(p) => {
                let grids = p.encoders.slide_grids(corpus, wsi)?;
                let n = n.expect("length resolved for PAT");
                let r = rollout(&p.model, &grids, wsi, bounds, n, opts.mode, ior, seed)
                    .ctx(|| format!("rollout on {wsi}"))?;
                let g = json!({
                    "model": p.path.display().to_string(),
                    "model_sha256": p.sha256,
                    "mode": opts.mode,
                    "seed": seed,
                    "sample": s,
                    "n": n,
                    "ior": ior,
                    "error": r.error,
                });
                (r.scanpath, g)
            }
            Generator::Baseline { kind, train } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let sp = match kind {
                    Baseline::Random1 => random1_scanpath(wsi, bounds, n.expect("length resolved"), &mut rng),
                    Baseline::Random2 => {
                        let mut sp = random2_scanpath(train, wsi, bounds, &mut rng).ctx(|| format!("random2 on {wsi}"))?;
                        if let Some(k) = n {
                            sp.fixations.truncate(k);
                        }
                        sp
                    }
                };
                let g = json!({"model": kind, "seed": seed, "sample": s, "n": sp.len()});
                (sp, g)
            }
        };
        if opts.samples > 1 {
            sp.reader_id = format!("{}#{s}", sp.reader_id);
        }
        Ok(ScanpathRecord {
            generator: Some(generator),
            meta: Some(json!({"provenance": prov})),
            ..ScanpathRecord::from_scanpath(&sp)
        })
    };
    let out: Vec<Result<ScanpathRecord>> = pool(opts.jobs)?.install(|| jobs.par_iter().map(run).collect());
    out.into_iter().collect()
}

pub fn write_records(path: &Path, recs: &[ScanpathRecord]) -> Result<()> {
    let mut bytes = Vec::new();
    write_scanpath_records(&mut bytes, recs).ctx(|| "encoding scanpaths".into())?;
    write_atomic(path, &bytes)
}
