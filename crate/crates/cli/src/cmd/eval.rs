//! Next-fixation and whole-scanpath evaluation reports: one row per slide
//! followed by mean and standard deviation rows across slides.

use std::collections::BTreeMap;
use std::path::Path;

use pathscan::baselines::{random1_next, random2_next};
use pathscan::features::FeatureProvider;
use pathscan::heatmap::{scanpath_to_heatmap, GridShape, SigmaRule};
use pathscan::inference::{apply_ior, next_location, next_mag_priormag, next_mag_probmag, IorState, MagMode};
use pathscan::metrics::{
    auc_judd, fixation_points, mag_accuracy, mag_change_accuracy, nss, spatial_error, sss, summarize, tok_sim_fix,
    tok_sim_scan, MagAccuracy, MagEvent,
};
use pathscan::synth::GradeMap;
use pathscan::{MagLevel, Scanpath, WsiBounds};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::cmd::predict::{pool, Baseline, Pat};
use crate::config::{derive_seed, Config};
use crate::corpus::Corpus;
use crate::error::{CliError, Context, Result};
use crate::output::{num, provenance, write_atomic, CsvOut};

/// A table of per-slide rows with named numeric columns; absent values are
/// `None`.
#[derive(Clone, Debug, Serialize)]
pub struct Report {
    pub columns: Vec<String>,
    pub rows: Vec<(String, Vec<Option<f64>>)>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Aggregate {
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub n: usize,
}

impl Report {
    pub fn column(&self, name: &str) -> Option<Vec<Option<f64>>> {
        let i = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|(_, v)| v[i]).collect())
    }

    /// Mean and sample std over slides that have a value.
    pub fn aggregate(&self) -> Vec<Aggregate> {
        (0..self.columns.len())
            .map(|i| {
                let vals: Vec<f64> = self.rows.iter().filter_map(|(_, v)| v[i]).collect();
                match summarize(&vals) {
                    Some(s) => Aggregate {
                        mean: Some(s.mean),
                        std: Some(s.std),
                        n: s.n,
                    },
                    None => Aggregate { mean: None, std: None, n: 0 },
                }
            })
            .collect()
    }

    pub fn mean_of(&self, name: &str) -> Option<f64> {
        let i = self.columns.iter().position(|c| c == name)?;
        self.aggregate()[i].mean
    }

    pub fn save(&self, prov: &Value, csv_path: &Path, json_path: Option<&Path>) -> Result<()> {
        let mut header = vec!["wsi".to_string()];
        header.extend(self.columns.iter().cloned());
        let mut csv = CsvOut::new(prov, &header)?;
        for (w, vals) in &self.rows {
            let mut r = vec![w.clone()];
            r.extend(vals.iter().map(|v| num(*v)));
            csv.row(&r)?;
        }
        let agg = self.aggregate();
        let mut mean = vec!["mean".to_string()];
        mean.extend(agg.iter().map(|a| num(a.mean)));
        csv.row(&mean)?;
        let mut std = vec!["std".to_string()];
        std.extend(agg.iter().map(|a| num(a.std)));
        csv.row(&std)?;
        csv.save(csv_path)?;
        if let Some(p) = json_path {
            let rows: Vec<Value> = self
                .rows
                .iter()
                .map(|(w, vals)| {
                    let mut o = serde_json::Map::new();
                    o.insert("wsi".into(), json!(w));
                    for (c, v) in self.columns.iter().zip(vals) {
                        o.insert(c.clone(), json!(v));
                    }
                    Value::Object(o)
                })
                .collect();
            let aggregate: serde_json::Map<String, Value> = self
                .columns
                .iter()
                .zip(&agg)
                .map(|(c, a)| (c.clone(), json!(a)))
                .collect();
            let doc = json!({"provenance": prov, "rows": rows, "aggregate": aggregate});
            let mut text = serde_json::to_string_pretty(&doc)?;
            text.push('\n');
            write_atomic(p, text.as_bytes())?;
        }
        Ok(())
    }
}

fn level_columns(prefix: &str) -> Vec<String> {
    std::iter::once(format!("{prefix}_overall"))
        .chain(MagLevel::ALL.iter().map(|m| format!("{prefix}_{m}")))
        .collect()
}

fn level_values(a: Option<&MagAccuracy>) -> Vec<Option<f64>> {
    match a {
        Some(a) => std::iter::once(Some(a.overall)).chain(a.per_level.iter().copied()).collect(),
        None => vec![None; 1 + MagLevel::COUNT],
    }
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn by_wsi(sps: &[Scanpath]) -> BTreeMap<String, Vec<&Scanpath>> {
    let mut m: BTreeMap<String, Vec<&Scanpath>> = BTreeMap::new();
    for s in sps {
        m.entry(s.wsi_id.clone()).or_default().push(s);
    }
    m
}

pub enum NextPredictor {
    Pat(Box<Pat>),
    Baseline { kind: Baseline, train: Vec<Scanpath> },
}

struct NextEvent {
    spatial: f64,
    toksim: f64,
    mag: MagEvent,
}

fn predict_next(
    cfg: &Config,
    pred: &NextPredictor,
    grids: Option<&pathscan::scanpath_model::SlideGrids>,
    sp: &Scanpath,
    k: usize,
    bounds: WsiBounds,
) -> Result<Option<(f64, f64, MagLevel)>> {
    let history = &sp.fixations[..k];
    let seed = derive_seed(cfg.seed, &format!("next/{}/{}/{k}", sp.wsi_id, sp.reader_id));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match pred {
        NextPredictor::Pat(p) => {
            let grids = grids.expect("PAT grids loaded");
            let out = p
                .model
                .step(&grids.f2x, history, &grids.f10x)
                .ctx(|| format!("predicting {}/{} fixation {k}", sp.wsi_id, sp.reader_id))?;
            let mut ior = IorState::from_config(&cfg.inference.ior, bounds).ctx(|| "IOR".into())?;
            for f in history {
                ior.visit(f.x, f.y, f.mag);
            }
            let (x, y) = match next_location(&apply_ior(&out.heatmap, &ior)) {
                Ok(p) => p,
                Err(e) => {
                    log::warn!("{}/{} fixation {k}: {e}; event skipped", sp.wsi_id, sp.reader_id);
                    return Ok(None);
                }
            };
            let m_t = history.last().expect("k >= 1").mag;
            let m = match cfg.eval.next_mag_mode {
                MagMode::ProbMag => next_mag_probmag(&out.mag, m_t, Some(&mut rng)),
                MagMode::ProbMagArgmax => next_mag_probmag::<ChaCha8Rng>(&out.mag, m_t, None),
                MagMode::PriorMag => match p.model.meta.transition.as_ref() {
                    Some(tm) => Ok(next_mag_priormag(tm, m_t, &mut rng)),
                    None => Err(pathscan::Error::InvalidConfig("checkpoint has no transition prior".into())),
                },
            }
            .ctx(|| "magnification".into())?;
            let (x, y) = bounds.clamp(x, y);
            Ok(Some((x, y, m)))
        }
        NextPredictor::Baseline { kind: Baseline::Random1, .. } => Ok(Some(random1_next(bounds, &mut rng))),
        NextPredictor::Baseline {
            kind: Baseline::Random2,
            train,
        } => {
            let p = random2_next(train, &sp.reader_id, k, &sp.wsi_id, &mut rng)
                .ctx(|| format!("random2 for {}/{}", sp.wsi_id, sp.reader_id))?;
            let (x, y) = bounds.clamp(p.x, p.y);
            Ok(Some((x, y, p.mag)))
        }
    }
}

pub fn next_columns() -> Vec<String> {
    let mut c = vec!["events".to_string(), "spatial_error".into(), "toksim_fix".into()];
    c.extend(level_columns("mag_acc"));
    c.extend(level_columns("mag_change_acc"));
    c
}

/// Predicts fixation k+1 from every ground-truth prefix of length k.
pub fn eval_next(cfg: &Config, corpus: &Corpus, gt: &[Scanpath], pred: &NextPredictor, jobs: usize) -> Result<Report> {
    let groups = by_wsi(gt);
    let provider = corpus.provider();
    let wsis: Vec<&String> = groups.keys().collect();
    let run = |wsi: &&String| -> Result<(String, Vec<Option<f64>>)> {
        let bounds = corpus.bounds(wsi)?;
        let grids = match pred {
            NextPredictor::Pat(p) => Some(p.encoders.slide_grids(corpus, wsi)?),
            _ => None,
        };
        let mut events = Vec::new();
        for sp in &groups[*wsi] {
            for k in 1..sp.len() {
                let Some((x, y, m)) = predict_next(cfg, pred, grids.as_ref(), sp, k, bounds)? else {
                    continue;
                };
                let truth = &sp.fixations[k];
                let guess = pathscan::Fixation::new(x, y, m, 0.0);
                events.push(NextEvent {
                    spatial: spatial_error((x, y), (truth.x, truth.y), bounds),
                    toksim: tok_sim_fix(&guess, truth, &provider, wsi).ctx(|| format!("TokSimFix on {wsi}"))?,
                    mag: MagEvent {
                        current: sp.fixations[k - 1].mag,
                        predicted: m,
                        truth: truth.mag,
                    },
                });
            }
        }
        let mags: Vec<MagEvent> = events.iter().map(|e| e.mag).collect();
        let acc = mag_accuracy(&mags).ok();
        let chg = mag_change_accuracy(&mags).ok();
        let mut row = vec![
            Some(events.len() as f64),
            mean(&events.iter().map(|e| e.spatial).collect::<Vec<_>>()),
            mean(&events.iter().map(|e| e.toksim).collect::<Vec<_>>()),
        ];
        row.extend(level_values(acc.as_ref()));
        row.extend(level_values(chg.as_ref()));
        Ok(((*wsi).clone(), row))
    };
    let rows: Vec<Result<_>> = pool(jobs)?.install(|| wsis.par_iter().map(run).collect());
    Ok(Report {
        columns: next_columns(),
        rows: rows.into_iter().collect::<Result<_>>()?,
    })
}

pub fn scanpath_columns() -> Vec<String> {
    let mut c = vec!["predictions".to_string(), "nss".into(), "auc".into(), "sss".into()];
    c.extend(level_columns("toksim"));
    c
}

/// Where grade maps come from for SSS.
pub enum Grades<'a> {
    Corpus(&'a Corpus),
    /// `<dir>/<wsi>.txt` with its JSON sidecar.
    Dir(&'a Path),
}

impl Grades<'_> {
    fn load(&self, wsi: &str) -> Option<GradeMap> {
        let r = match self {
            Grades::Corpus(c) => c.grade_map(wsi),
            Grades::Dir(d) => {
                let p = d.join(format!("{wsi}.txt"));
                GradeMap::load(&p).ctx(|| format!("reading {}", p.display()))
            }
        };
        match r {
            Ok(g) => Some(g),
            Err(e) => {
                log::warn!("no grade map for {wsi} ({e}); SSS marked absent");
                None
            }
        }
    }
}

/// Scores every predicted scanpath against all ground-truth scanpaths of
/// its slide; a slide's row averages over its predictions.
pub fn eval_scanpath(
    cfg: &Config,
    corpus: &Corpus,
    pred: &[Scanpath],
    gt: &[Scanpath],
    grades: &Grades<'_>,
    jobs: usize,
) -> Result<Report> {
    let preds = by_wsi(pred);
    let gts = by_wsi(gt);
    let provider = corpus.provider();
    let wsis: Vec<&String> = preds.keys().filter(|w| {
        let ok = gts.contains_key(*w);
        if !ok {
            log::warn!("no ground truth for {w}; predictions skipped");
        }
        ok
    }).collect();
    if wsis.is_empty() {
        return Err(CliError::Data("no predicted slide has ground-truth scanpaths".into()));
    }
    let run = |wsi: &&String| -> Result<(String, Vec<Option<f64>>)> {
        let bounds = corpus.bounds(wsi)?;
        let side = bounds.width.max(bounds.height);
        let n = cfg.eval.grid_cells;
        let shape = GridShape {
            rows: n,
            cols: n,
            cell_px: side / n as f64,
        };
        let rule = SigmaRule::for_width(side);
        let truth: Vec<Scanpath> = gts[*wsi].iter().map(|s| (*s).clone()).collect();
        let points: Vec<(f64, f64)> = truth.iter().flat_map(|s| fixation_points(&s.fixations)).collect();
        let gm = grades.load(wsi);
        let (mut n_s, mut a_s, mut s_s, mut t_s) = (vec![], vec![], vec![], vec![]);
        let mut lvl: Vec<Vec<f64>> = vec![Vec::new(); MagLevel::COUNT];
        for p in &preds[*wsi] {
            let h = scanpath_to_heatmap(p, shape, rule);
            n_s.push(nss(&h, &points).ctx(|| format!("NSS on {wsi}"))?);
            a_s.push(auc_judd(&h, &points).ctx(|| format!("AUC on {wsi}"))?);
            if let Some(gm) = &gm {
                match sss(p, &truth, gm, &cfg.eval.scoring) {
                    Ok(v) => s_s.push(v),
                    Err(e) => log::warn!("SSS on {wsi}: {e}"),
                }
            }
            let mut per_gt = Vec::new();
            for g in &truth {
                match tok_sim_scan(p, g, &provider as &dyn FeatureProvider, cfg.eval.toksim) {
                    Ok(t) => {
                        per_gt.push(t.overall);
                        for (i, v) in t.per_level.iter().enumerate() {
                            if let Some(v) = v {
                                lvl[i].push(*v);
                            }
                        }
                    }
                    Err(e) if e.is_numeric() => log::warn!("TokSimScan on {wsi}: {e}"),
                    Err(e) => return Err(e).ctx(|| format!("TokSimScan on {wsi}")),
                }
            }
            if let Some(m) = mean(&per_gt) {
                t_s.push(m);
            }
        }
        let mut row = vec![Some(preds[*wsi].len() as f64), mean(&n_s), mean(&a_s), mean(&s_s), mean(&t_s)];
        row.extend(lvl.iter().map(|v| mean(v)));
        Ok(((*wsi).clone(), row))
    };
    let rows: Vec<Result<_>> = pool(jobs)?.install(|| wsis.par_iter().map(run).collect());
    Ok(Report {
        columns: scanpath_columns(),
        rows: rows.into_iter().collect::<Result<_>>()?,
    })
}

pub fn report_provenance(command: &str, cfg: &Config, extra: Value) -> Value {
    let mut p = provenance(command, cfg);
    p["inputs"] = extra;
    p
}
