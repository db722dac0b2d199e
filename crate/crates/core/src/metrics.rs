//! Evaluation metrics for heatmaps, scanpaths and next-fixation events.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{cosine, token_at, FeatureGrid, FeatureProvider};
use crate::heatmap::Heatmap;
use crate::synth::{GradeMap, Label};
use crate::trajectory::{Fixation, MagLevel, Scanpath, WsiBounds};

pub use crate::heatmap::scanpath_to_heatmap;

fn cell_index(h: &Heatmap, x: f64, y: f64) -> usize {
    let (r, c) = h.shape.cell_of_clamped(x, y);
    r * h.cols() + c
}

/// Mean z-scored map value at the fixation cells (population std;
/// repeated fixations count each time).
pub fn nss(h: &Heatmap, points: &[(f64, f64)]) -> Result<f64> {
    if points.is_empty() {
        return Err(Error::InvalidInput("nss needs at least one fixation".into()));
    }
    let n = h.values.len() as f64;
    let mean = h.values.iter().sum::<f64>() / n;
    let var = h.values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    if !(var > 0.0) {
        return Err(Error::Degenerate("nss of a constant map".into()));
    }
    let sd = var.sqrt();
    let total: f64 = points.iter().map(|&(x, y)| (h.values[cell_index(h, x, y)] - mean) / sd).sum();
    Ok(total / points.len() as f64)
}

/// ROC area with fixated cells as positives and every other cell as a
/// negative; ties score one half.
pub fn auc_judd(h: &Heatmap, points: &[(f64, f64)]) -> Result<f64> {
    if points.is_empty() {
        return Err(Error::InvalidInput("auc needs at least one fixation".into()));
    }
    let mut positive = vec![false; h.values.len()];
    for &(x, y) in points {
        positive[cell_index(h, x, y)] = true;
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_neg == 0 {
        return Err(Error::Contract("every cell is fixated; no negatives".into()));
    }
    let mut order: Vec<usize> = (0..h.values.len()).collect();
    order.sort_by(|&a, &b| h.values[a].total_cmp(&h.values[b]));
    // Mann-Whitney U with mid-ranks for ties.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && h.values[order[j + 1]] == h.values[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&k| positive[k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

pub fn fixation_points(fixations: &[Fixation]) -> Vec<(f64, f64)> {
    fixations.iter().map(|f| (f.x, f.y)).collect()
}

/// Labels under each fixation centre, skipping Background and points off
/// the map.
pub fn grade_string(sp: &Scanpath, gm: &GradeMap) -> Vec<Label> {
    sp.fixations
        .iter()
        .filter_map(|f| gm.label_at(f.x, f.y))
        .filter(|l| l.is_tissue())
        .collect()
}

pub fn grade_string_text(s: &[Label]) -> String {
    s.iter().map(|l| l.to_string()).collect::<Vec<_>>().join("-")
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignScoring {
    #[serde(rename = "match")]
    pub match_score: f64,
    pub mismatch: f64,
    pub gap: f64,
}

impl Default for AlignScoring {
    fn default() -> Self {
        Self {
            match_score: 1.0,
            mismatch: -1.0,
            gap: -1.0,
        }
    }
}

/// Best global alignment score.
pub fn alignment_score<S: PartialEq>(a: &[S], b: &[S], s: &AlignScoring) -> f64 {
    let m = b.len();
    let mut prev: Vec<f64> = (0..=m).map(|j| j as f64 * s.gap).collect();
    let mut cur = vec![0.0; m + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = (i + 1) as f64 * s.gap;
        for (j, y) in b.iter().enumerate() {
            let sub = if x == y { s.match_score } else { s.mismatch };
            cur[j + 1] = (prev[j] + sub).max(prev[j + 1] + s.gap).max(cur[j] + s.gap);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[m]
}

/// Global alignment score divided by `match * max(|a|, |b|)`, clamped to [0, 1].
pub fn needleman_wunsch<S: PartialEq>(a: &[S], b: &[S], s: &AlignScoring) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidInput("alignment of an empty string".into()));
    }
    if !(s.match_score > s.mismatch) || !(s.match_score > 0.0) {
        return Err(Error::InvalidConfig("match score must be positive and exceed mismatch".into()));
    }
    let raw = alignment_score(a, b, s);
    Ok((raw / (s.match_score * a.len().max(b.len()) as f64)).clamp(0.0, 1.0))
}

/// Mean alignment score of the predicted grade string against each
/// non-empty ground-truth grade string.
pub fn sss(pred: &Scanpath, gts: &[Scanpath], gm: &GradeMap, s: &AlignScoring) -> Result<f64> {
    if gts.is_empty() {
        return Err(Error::InvalidInput("sss needs at least one ground-truth scanpath".into()));
    }
    let p = grade_string(pred, gm);
    if p.is_empty() {
        return Err(Error::Degenerate("predicted scanpath never lands on tissue".into()));
    }
    let scores = gts
        .iter()
        .map(|g| grade_string(g, gm))
        .filter(|g| !g.is_empty())
        .map(|g| needleman_wunsch(&p, &g, s))
        .collect::<Result<Vec<_>>>()?;
    if scores.is_empty() {
        return Err(Error::Degenerate("every ground-truth grade string is empty".into()));
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokSimMatch {
    /// Each predicted fixation scores its best match among ground-truth
    /// fixations at the same level.
    #[default]
    MaxCosine,
    /// The i-th predicted fixation at a level pairs with the i-th
    /// ground-truth fixation at that level.
    IndexAligned,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokSimScan {
    pub per_level: [Option<f64>; MagLevel::COUNT],
    pub overall: f64,
}

struct GridCache<'a> {
    provider: &'a dyn FeatureProvider,
    wsi: &'a str,
    grids: BTreeMap<MagLevel, FeatureGrid>,
}

impl GridCache<'_> {
    fn token(&mut self, f: &Fixation) -> Result<Vec<f32>> {
        if !self.grids.contains_key(&f.mag) {
            let g = self.provider.grid(self.wsi, f.mag)?;
            self.grids.insert(f.mag, g);
        }
        Ok(token_at(&self.grids[&f.mag], f.x, f.y)?.to_vec())
    }
}

pub fn tok_sim_scan(
    pred: &Scanpath,
    gt: &Scanpath,
    provider: &dyn FeatureProvider,
    matching: TokSimMatch,
) -> Result<TokSimScan> {
    let mut cache = GridCache {
        provider,
        wsi: &gt.wsi_id,
        grids: BTreeMap::new(),
    };
    let mut per_level = [None; MagLevel::COUNT];
    let (mut weighted, mut weight) = (0.0, 0.0);
    for m in MagLevel::ALL {
        let p: Vec<&Fixation> = pred.fixations.iter().filter(|f| f.mag == m).collect();
        let g: Vec<&Fixation> = gt.fixations.iter().filter(|f| f.mag == m).collect();
        if p.is_empty() || g.is_empty() {
            continue;
        }
        let pt = p.iter().map(|f| cache.token(f)).collect::<Result<Vec<_>>>()?;
        let gtok = g.iter().map(|f| cache.token(f)).collect::<Result<Vec<_>>>()?;
        let scores: Vec<f64> = match matching {
            TokSimMatch::MaxCosine => pt
                .iter()
                .map(|a| gtok.iter().map(|b| cosine(a, b)).fold(f64::NEG_INFINITY, f64::max))
                .collect(),
            TokSimMatch::IndexAligned => pt.iter().zip(&gtok).map(|(a, b)| cosine(a, b)).collect(),
        };
        let mean = scores.iter().sum::<f64>() / scores.len() as f64;
        per_level[m.index()] = Some(mean);
        weighted += mean * scores.len() as f64;
        weight += scores.len() as f64;
    }
    if weight == 0.0 {
        return Err(Error::Degenerate("scanpaths share no magnification level".into()));
    }
    Ok(TokSimScan {
        per_level,
        overall: weighted / weight,
    })
}

/// Cosine similarity of the viewport tokens of two fixations on one slide.
pub fn tok_sim_fix(pred: &Fixation, gt: &Fixation, provider: &dyn FeatureProvider, wsi_id: &str) -> Result<f64> {
    let mut cache = GridCache {
        provider,
        wsi: wsi_id,
        grids: BTreeMap::new(),
    };
    let a = cache.token(pred)?;
    let b = cache.token(gt)?;
    Ok(cosine(&a, &b))
}

/// Euclidean distance after normalizing each axis by the slide extent.
pub fn spatial_error(pred: (f64, f64), gt: (f64, f64), bounds: WsiBounds) -> f64 {
    let dx = (pred.0 - gt.0) / bounds.width;
    let dy = (pred.1 - gt.1) / bounds.height;
    (dx * dx + dy * dy).sqrt()
}

/// A next-fixation magnification prediction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MagEvent {
    pub current: MagLevel,
    pub predicted: MagLevel,
    pub truth: MagLevel,
}

/// Percentages overall and broken down by the event's current level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MagAccuracy {
    pub overall: f64,
    pub per_level: [Option<f64>; MagLevel::COUNT],
    pub events: usize,
}

fn accuracy<'a>(events: impl Iterator<Item = &'a MagEvent>) -> Option<MagAccuracy> {
    let mut hit = [0usize; MagLevel::COUNT];
    let mut tot = [0usize; MagLevel::COUNT];
    for e in events {
        tot[e.current.index()] += 1;
        if e.predicted == e.truth {
            hit[e.current.index()] += 1;
        }
    }
    let n: usize = tot.iter().sum();
    if n == 0 {
        return None;
    }
    let mut per_level = [None; MagLevel::COUNT];
    for i in 0..MagLevel::COUNT {
        if tot[i] > 0 {
            per_level[i] = Some(100.0 * hit[i] as f64 / tot[i] as f64);
        }
    }
    Some(MagAccuracy {
        overall: 100.0 * hit.iter().sum::<usize>() as f64 / n as f64,
        per_level,
        events: n,
    })
}

pub fn mag_accuracy(events: &[MagEvent]) -> Result<MagAccuracy> {
    accuracy(events.iter()).ok_or_else(|| Error::InvalidInput("no magnification events".into()))
}

/// Accuracy restricted to events where the true level changes.
pub fn mag_change_accuracy(events: &[MagEvent]) -> Result<MagAccuracy> {
    accuracy(events.iter().filter(|e| e.truth != e.current))
        .ok_or_else(|| Error::Degenerate("no magnification change events".into()))
}

/// Mean and sample standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

pub fn summarize(values: &[f64]) -> Option<Summary> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Some(Summary {
        mean,
        std,
        n: values.len(),
    })
}
