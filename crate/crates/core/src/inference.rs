//! Autoregressive rollout: argmax location under inhibition of return and
//! band-limited magnification transitions.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::TransitionMatrix;
use crate::error::{Error, Result};
use crate::heatmap::Heatmap;
use crate::scanpath_model::{ScanpathModel, SlideGrids};
use crate::trajectory::{Fixation, MagLevel, Scanpath, WsiBounds};
use pathscan_autodiff::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IorConfig {
    /// Suppression radius in level-0 pixels; defaults to half the viewport
    /// width at 10X when absent.
    pub radius_px: Option<f64>,
    pub decay: f64,
    /// Only the most recent `window` visits suppress; all visits when absent.
    pub window: Option<usize>,
}

impl Default for IorConfig {
    fn default() -> Self {
        Self {
            radius_px: None,
            decay: 0.0,
            window: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IorState {
    pub visited: Vec<(f64, f64, MagLevel)>,
    pub radius_px: f64,
    pub decay: f64,
    pub window: Option<usize>,
}

impl IorState {
    pub fn new(radius_px: f64, decay: f64, window: Option<usize>) -> Result<Self> {
        if !(radius_px > 0.0 && radius_px.is_finite()) {
            return Err(Error::InvalidConfig(format!("IOR radius {radius_px} must be > 0")));
        }
        if !(0.0..1.0).contains(&decay) {
            return Err(Error::InvalidConfig(format!("IOR decay {decay} outside [0, 1)")));
        }
        Ok(Self {
            visited: Vec::new(),
            radius_px,
            decay,
            window,
        })
    }

    pub fn from_config(cfg: &IorConfig, bounds: WsiBounds) -> Result<Self> {
        let r = cfg.radius_px.unwrap_or_else(|| bounds.viewport_width(MagLevel::X10) / 2.0);
        Self::new(r, cfg.decay, cfg.window)
    }

    pub fn visit(&mut self, x: f64, y: f64, m: MagLevel) {
        self.visited.push((x, y, m));
    }

    fn active(&self) -> &[(f64, f64, MagLevel)] {
        match self.window {
            Some(w) => &self.visited[self.visited.len().saturating_sub(w)..],
            None => &self.visited,
        }
    }
}

/// Multiplies every cell whose centre lies within the radius of an active
/// visit by the decay factor.
pub fn apply_ior(h: &Heatmap, state: &IorState) -> Heatmap {
    let mut out = h.clone();
    let r2 = state.radius_px * state.radius_px;
    for r in 0..h.rows() {
        for c in 0..h.cols() {
            let (cx, cy) = h.shape.cell_center(r, c);
            if state.active().iter().any(|&(x, y, _)| (cx - x).powi(2) + (cy - y).powi(2) <= r2) {
                out.values[r * h.cols() + c] *= state.decay;
            }
        }
    }
    out
}

/// Centre of the maximal cell, row-major first on ties.
pub fn next_location(h: &Heatmap) -> Result<(f64, f64)> {
    if !(h.max() > 0.0) {
        return Err(Error::Degenerate("heatmap has no positive cell".into()));
    }
    let i = h.argmax();
    Ok(h.shape.cell_center(i / h.cols(), i % h.cols()))
}

/// Candidate levels one step around `m`, in level order.
pub fn band(m: MagLevel) -> Vec<MagLevel> {
    [-1, 0, 1].into_iter().filter_map(|d| m.offset(d)).collect()
}

/// Magnification from the predicted activations restricted to the one-level
/// band. With `rng` the level is sampled in proportion to the restricted
/// activations; without, the first maximal level is taken.
pub fn next_mag_probmag<R: Rng + ?Sized>(
    activations: &[f64; MagLevel::COUNT],
    m_t: MagLevel,
    rng: Option<&mut R>,
) -> Result<MagLevel> {
    if activations.iter().any(|v| !v.is_finite()) {
        return Err(Error::Degenerate("non-finite magnification activations".into()));
    }
    let cands = band(m_t);
    let w: Vec<f64> = cands.iter().map(|m| activations[m.index()].max(0.0)).collect();
    if w.iter().all(|&v| v == 0.0) {
        return Ok(m_t);
    }
    match rng {
        Some(rng) => {
            let d = WeightedIndex::new(&w).map_err(|e| Error::Degenerate(e.to_string()))?;
            Ok(cands[d.sample(rng)])
        }
        None => {
            let mut best = 0;
            for i in 1..w.len() {
                if w[i] > w[best] {
                    best = i;
                }
            }
            Ok(cands[best])
        }
    }
}

/// Sample from the transition row of `m_t` restricted to the band; stays
/// when the band carries no mass.
pub fn next_mag_priormag<R: Rng + ?Sized>(tm: &TransitionMatrix, m_t: MagLevel, rng: &mut R) -> MagLevel {
    match tm.band_row(m_t) {
        None => m_t,
        Some(row) => {
            let d = WeightedIndex::new(row).expect("band row has positive mass");
            MagLevel::ALL[d.sample(rng)]
        }
    }
}

/// Rounded mean scanpath length.
pub fn infer_length(corpus: &[Scanpath]) -> Result<usize> {
    if corpus.is_empty() {
        return Err(Error::InvalidInput("empty corpus for length inference".into()));
    }
    Ok(mean_length(corpus).round() as usize)
}

pub fn mean_length(corpus: &[Scanpath]) -> f64 {
    if corpus.is_empty() {
        return 0.0;
    }
    corpus.iter().map(|s| s.len() as f64).sum::<f64>() / corpus.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MagMode {
    /// Sample from the predicted activations within the band.
    ProbMag,
    /// Argmax of the predicted activations within the band.
    ProbMagArgmax,
    /// Sample from the training transition prior within the band.
    PriorMag,
}

impl std::str::FromStr for MagMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "probmag" => Ok(Self::ProbMag),
            "probmagargmax" | "probmag-argmax" => Ok(Self::ProbMagArgmax),
            "priormag" => Ok(Self::PriorMag),
            other => Err(Error::InvalidConfig(format!("unknown mode {other}"))),
        }
    }
}

impl std::fmt::Display for MagMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::ProbMag => "probmag",
            Self::ProbMagArgmax => "probmagargmax",
            Self::PriorMag => "priormag",
        })
    }
}

#[derive(Clone, Debug)]
pub struct Rollout {
    pub scanpath: Scanpath,
    /// Set when the rollout stopped early; `scanpath` holds the prefix.
    pub error: Option<String>,
}

/// Generates `n` fixations starting at the slide centre at 1X.
#[allow(clippy::too_many_arguments)]
pub fn rollout<T: Scalar>(
    model: &ScanpathModel<T>,
    grids: &SlideGrids,
    wsi_id: &str,
    bounds: WsiBounds,
    n: usize,
    mode: MagMode,
    ior: &IorConfig,
    seed: u64,
) -> Result<Rollout> {
    if n == 0 {
        return Err(Error::InvalidInput("rollout length must be >= 1".into()));
    }
    let prior = match mode {
        MagMode::PriorMag => Some(
            model
                .meta
                .transition
                .as_ref()
                .ok_or_else(|| Error::InvalidConfig("checkpoint has no transition prior".into()))?,
        ),
        _ => None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = IorState::from_config(ior, bounds)?;
    let (cx, cy) = bounds.center();
    let mut fixations = vec![Fixation::new(cx, cy, MagLevel::X1, 0.0)];
    state.visit(cx, cy, MagLevel::X1);
    let mut error = None;
    while fixations.len() < n {
        let out = match model.step(&grids.f2x, &fixations, &grids.f10x) {
            Ok(o) => o,
            Err(e) if e.is_numeric() => {
                error = Some(e.to_string());
                break;
            }
            Err(e) => return Err(e),
        };
        let h = apply_ior(&out.heatmap, &state);
        let (x, y) = match next_location(&h) {
            Ok(p) => p,
            Err(e) => {
                log::warn!("rollout on {wsi_id} stopped after {} fixations: {e}", fixations.len());
                error = Some(e.to_string());
                break;
            }
        };
        let (x, y) = bounds.clamp(x, y);
        let m_t = fixations.last().expect("non-empty").mag;
        let m = match (mode, prior) {
            (MagMode::ProbMag, _) => next_mag_probmag(&out.mag, m_t, Some(&mut rng))?,
            (MagMode::ProbMagArgmax, _) => next_mag_probmag::<ChaCha8Rng>(&out.mag, m_t, None)?,
            (MagMode::PriorMag, Some(tm)) => next_mag_priormag(tm, m_t, &mut rng),
            (MagMode::PriorMag, None) => unreachable!("prior checked above"),
        };
        fixations.push(Fixation::new(x, y, m, 0.0));
        state.visit(x, y, m);
    }
    Ok(Rollout {
        scanpath: Scanpath {
            wsi_id: wsi_id.to_string(),
            reader_id: format!("pat-{mode}"),
            fixations,
        },
        error,
    })
}
