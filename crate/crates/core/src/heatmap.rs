//! Attention heatmaps over patch grids and the shared Gaussian rule that
//! turns fixations into ground-truth maps.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureGrid;
use crate::trajectory::{Fixation, MagLevel, Scanpath};

/// Grid geometry in level-0 pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridShape {
    pub rows: usize,
    pub cols: usize,
    pub cell_px: f64,
}

impl GridShape {
    pub fn of(grid: &FeatureGrid) -> Self {
        Self {
            rows: grid.rows,
            cols: grid.cols,
            cell_px: grid.patch_px,
        }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cell_center(&self, r: usize, c: usize) -> (f64, f64) {
        ((c as f64 + 0.5) * self.cell_px, (r as f64 + 0.5) * self.cell_px)
    }

    /// Cell containing a level-0 point, clamped into the grid.
    pub fn cell_of_clamped(&self, x: f64, y: f64) -> (usize, usize) {
        let c = ((x / self.cell_px).floor().max(0.0) as usize).min(self.cols - 1);
        let r = ((y / self.cell_px).floor().max(0.0) as usize).min(self.rows - 1);
        (r, c)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub mag: MagLevel,
    pub shape: GridShape,
    /// Row-major values.
    pub values: Vec<f64>,
}

impl Heatmap {
    pub fn new(mag: MagLevel, shape: GridShape, values: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || values.len() != shape.len() {
            return Err(Error::InvalidInput(format!(
                "heatmap {}x{} with {} values",
                shape.rows,
                shape.cols,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Degenerate("heatmap contains non-finite values".into()));
        }
        Ok(Self { mag, shape, values })
    }

    pub fn zeros(mag: MagLevel, shape: GridShape) -> Self {
        Self {
            mag,
            shape,
            values: vec![0.0; shape.len()],
        }
    }

    pub fn rows(&self) -> usize {
        self.shape.rows
    }

    pub fn cols(&self) -> usize {
        self.shape.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.shape.cols + c]
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Row-major first index of the maximum.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.values.iter().enumerate() {
            if v > self.values[best] {
                best = i;
            }
        }
        best
    }

    /// Divides by the maximum; an all-zero map stays zero.
    pub fn normalize_max(&mut self) {
        let m = self.max();
        if m > 0.0 {
            self.values.iter_mut().for_each(|v| *v /= m);
        }
    }

    /// Maps values to `[0, 1]`; a constant map becomes all zeros.
    pub fn normalize_min_max(&mut self) {
        let (lo, hi) = (self.min(), self.max());
        if hi > lo {
            self.values.iter_mut().for_each(|v| *v = (*v - lo) / (hi - lo));
        } else {
            self.values.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample(&self, factor: usize) -> Result<Heatmap> {
        if factor == 0 {
            return Err(Error::InvalidConfig("upsample factor must be >= 1".into()));
        }
        let shape = GridShape {
            rows: self.rows() * factor,
            cols: self.cols() * factor,
            cell_px: self.shape.cell_px / factor as f64,
        };
        let values = (0..shape.rows)
            .flat_map(|r| (0..shape.cols).map(move |c| (r, c)))
            .map(|(r, c)| self.get(r / factor, c / factor))
            .collect();
        Heatmap::new(self.mag, shape, values)
    }

    /// Binary 16-bit PGM; values are clamped to `[0, 1]` and scaled to 65535.
    pub fn write_pgm(&self, mut w: impl Write) -> Result<()> {
        let mut buf = format!("P5\n{} {}\n65535\n", self.cols(), self.rows()).into_bytes();
        for v in &self.values {
            let q = (v.clamp(0.0, 1.0) * 65535.0).round() as u16;
            buf.extend_from_slice(&q.to_be_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn to_json(&self) -> serde_json::Value {
        let grid: Vec<&[f64]> = self.values.chunks(self.cols()).collect();
        serde_json::json!({
            "mag": self.mag,
            "rows": self.rows(),
            "cols": self.cols(),
            "cell_px": self.shape.cell_px,
            "values": grid,
        })
    }
}

/// Gaussian width rule: sigma(m) = k_sigma / factor(m) level-0 pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SigmaRule {
    pub k_sigma: f64,
}

impl SigmaRule {
    /// sigma(1X) is one eighth of the slide width.
    pub fn for_width(width: f64) -> Self {
        Self { k_sigma: width / 8.0 }
    }

    pub fn sigma_px(&self, mag: MagLevel) -> f64 {
        self.k_sigma / mag.factor() as f64
    }
}

/// Places a delta at the cell under each point and smooths each with a
/// Gaussian of its own magnification's width, centred on the cell centre.
/// The result is divided by its maximum.
pub fn gaussian_map(points: &[(f64, f64, MagLevel)], mag: MagLevel, shape: GridShape, rule: SigmaRule) -> Heatmap {
    let mut h = Heatmap::zeros(mag, shape);
    for &(x, y, m) in points {
        let (pr, pc) = shape.cell_of_clamped(x, y);
        let (px, py) = shape.cell_center(pr, pc);
        let s2 = 2.0 * rule.sigma_px(m).powi(2);
        for r in 0..shape.rows {
            for c in 0..shape.cols {
                let (cx, cy) = shape.cell_center(r, c);
                let d2 = (cx - px).powi(2) + (cy - py).powi(2);
                h.values[r * shape.cols + c] += (-d2 / s2).exp();
            }
        }
    }
    h.normalize_max();
    h
}

/// Ground-truth map for `mag` from every fixation recorded at that level.
pub fn fixations_to_heatmap(scanpaths: &[Scanpath], mag: MagLevel, shape: GridShape, rule: SigmaRule) -> Heatmap {
    let pts: Vec<(f64, f64, MagLevel)> = scanpaths
        .iter()
        .flat_map(|s| &s.fixations)
        .filter(|f| f.mag == mag)
        .map(|f| (f.x, f.y, f.mag))
        .collect();
    if pts.is_empty() {
        log::warn!("no fixations at {mag}; ground-truth map is all zero");
    }
    gaussian_map(&pts, mag, shape, rule)
}

/// Map of a whole scanpath, every fixation smoothed at its own level.
pub fn scanpath_to_heatmap(sp: &Scanpath, shape: GridShape, rule: SigmaRule) -> Heatmap {
    let pts: Vec<_> = sp.fixations.iter().map(|f| (f.x, f.y, f.mag)).collect();
    gaussian_map(&pts, MagLevel::X10, shape, rule)
}

/// Single-fixation target used for next-fixation supervision.
pub fn fixation_target(f: &Fixation, shape: GridShape, rule: SigmaRule) -> Heatmap {
    gaussian_map(&[(f.x, f.y, f.mag)], MagLevel::X10, shape, rule)
}
