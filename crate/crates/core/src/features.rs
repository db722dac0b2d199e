//! Per-magnification patch feature grids.
//!
//! Patch sizes are given in pixels of the raster at the grid's
//! magnification, with level 0 taken to be 40X. A patch of `patch_px`
//! pixels at magnification `m` therefore spans `patch_px * 40 / factor(m)`
//! level-0 pixels.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::synth::{GradeMap, Label};
use crate::trajectory::{MagLevel, WsiBounds};

pub const LEVEL0_FACTOR: f64 = 40.0;

const MAGIC: &[u8; 4] = b"PSFT";
const VERSION: u16 = 1;

/// Level-0 pixels covered by one patch side.
pub fn patch_level0_px(mag: MagLevel, patch_px: u32) -> f64 {
    patch_px as f64 * LEVEL0_FACTOR / mag.factor() as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid {
    pub mag: MagLevel,
    pub rows: usize,
    pub cols: usize,
    pub dim: usize,
    /// Level-0 pixels per patch side.
    pub patch_px: f64,
    pub data: Vec<f32>,
}

impl FeatureGrid {
    pub fn new(mag: MagLevel, rows: usize, cols: usize, dim: usize, patch_px: f64, data: Vec<f32>) -> Result<Self> {
        if rows == 0 || cols == 0 || dim == 0 {
            return Err(Error::InvalidInput(format!("empty feature grid {rows}x{cols}x{dim}")));
        }
        if data.len() != rows * cols * dim {
            return Err(Error::InvalidInput(format!(
                "feature grid {rows}x{cols}x{dim} has {} values",
                data.len()
            )));
        }
        if !(patch_px > 0.0 && patch_px.is_finite()) {
            return Err(Error::InvalidInput(format!("patch size {patch_px} must be > 0")));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("feature grid contains non-finite values".into()));
        }
        Ok(Self {
            mag,
            rows,
            cols,
            dim,
            patch_px,
            data,
        })
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn token(&self, r: usize, c: usize) -> &[f32] {
        let i = (r * self.cols + c) * self.dim;
        &self.data[i..i + self.dim]
    }

    pub fn token_by_index(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Patch containing a level-0 point, by floor division: a coordinate on
    /// a boundary belongs to the patch whose lower edge it is.
    pub fn cell_of(&self, x: f64, y: f64) -> Result<(usize, usize)> {
        if !(x >= 0.0 && y >= 0.0 && x.is_finite() && y.is_finite()) {
            return Err(Error::Range(format!("({x}, {y}) outside feature grid")));
        }
        let c = (x / self.patch_px).floor() as usize;
        let r = (y / self.patch_px).floor() as usize;
        if r >= self.rows || c >= self.cols {
            return Err(Error::Range(format!(
                "({x}, {y}) outside {}x{} grid of {} px patches",
                self.rows, self.cols, self.patch_px
            )));
        }
        Ok((r, c))
    }

    /// Level-0 centre of patch `(r, c)`.
    pub fn cell_center(&self, r: usize, c: usize) -> (f64, f64) {
        ((c as f64 + 0.5) * self.patch_px, (r as f64 + 0.5) * self.patch_px)
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let dims = [self.rows, self.cols, self.dim].map(|d| {
            u32::try_from(d).map_err(|_| Error::Format(format!("dimension {d} exceeds u32")))
        });
        let mut buf = Vec::with_capacity(19 + self.data.len() * 4);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.push(self.mag.factor() as u8);
        for d in dims {
            buf.extend_from_slice(&d?.to_le_bytes());
        }
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }
}

/// Token at a level-0 point.
pub fn token_at(grid: &FeatureGrid, x: f64, y: f64) -> Result<&[f32]> {
    let (r, c) = grid.cell_of(x, y)?;
    Ok(grid.token(r, c))
}

/// Reads a feature file. The header does not carry the patch size, so it is
/// taken as the slide extent divided by the grid size.
pub fn read_features(mut r: impl Read, bounds: WsiBounds) -> Result<FeatureGrid> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() < 19 || &bytes[..4] != MAGIC {
        return Err(Error::Format("not a feature grid file".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported feature file version {version}")));
    }
    let mag = MagLevel::from_factor(bytes[6] as u32)
        .ok_or_else(|| Error::Format(format!("bad magnification {}", bytes[6])))?;
    let u32_at = |o: usize| u32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]) as usize;
    let (rows, cols, dim) = (u32_at(7), u32_at(11), u32_at(15));
    let n = rows
        .checked_mul(cols)
        .and_then(|v| v.checked_mul(dim))
        .ok_or_else(|| Error::Format("header dimensions overflow".into()))?;
    let payload = &bytes[19..];
    if payload.len() != n * 4 {
        return Err(Error::Format(format!(
            "header {rows}x{cols}x{dim} needs {} bytes, found {}",
            n * 4,
            payload.len()
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let patch_px = (bounds.width / cols.max(1) as f64).max(bounds.height / rows.max(1) as f64);
    FeatureGrid::new(mag, rows, cols, dim, patch_px, data).map_err(|e| Error::Format(e.to_string()))
}

pub fn load_features(path: &Path, bounds: WsiBounds) -> Result<FeatureGrid> {
    read_features(std::fs::File::open(path)?, bounds)
}

/// Per-patch label histograms (5 bins, `Label` order, summing to 1).
#[derive(Clone, Debug, PartialEq)]
pub struct HistogramGrid {
    pub mag: MagLevel,
    pub rows: usize,
    pub cols: usize,
    pub patch_px: f64,
    pub hist: Vec<[f64; 5]>,
}

/// Splits the slide into non-overlapping square patches and records the
/// exact area fraction of each label inside each patch. Partial patches at
/// the right and bottom edges are padded with Background.
pub fn patchify(map: &GradeMap, mag: MagLevel, patch_px: u32) -> Result<HistogramGrid> {
    if patch_px == 0 {
        return Err(Error::InvalidConfig("patch_px must be > 0".into()));
    }
    let p = patch_level0_px(mag, patch_px);
    let b = map.bounds();
    let cols = (b.width / p).ceil() as usize;
    let rows = (b.height / p).ceil() as usize;
    let cs = map.cell_size();
    let area = p * p;
    let mut hist = vec![[0.0; 5]; rows * cols];
    for pr in 0..rows {
        let (y0, y1) = (pr as f64 * p, (pr + 1) as f64 * p);
        for pc in 0..cols {
            let (x0, x1) = (pc as f64 * p, (pc + 1) as f64 * p);
            let h = &mut hist[pr * cols + pc];
            let r_lo = (y0 / cs).floor() as usize;
            let r_hi = ((y1 / cs).ceil() as usize).min(map.rows());
            let c_lo = (x0 / cs).floor() as usize;
            let c_hi = ((x1 / cs).ceil() as usize).min(map.cols());
            let mut covered = 0.0;
            for r in r_lo..r_hi {
                let oy = overlap(y0, y1, r as f64 * cs, (r + 1) as f64 * cs);
                for c in c_lo..c_hi {
                    let a = oy * overlap(x0, x1, c as f64 * cs, (c + 1) as f64 * cs);
                    h[map.get(r, c).index()] += a;
                    covered += a;
                }
            }
            h[Label::Background.index()] += (area - covered).max(0.0);
            let s: f64 = h.iter().sum();
            h.iter_mut().for_each(|v| *v /= s);
        }
    }
    Ok(HistogramGrid {
        mag,
        rows,
        cols,
        patch_px: p,
        hist,
    })
}

fn overlap(a0: f64, a1: f64, b0: f64, b1: f64) -> f64 {
    (a1.min(b1) - a0.max(b0)).max(0.0)
}

/// Seeded Gaussian projection from the 5 histogram bins to `dim` features.
pub fn projection(dim: usize, seed: u64) -> Vec<[f64; 5]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..dim)
        .map(|_| std::array::from_fn(|_| StandardNormal.sample(&mut rng)))
        .collect()
}

/// Projects histograms to `dim` features and normalizes every token to unit
/// length.
pub fn embed(h: &HistogramGrid, dim: usize, seed: u64) -> Result<FeatureGrid> {
    if dim < 8 {
        return Err(Error::InvalidConfig(format!("feature dim {dim} < 8")));
    }
    let proj = projection(dim, seed);
    let mut data = Vec::with_capacity(h.hist.len() * dim);
    for bins in &h.hist {
        let tok: Vec<f64> = proj.iter().map(|w| w.iter().zip(bins).map(|(a, b)| a * b).sum()).collect();
        let norm = tok.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::Degenerate("zero-norm feature token".into()));
        }
        data.extend(tok.iter().map(|v| (v / norm) as f32));
    }
    FeatureGrid::new(h.mag, h.rows, h.cols, dim, h.patch_px, data)
}

/// Source of feature grids keyed by slide and magnification.
pub trait FeatureProvider: Sync {
    fn grid(&self, wsi_id: &str, mag: MagLevel) -> Result<FeatureGrid>;
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    pub dim: usize,
    pub patch_px: u32,
    /// Per-magnification patch sizes that replace `patch_px`.
    pub patch_overrides: Vec<PatchOverride>,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PatchOverride {
    pub mag: MagLevel,
    pub patch_px: u32,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            patch_px: 32,
            patch_overrides: Vec::new(),
            seed: 0x5eed,
        }
    }
}

impl FeatureConfig {
    pub fn patch_px_for(&self, mag: MagLevel) -> u32 {
        self.patch_overrides
            .iter()
            .rev()
            .find(|o| o.mag == mag)
            .map_or(self.patch_px, |o| o.patch_px)
    }
}

/// Featurizes grade maps on demand.
pub struct SyntheticProvider {
    maps: BTreeMap<String, GradeMap>,
    cfg: FeatureConfig,
}

impl SyntheticProvider {
    pub fn new(maps: BTreeMap<String, GradeMap>, cfg: FeatureConfig) -> Self {
        Self { maps, cfg }
    }

    pub fn map(&self, wsi_id: &str) -> Option<&GradeMap> {
        self.maps.get(wsi_id)
    }
}

impl FeatureProvider for SyntheticProvider {
    fn grid(&self, wsi_id: &str, mag: MagLevel) -> Result<FeatureGrid> {
        let map = self
            .maps
            .get(wsi_id)
            .ok_or_else(|| Error::InvalidInput(format!("unknown slide {wsi_id}")))?;
        embed(&patchify(map, mag, self.cfg.patch_px_for(mag))?, self.cfg.dim, self.cfg.seed)
    }
}

/// Reads `<dir>/<wsi>.<factor>x.psft`.
pub struct FileProvider {
    dir: PathBuf,
    bounds: BTreeMap<String, WsiBounds>,
}

impl FileProvider {
    pub fn new(dir: impl Into<PathBuf>, bounds: BTreeMap<String, WsiBounds>) -> Self {
        Self {
            dir: dir.into(),
            bounds,
        }
    }

    pub fn path(dir: &Path, wsi_id: &str, mag: MagLevel) -> PathBuf {
        dir.join(format!("{wsi_id}.{}x.psft", mag.factor()))
    }
}

impl FeatureProvider for FileProvider {
    fn grid(&self, wsi_id: &str, mag: MagLevel) -> Result<FeatureGrid> {
        let b = self
            .bounds
            .get(wsi_id)
            .ok_or_else(|| Error::InvalidInput(format!("unknown slide {wsi_id}")))?;
        let g = load_features(&Self::path(&self.dir, wsi_id, mag), *b)?;
        if g.mag != mag {
            return Err(Error::Format(format!("{wsi_id}: file holds {} features, wanted {mag}", g.mag)));
        }
        Ok(g)
    }
}

/// Fixed, in-memory grids (e.g. encoder outputs).
#[derive(Default)]
pub struct MemoryProvider {
    grids: BTreeMap<(String, MagLevel), FeatureGrid>,
}

impl MemoryProvider {
    pub fn insert(&mut self, wsi_id: &str, grid: FeatureGrid) {
        self.grids.insert((wsi_id.to_string(), grid.mag), grid);
    }
}

impl FeatureProvider for MemoryProvider {
    fn grid(&self, wsi_id: &str, mag: MagLevel) -> Result<FeatureGrid> {
        self.grids
            .get(&(wsi_id.to_string(), mag))
            .cloned()
            .ok_or_else(|| Error::InvalidInput(format!("no {mag} grid for slide {wsi_id}")))
    }
}

pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
    let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}
