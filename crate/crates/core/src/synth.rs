//! Synthetic grade maps and simulated readers.

use std::collections::VecDeque;
use std::fmt;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp, Geometric, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trajectory::{Expertise, MagLevel, RawTrajectory, ViewportSample, WsiBounds};

/// Cell label. The discriminant is the histogram bin used by the featurizer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Label {
    Background = 0,
    Benign = 1,
    G3 = 2,
    G4 = 3,
    G5 = 4,
}

impl Label {
    pub const ALL: [Label; 5] = [Label::Background, Label::Benign, Label::G3, Label::G4, Label::G5];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn to_char(self) -> char {
        match self {
            Label::Background => '.',
            Label::Benign => 'B',
            Label::G3 => '3',
            Label::G4 => '4',
            Label::G5 => '5',
        }
    }

    pub fn from_char(c: char) -> Option<Self> {
        Some(match c {
            '.' => Label::Background,
            'B' => Label::Benign,
            '3' => Label::G3,
            '4' => Label::G4,
            '5' => Label::G5,
            _ => return None,
        })
    }

    pub fn is_tissue(self) -> bool {
        self != Label::Background
    }

    pub fn is_tumor(self) -> bool {
        matches!(self, Label::G3 | Label::G4 | Label::G5)
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Background => "Bg",
            Label::Benign => "B",
            Label::G3 => "G3",
            Label::G4 => "G4",
            Label::G5 => "G5",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradeMap {
    rows: usize,
    cols: usize,
    cells: Vec<Label>,
    cell_size: f64,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    cell_size: f64,
}

impl GradeMap {
    pub fn new(rows: usize, cols: usize, cells: Vec<Label>, cell_size: f64) -> Result<Self> {
        if rows < 8 || cols < 8 {
            return Err(Error::InvalidInput(format!("grade map {rows}x{cols} smaller than 8x8")));
        }
        if cells.len() != rows * cols {
            return Err(Error::InvalidInput(format!(
                "grade map {rows}x{cols} has {} cells",
                cells.len()
            )));
        }
        if !(cell_size > 0.0 && cell_size.is_finite()) {
            return Err(Error::InvalidInput(format!("cell_size {cell_size} must be > 0")));
        }
        Ok(Self {
            rows,
            cols,
            cells,
            cell_size,
        })
    }

    /// Map with every cell set to `label`, used in tests and fixtures.
    pub fn uniform(rows: usize, cols: usize, label: Label, cell_size: f64) -> Result<Self> {
        Self::new(rows, cols, vec![label; rows * cols], cell_size)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn cell_size(&self) -> f64 {
        self.cell_size
    }

    pub fn cells(&self) -> &[Label] {
        &self.cells
    }

    pub fn get(&self, r: usize, c: usize) -> Label {
        self.cells[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, label: Label) {
        self.cells[r * self.cols + c] = label;
    }

    pub fn bounds(&self) -> WsiBounds {
        WsiBounds {
            width: self.cols as f64 * self.cell_size,
            height: self.rows as f64 * self.cell_size,
        }
    }

    /// Label under a level-0 point; `None` outside the slide.
    pub fn label_at(&self, x: f64, y: f64) -> Option<Label> {
        if !self.bounds().contains(x, y) {
            return None;
        }
        let c = ((x / self.cell_size) as usize).min(self.cols - 1);
        let r = ((y / self.cell_size) as usize).min(self.rows - 1);
        Some(self.get(r, c))
    }

    pub fn cell_center(&self, r: usize, c: usize) -> (f64, f64) {
        ((c as f64 + 0.5) * self.cell_size, (r as f64 + 0.5) * self.cell_size)
    }

    pub fn count(&self, label: Label) -> usize {
        self.cells.iter().filter(|&&l| l == label).count()
    }

    pub fn tissue_count(&self) -> usize {
        self.cells.iter().filter(|l| l.is_tissue()).count()
    }

    /// Number of 4-connected tissue components.
    pub fn tissue_components(&self) -> usize {
        let mut seen = vec![false; self.cells.len()];
        let mut n = 0;
        for start in 0..self.cells.len() {
            if seen[start] || !self.cells[start].is_tissue() {
                continue;
            }
            n += 1;
            let mut queue = VecDeque::from([start]);
            seen[start] = true;
            while let Some(i) = queue.pop_front() {
                for j in self.neighbours(i) {
                    if !seen[j] && self.cells[j].is_tissue() {
                        seen[j] = true;
                        queue.push_back(j);
                    }
                }
            }
        }
        n
    }

    fn neighbours(&self, i: usize) -> impl Iterator<Item = usize> {
        let (r, c) = (i / self.cols, i % self.cols);
        let (rows, cols) = (self.rows, self.cols);
        [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)]
            .into_iter()
            .filter_map(move |(dr, dc)| {
                let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                (nr >= 0 && nc >= 0 && (nr as usize) < rows && (nc as usize) < cols)
                    .then(|| nr as usize * cols + nc as usize)
            })
    }

    pub fn to_text(&self) -> String {
        let mut s = String::with_capacity(self.rows * (self.cols + 1));
        for r in 0..self.rows {
            s.extend((0..self.cols).map(|c| self.get(r, c).to_char()));
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str, cell_size: f64) -> Result<Self> {
        let mut cells = Vec::new();
        let mut cols = None;
        let mut rows = 0;
        for (i, line) in text.lines().enumerate() {
            let line = line.trim_end();
            if line.is_empty() {
                continue;
            }
            let before = cells.len();
            for ch in line.chars() {
                cells.push(Label::from_char(ch).ok_or_else(|| Error::Parse {
                    line: i + 1,
                    msg: format!("unknown grade character {ch:?}"),
                })?);
            }
            let width = cells.len() - before;
            match cols {
                None => cols = Some(width),
                Some(w) if w != width => {
                    return Err(Error::Parse {
                        line: i + 1,
                        msg: format!("row has {width} cells, expected {w}"),
                    })
                }
                _ => {}
            }
            rows += 1;
        }
        Self::new(rows, cols.unwrap_or(0), cells, cell_size)
    }

    /// Writes the text grid to `path` and `{cell_size}` to the `.json` sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        let sidecar = serde_json::to_string(&Sidecar {
            cell_size: self.cell_size,
        })?;
        std::fs::write(path.with_extension("json"), sidecar + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let sidecar: Sidecar = serde_json::from_str(&std::fs::read_to_string(path.with_extension("json"))?)?;
        Self::from_text(&text, sidecar.cell_size)
    }
}

/// Relative share of each tissue label.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradeMix {
    pub benign: f64,
    pub g3: f64,
    pub g4: f64,
    pub g5: f64,
}

impl Default for GradeMix {
    fn default() -> Self {
        Self {
            benign: 0.5,
            g3: 0.2,
            g4: 0.2,
            g5: 0.1,
        }
    }
}

impl GradeMix {
    pub fn benign_only() -> Self {
        Self {
            benign: 1.0,
            g3: 0.0,
            g4: 0.0,
            g5: 0.0,
        }
    }

    fn normalized(&self) -> Result<[f64; 4]> {
        let v = [self.benign, self.g3, self.g4, self.g5];
        if v.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::InvalidConfig(format!("grade mix {v:?} has negative entries")));
        }
        let s: f64 = v.iter().sum();
        if s <= 0.0 {
            return Err(Error::InvalidConfig("grade mix is all zero".into()));
        }
        Ok(v.map(|x| x / s))
    }

    /// Requested fraction of tumor cells among tissue cells.
    pub fn tumor_fraction(&self) -> Result<f64> {
        let n = self.normalized()?;
        Ok(n[1] + n[2] + n[3])
    }
}

/// Fraction of interior cells turned into tissue.
const TISSUE_FRACTION: f64 = 0.45;

/// Generates a blob-shaped slide: one connected tissue region on a
/// Background border, with tumor blobs grown inside it by random walks.
pub fn gen_wsi(seed: u64, h_g: usize, w_g: usize, mix: &GradeMix, cell_size: f64) -> Result<GradeMap> {
    if h_g < 8 || w_g < 8 {
        return Err(Error::InvalidConfig(format!("grade map {h_g}x{w_g} smaller than 8x8")));
    }
    let shares = mix.normalized()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut map = GradeMap::uniform(h_g, w_g, Label::Background, cell_size)?;

    // tissue: dilated random walk from the centre, kept off the border
    let interior = (h_g - 2) * (w_g - 2);
    let target = ((interior as f64 * TISSUE_FRACTION).round() as usize).max(1);
    let (mut r, mut c) = (h_g / 2, w_g / 2);
    let mut tissue = 0;
    let mark = |map: &mut GradeMap, r: usize, c: usize, tissue: &mut usize| {
        if map.get(r, c) == Label::Background {
            map.set(r, c, Label::Benign);
            *tissue += 1;
        }
    };
    while tissue < target {
        mark(&mut map, r, c, &mut tissue);
        for (dr, dc) in [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)] {
            let (nr, nc) = (r as i64 + dr, c as i64 + dc);
            if nr >= 1 && nc >= 1 && (nr as usize) < h_g - 1 && (nc as usize) < w_g - 1 && tissue < target {
                mark(&mut map, nr as usize, nc as usize, &mut tissue);
            }
        }
        let (dr, dc) = [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)][rng.random_range(0..4)];
        r = (r as i64 + dr).clamp(1, h_g as i64 - 2) as usize;
        c = (c as i64 + dc).clamp(1, w_g as i64 - 2) as usize;
    }

    // tumor counts by largest remainder so they sum with benign to the tissue count
    let raw: Vec<f64> = shares.iter().map(|s| s * tissue as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|v| v.floor() as usize).collect();
    let mut order: Vec<usize> = (0..4).collect();
    order.sort_by(|&a, &b| (raw[b] - raw[b].floor()).total_cmp(&(raw[a] - raw[a].floor())).then(a.cmp(&b)));
    let mut left = tissue - counts.iter().sum::<usize>();
    for &i in order.iter().cycle().take(4 * 4) {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    for i in 1..4 {
        if shares[i] > 0.0 && counts[i] == 0 {
            counts[i] = 1;
        }
    }
    let grades = [Label::G3, Label::G4, Label::G5];
    for (k, &label) in grades.iter().enumerate() {
        grow_region(&mut map, &mut rng, label, counts[k + 1]);
    }
    Ok(map)
}

/// Converts up to `n` Benign cells to `label` with a tissue-confined random
/// walk, restarting from a random Benign cell when it stalls.
fn grow_region(map: &mut GradeMap, rng: &mut ChaCha8Rng, label: Label, n: usize) {
    let benign = |map: &GradeMap| -> Vec<usize> {
        (0..map.cells.len()).filter(|&i| map.cells[i] == Label::Benign).collect()
    };
    let mut converted = 0;
    let mut pos: Option<usize> = None;
    let mut since = 0;
    while converted < n {
        let cur = match pos {
            Some(p) if since < 8 * n + 16 => p,
            _ => {
                let pool = benign(map);
                if pool.is_empty() {
                    return;
                }
                since = 0;
                pool[rng.random_range(0..pool.len())]
            }
        };
        if map.cells[cur] == Label::Benign {
            map.cells[cur] = label;
            converted += 1;
            since = 0;
        } else {
            since += 1;
        }
        let nbrs: Vec<usize> = map.neighbours(cur).filter(|&j| map.cells[j].is_tissue()).collect();
        pos = if nbrs.is_empty() {
            None
        } else {
            Some(nbrs[rng.random_range(0..nbrs.len())])
        };
    }
}

/// Reading behaviour of a simulated pathologist.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReaderProfile {
    /// Probability that a new target picked at 1X or 2X is drawn from the
    /// whole slide instead of the current viewport neighbourhood.
    pub explore_fraction: f64,
    /// Probability that a new target is drawn from tumor cells (weighted
    /// G3:1, G4:2, G5:3) rather than uniformly over tissue.
    pub drill_bias: f64,
    /// Per-sample probabilities of {decrease, stay, increase} at each level.
    pub mag_transition_prior: [[f64; 3]; 6],
    /// Positional jitter around the current target, level-0 pixels.
    pub noise_sigma: f64,
    /// Mean number of samples spent around one target.
    pub dwell_mean_samples: f64,
    pub duration_mean_ms: f64,
    pub duration_max_ms: f64,
    pub expertise: Expertise,
}

impl Default for ReaderProfile {
    fn default() -> Self {
        Self {
            explore_fraction: 0.3,
            drill_bias: 0.7,
            mag_transition_prior: [
                [0.0, 0.92, 0.08],
                [0.02, 0.92, 0.06],
                [0.02, 0.93, 0.05],
                [0.04, 0.94, 0.02],
                [0.05, 0.93, 0.02],
                [0.06, 0.94, 0.0],
            ],
            noise_sigma: 30.0,
            dwell_mean_samples: 8.0,
            duration_mean_ms: 150.0,
            duration_max_ms: 2000.0,
            expertise: Expertise::General,
        }
    }
}

impl ReaderProfile {
    /// Profile that never changes magnification.
    pub fn stay_only(self) -> Self {
        Self {
            mag_transition_prior: [[0.0, 1.0, 0.0]; 6],
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (i, row) in self.mag_transition_prior.iter().enumerate() {
            if row.iter().any(|p| !p.is_finite() || *p < 0.0) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidConfig(format!("transition prior row {i} is not a distribution")));
            }
        }
        if self.mag_transition_prior[0][0] != 0.0 || self.mag_transition_prior[5][2] != 0.0 {
            return Err(Error::InvalidConfig(
                "transition prior allows moves beyond 1X or 40X".into(),
            ));
        }
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.explore_fraction) || !unit(self.drill_bias) {
            return Err(Error::InvalidConfig("explore_fraction and drill_bias must lie in [0,1]".into()));
        }
        if !(self.noise_sigma >= 0.0) || !(self.dwell_mean_samples >= 1.0) {
            return Err(Error::InvalidConfig("noise_sigma >= 0 and dwell_mean_samples >= 1 required".into()));
        }
        if !(self.duration_mean_ms > 0.0 && self.duration_max_ms > 0.0) {
            return Err(Error::InvalidConfig("duration parameters must be > 0".into()));
        }
        Ok(())
    }
}

fn tumor_weight(l: Label) -> f64 {
    match l {
        Label::G3 => 1.0,
        Label::G4 => 2.0,
        Label::G5 => 3.0,
        _ => 0.0,
    }
}

/// Simulates one reading session of `n_samples` viewport samples.
///
/// The session starts with the whole slide in view (1X, centre). At every
/// subsequent sample the magnification moves by at most one level according
/// to the profile's prior. The viewport dwells around a target for a
/// geometric number of samples, then jumps to a new target chosen within
/// one viewport width of the current position.
pub fn simulate_reader(
    wsi: &GradeMap,
    wsi_id: &str,
    reader_id: &str,
    profile: &ReaderProfile,
    seed: u64,
    n_samples: usize,
) -> Result<RawTrajectory> {
    if n_samples < 10 {
        return Err(Error::InvalidInput(format!("n_samples {n_samples} < 10")));
    }
    profile.validate()?;
    let tissue: Vec<(usize, usize)> = (0..wsi.rows())
        .flat_map(|r| (0..wsi.cols()).map(move |c| (r, c)))
        .filter(|&(r, c)| wsi.get(r, c).is_tissue())
        .collect();
    if tissue.is_empty() {
        return Err(Error::InvalidInput(format!("slide {wsi_id} has no tissue")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bounds = wsi.bounds();
    let dwell = Geometric::new(1.0 / profile.dwell_mean_samples)
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let dur = Exp::new(1.0 / profile.duration_mean_ms).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let jitter = Normal::new(0.0, profile.noise_sigma.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;

    let draw_duration = |rng: &mut ChaCha8Rng| loop {
        let d: f64 = dur.sample(rng);
        if d <= profile.duration_max_ms {
            return d;
        }
    };

    let (cx, cy) = bounds.center();
    let mut mag = MagLevel::X1;
    let mut target = (cx, cy);
    let mut remaining = 0u64;
    let mut samples = Vec::with_capacity(n_samples);
    samples.push(ViewportSample {
        x: cx,
        y: cy,
        mag,
        t: draw_duration(&mut rng),
    });
    while samples.len() < n_samples {
        let row = &profile.mag_transition_prior[mag.index()];
        let u: f64 = rng.random();
        let step = if u < row[0] {
            -1
        } else if u < row[0] + row[1] {
            0
        } else {
            1
        };
        mag = mag.offset(step).unwrap_or(mag);

        if remaining == 0 {
            let (x, y) = samples.last().map(|s| (s.x, s.y)).unwrap();
            target = pick_target(wsi, &tissue, profile, mag, (x, y), &mut rng);
            remaining = 1 + dwell.sample(&mut rng);
        }
        remaining -= 1;
        let (mut x, mut y) = target;
        if profile.noise_sigma > 0.0 {
            x += jitter.sample(&mut rng);
            y += jitter.sample(&mut rng);
        }
        let (x, y) = bounds.clamp(x, y);
        samples.push(ViewportSample {
            x,
            y,
            mag,
            t: draw_duration(&mut rng),
        });
    }
    Ok(RawTrajectory {
        wsi_id: wsi_id.to_string(),
        reader_id: reader_id.to_string(),
        expertise: profile.expertise,
        samples,
    })
}

fn pick_target(
    wsi: &GradeMap,
    tissue: &[(usize, usize)],
    profile: &ReaderProfile,
    mag: MagLevel,
    from: (f64, f64),
    rng: &mut ChaCha8Rng,
) -> (f64, f64) {
    let reach = wsi.bounds().viewport_width(mag);
    let explore = mag <= MagLevel::X2 && rng.random::<f64>() < profile.explore_fraction;
    let mut candidates: Vec<(usize, usize)> = if explore {
        tissue.to_vec()
    } else {
        tissue
            .iter()
            .copied()
            .filter(|&(r, c)| {
                let (x, y) = wsi.cell_center(r, c);
                (x - from.0).hypot(y - from.1) <= reach
            })
            .collect()
    };
    if candidates.is_empty() {
        candidates = tissue.to_vec();
    }
    let drill = rng.random::<f64>() < profile.drill_bias;
    let weights: Vec<f64> = candidates.iter().map(|&(r, c)| tumor_weight(wsi.get(r, c))).collect();
    let idx = match (drill, WeightedIndex::new(&weights)) {
        (true, Ok(w)) => w.sample(rng),
        _ => rng.random_range(0..candidates.len()),
    };
    let (r, c) = candidates[idx];
    let s = wsi.cell_size();
    (
        (c as f64 + rng.random::<f64>()) * s,
        (r as f64 + rng.random::<f64>()) * s,
    )
}
