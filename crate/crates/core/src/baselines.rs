//! Chance baselines and the empirical magnification transition prior.

use std::io::Write;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trajectory::{Fixation, MagLevel, Scanpath, WsiBounds};

/// Row-stochastic 6x6 matrix; row = current level, column = next level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransitionMatrix {
    pub rows: [[f64; MagLevel::COUNT]; MagLevel::COUNT],
}

impl TransitionMatrix {
    pub fn identity() -> Self {
        let mut rows = [[0.0; MagLevel::COUNT]; MagLevel::COUNT];
        for (i, r) in rows.iter_mut().enumerate() {
            r[i] = 1.0;
        }
        Self { rows }
    }

    pub fn row(&self, m: MagLevel) -> &[f64; MagLevel::COUNT] {
        &self.rows[m.index()]
    }

    /// Row of `m` restricted to the one-level band and renormalized; `None`
    /// if the band carries no mass.
    pub fn band_row(&self, m: MagLevel) -> Option<[f64; MagLevel::COUNT]> {
        let mut out = [0.0; MagLevel::COUNT];
        for d in [-1i32, 0, 1] {
            if let Some(n) = m.offset(d) {
                out[n.index()] = self.rows[m.index()][n.index()].max(0.0);
            }
        }
        let s: f64 = out.iter().sum();
        if !(s > 0.0) {
            return None;
        }
        out.iter_mut().for_each(|v| *v /= s);
        Some(out)
    }
}

/// Decrease / stay / increase counts for transitions leaving one level.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelCounts {
    pub decrease: u64,
    pub stay: u64,
    pub increase: u64,
}

impl LevelCounts {
    pub fn total(&self) -> u64 {
        self.decrease + self.stay + self.increase
    }

    /// Fractions (decrease, stay, increase); zeros when the level is unused.
    pub fn normalized(&self) -> [f64; 3] {
        let t = self.total();
        if t == 0 {
            return [0.0; 3];
        }
        let t = t as f64;
        [self.decrease as f64 / t, self.stay as f64 / t, self.increase as f64 / t]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransitionStats {
    pub matrix: TransitionMatrix,
    pub counts: [[u64; MagLevel::COUNT]; MagLevel::COUNT],
    pub per_level: [LevelCounts; MagLevel::COUNT],
}

impl TransitionStats {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// CSV with one row per level: raw counts then row-normalized fractions.
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "level,decrease,stay,increase,decrease_frac,stay_frac,increase_frac")?;
        for m in MagLevel::ALL {
            let c = self.per_level[m.index()];
            let [d, s, i] = c.normalized();
            writeln!(w, "{m},{},{},{},{d:.6},{s:.6},{i:.6}", c.decrease, c.stay, c.increase)?;
        }
        Ok(())
    }
}

/// Counts consecutive fixation pairs across the corpus. Levels that are
/// never left get a uniform row and a warning.
pub fn estimate_transition_matrix(corpus: &[Scanpath]) -> Result<TransitionStats> {
    if corpus.is_empty() {
        return Err(Error::InvalidInput("empty scanpath corpus".into()));
    }
    let mut counts = [[0u64; MagLevel::COUNT]; MagLevel::COUNT];
    let mut per_level = [LevelCounts::default(); MagLevel::COUNT];
    for sp in corpus {
        for w in sp.fixations.windows(2) {
            let (a, b) = (w[0].mag.index(), w[1].mag.index());
            counts[a][b] += 1;
            let lc = &mut per_level[a];
            match b.cmp(&a) {
                std::cmp::Ordering::Less => lc.decrease += 1,
                std::cmp::Ordering::Equal => lc.stay += 1,
                std::cmp::Ordering::Greater => lc.increase += 1,
            }
        }
    }
    let mut rows = [[0.0; MagLevel::COUNT]; MagLevel::COUNT];
    for (i, row) in rows.iter_mut().enumerate() {
        let total: u64 = counts[i].iter().sum();
        if total == 0 {
            log::warn!("no transitions leave {}; using a uniform row", MagLevel::ALL[i]);
            row.iter_mut().for_each(|v| *v = 1.0 / MagLevel::COUNT as f64);
        } else {
            for (v, &c) in row.iter_mut().zip(&counts[i]) {
                *v = c as f64 / total as f64;
            }
        }
    }
    Ok(TransitionStats {
        matrix: TransitionMatrix { rows },
        counts,
        per_level,
    })
}

/// Uniform location in the slide and uniform magnification.
pub fn random1_next<R: Rng + ?Sized>(bounds: WsiBounds, rng: &mut R) -> (f64, f64, MagLevel) {
    let x = rng.random_range(0.0..bounds.width);
    let y = rng.random_range(0.0..bounds.height);
    let m = MagLevel::ALL[rng.random_range(0..MagLevel::COUNT)];
    (x, y, m)
}

/// A whole scanpath of `n` independent Random1 fixations.
pub fn random1_scanpath<R: Rng + ?Sized>(wsi_id: &str, bounds: WsiBounds, n: usize, rng: &mut R) -> Scanpath {
    let fixations = (0..n)
        .map(|_| {
            let (x, y, m) = random1_next(bounds, rng);
            Fixation::new(x, y, m, 0.0)
        })
        .collect();
    Scanpath {
        wsi_id: wsi_id.to_string(),
        reader_id: "random1".into(),
        fixations,
    }
}

/// Scanpath of a randomly chosen reader on a different slide, clamped to
/// the test slide's bounds and relabelled with the test slide id.
pub fn random2_scanpath<R: Rng + ?Sized>(
    corpus: &[Scanpath],
    test_wsi: &str,
    bounds: WsiBounds,
    rng: &mut R,
) -> Result<Scanpath> {
    let donors: Vec<&Scanpath> = corpus.iter().filter(|s| s.wsi_id != test_wsi && !s.is_empty()).collect();
    let donor = donors
        .choose(rng)
        .ok_or_else(|| Error::InvalidInput(format!("no donor scanpath outside {test_wsi}")))?;
    let fixations = donor
        .fixations
        .iter()
        .map(|f| {
            let (x, y) = bounds.clamp(f.x, f.y);
            Fixation { x, y, ..*f }
        })
        .collect();
    Ok(Scanpath {
        wsi_id: test_wsi.to_string(),
        reader_id: donor.reader_id.clone(),
        fixations,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Random2Pick {
    pub x: f64,
    pub y: f64,
    pub mag: MagLevel,
    pub donor_wsi: String,
    /// True when the donor was shorter than the requested index and its
    /// last fixation was used.
    pub index_clamped: bool,
}

/// Fixation at the same index from the same reader on a different slide.
pub fn random2_next<R: Rng + ?Sized>(
    corpus: &[Scanpath],
    reader_id: &str,
    fixation_index: usize,
    test_wsi: &str,
    rng: &mut R,
) -> Result<Random2Pick> {
    if !corpus.iter().any(|s| s.reader_id == reader_id) {
        return Err(Error::InvalidInput(format!("reader {reader_id} not in corpus")));
    }
    let donors: Vec<&Scanpath> = corpus
        .iter()
        .filter(|s| s.reader_id == reader_id && s.wsi_id != test_wsi && !s.is_empty())
        .collect();
    let donor = donors
        .choose(rng)
        .ok_or_else(|| Error::InvalidInput(format!("reader {reader_id} has no scanpath outside {test_wsi}")))?;
    let last = donor.len() - 1;
    let f = &donor.fixations[fixation_index.min(last)];
    Ok(Random2Pick {
        x: f.x,
        y: f.y,
        mag: f.mag,
        donor_wsi: donor.wsi_id.clone(),
        index_clamped: fixation_index > last,
    })
}
