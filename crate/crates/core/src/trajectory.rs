//! Viewport trajectories and their simplification into scanpaths.
//!
//! A raw trajectory is a dense stream of viewport samples. Simplification
//! splits it into constant-magnification fragments, keeps interior points
//! that mark both a sharp turn and a long dwell, merges nearby survivors
//! (accumulating their durations) and concatenates the fragments again.
//! Fragment endpoints, and therefore every magnification change, always
//! survive.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Discrete magnification level, stored as an index into
/// `[1X, 2X, 4X, 10X, 20X, 40X]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub struct MagLevel(u8);

impl MagLevel {
    pub const FACTORS: [u32; 6] = [1, 2, 4, 10, 20, 40];
    pub const COUNT: usize = 6;
    pub const X1: MagLevel = MagLevel(0);
    pub const X2: MagLevel = MagLevel(1);
    pub const X4: MagLevel = MagLevel(2);
    pub const X10: MagLevel = MagLevel(3);
    pub const X20: MagLevel = MagLevel(4);
    pub const X40: MagLevel = MagLevel(5);
    pub const ALL: [MagLevel; 6] = [
        MagLevel(0),
        MagLevel(1),
        MagLevel(2),
        MagLevel(3),
        MagLevel(4),
        MagLevel(5),
    ];

    pub fn from_index(index: usize) -> Option<Self> {
        (index < Self::COUNT).then_some(MagLevel(index as u8))
    }

    pub fn from_factor(factor: u32) -> Option<Self> {
        Self::FACTORS
            .iter()
            .position(|&f| f == factor)
            .map(|i| MagLevel(i as u8))
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn factor(self) -> u32 {
        Self::FACTORS[self.index()]
    }

    /// Neighbouring level `delta` steps away, if it exists.
    pub fn offset(self, delta: i32) -> Option<Self> {
        let i = self.index() as i32 + delta;
        (0..Self::COUNT as i32).contains(&i).then_some(MagLevel(i as u8))
    }
}

impl TryFrom<u32> for MagLevel {
    type Error = String;

    fn try_from(factor: u32) -> std::result::Result<Self, Self::Error> {
        MagLevel::from_factor(factor)
            .ok_or_else(|| format!("magnification {factor} not in {{1,2,4,10,20,40}}"))
    }
}

impl From<MagLevel> for u32 {
    fn from(m: MagLevel) -> u32 {
        m.factor()
    }
}

impl fmt::Display for MagLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}X", self.factor())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Expertise {
    Resident,
    General,
    Specialist,
}

impl std::str::FromStr for Expertise {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "resident" => Ok(Expertise::Resident),
            "general" => Ok(Expertise::General),
            "specialist" => Ok(Expertise::Specialist),
            other => Err(format!("unknown expertise {other:?}")),
        }
    }
}

/// One viewport sample: center in level-0 pixels, magnification, and the
/// time spent at this sample in milliseconds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ViewportSample {
    pub x: f64,
    pub y: f64,
    pub mag: MagLevel,
    pub t: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RawTrajectory {
    pub wsi_id: String,
    pub reader_id: String,
    pub expertise: Expertise,
    pub samples: Vec<ViewportSample>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fixation {
    pub x: f64,
    pub y: f64,
    pub mag: MagLevel,
    #[serde(rename = "dur_ms")]
    pub dur: f64,
}

impl Fixation {
    pub fn new(x: f64, y: f64, mag: MagLevel, dur: f64) -> Self {
        Self { x, y, mag, dur }
    }

    fn from_sample(s: &ViewportSample) -> Self {
        Self::new(s.x, s.y, s.mag, s.t)
    }

    pub fn distance(&self, other: &Fixation) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scanpath {
    pub wsi_id: String,
    pub reader_id: String,
    pub fixations: Vec<Fixation>,
}

impl Scanpath {
    pub fn len(&self) -> usize {
        self.fixations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fixations.is_empty()
    }

    pub fn mags(&self) -> Vec<MagLevel> {
        self.fixations.iter().map(|f| f.mag).collect()
    }
}

/// Level-0 extent of a slide.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WsiBounds {
    pub width: f64,
    pub height: f64,
}

impl WsiBounds {
    pub fn new(width: f64, height: f64) -> Result<Self> {
        if !(width > 0.0 && height > 0.0 && width.is_finite() && height.is_finite()) {
            return Err(Error::InvalidInput(format!("invalid slide extent {width}x{height}")));
        }
        Ok(Self { width, height })
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        (0.0..self.width).contains(&x) && (0.0..self.height).contains(&y)
    }

    pub fn center(&self) -> (f64, f64) {
        (self.width / 2.0, self.height / 2.0)
    }

    /// Clamp into the half-open extent.
    pub fn clamp(&self, x: f64, y: f64) -> (f64, f64) {
        let cx = x.clamp(0.0, next_below(self.width));
        let cy = y.clamp(0.0, next_below(self.height));
        (cx, cy)
    }

    /// Level-0 width of the viewport at `mag`: the whole slide fits at 1X.
    pub fn viewport_width(&self, mag: MagLevel) -> f64 {
        self.width.max(self.height) / mag.factor() as f64
    }
}

fn next_below(v: f64) -> f64 {
    f64::from_bits(v.to_bits() - 1)
}

/// Dispersion threshold, either absolute or relative to the viewport.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "unit", rename_all = "snake_case")]
pub enum DistanceThreshold {
    /// Level-0 pixels regardless of magnification.
    Level0Px { px: f64 },
    /// Fraction of the viewport width at the fragment's magnification; the
    /// viewport at 1X spans `viewport_px_at_1x` level-0 pixels.
    ViewportFraction { fraction: f64, viewport_px_at_1x: f64 },
}

impl DistanceThreshold {
    pub fn resolve(&self, mag: MagLevel) -> f64 {
        match *self {
            DistanceThreshold::Level0Px { px } => px,
            DistanceThreshold::ViewportFraction {
                fraction,
                viewport_px_at_1x,
            } => fraction * viewport_px_at_1x / mag.factor() as f64,
        }
    }

    fn scaled(&self, s: f64) -> Self {
        match *self {
            DistanceThreshold::Level0Px { px } => DistanceThreshold::Level0Px { px: px * s },
            DistanceThreshold::ViewportFraction {
                fraction,
                viewport_px_at_1x,
            } => DistanceThreshold::ViewportFraction {
                fraction: fraction * s,
                viewport_px_at_1x,
            },
        }
    }

    fn magnitude(&self) -> f64 {
        match *self {
            DistanceThreshold::Level0Px { px } => px,
            DistanceThreshold::ViewportFraction {
                fraction,
                viewport_px_at_1x,
            } => fraction.min(viewport_px_at_1x),
        }
    }
}

/// Level-0 width of the synthetic slides produced by the default generator.
pub const DEFAULT_WSI_PX: f64 = 10_240.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimplifyParams {
    /// Turning-angle threshold in radians.
    pub th_angle: f64,
    /// Dwell threshold in milliseconds.
    pub th_time: f64,
    pub th_dist: DistanceThreshold,
    pub max_fixations: usize,
    /// Run the dispersion step exactly as the original pseudocode branches
    /// (accumulate when far, emit when near) instead of merging near points.
    pub literal_dispersion_branch: bool,
}

impl Default for SimplifyParams {
    fn default() -> Self {
        Self {
            th_angle: std::f64::consts::PI / 6.0,
            th_time: 100.0,
            th_dist: DistanceThreshold::ViewportFraction {
                fraction: 0.25,
                viewport_px_at_1x: DEFAULT_WSI_PX,
            },
            max_fixations: 150,
            literal_dispersion_branch: false,
        }
    }
}

/// Factor applied to the time and distance thresholds each time the
/// simplified scanpath exceeds `max_fixations`.
pub const ESCALATION_FACTOR: f64 = 1.5;

impl SimplifyParams {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.th_angle) || !positive(self.th_time) || !positive(self.th_dist.magnitude()) {
            return Err(Error::InvalidConfig("simplify thresholds must be > 0".into()));
        }
        if self.max_fixations < 2 {
            return Err(Error::InvalidConfig("max_fixations must be >= 2".into()));
        }
        Ok(())
    }

    fn escalated(&self) -> Self {
        Self {
            th_time: self.th_time * ESCALATION_FACTOR,
            th_dist: self.th_dist.scaled(ESCALATION_FACTOR),
            ..*self
        }
    }
}

/// Splits a trajectory into maximal runs of constant magnification.
pub fn split_by_magnification(traj: &RawTrajectory) -> Result<Vec<&[ViewportSample]>> {
    if traj.samples.is_empty() {
        return Err(Error::InvalidInput(format!(
            "trajectory {}/{} has no samples",
            traj.wsi_id, traj.reader_id
        )));
    }
    Ok(traj.samples.chunk_by(|a, b| a.mag == b.mag).collect())
}

/// Absolute turning angle in `[0, pi]` between `prev -> cur` and `cur -> next`.
/// Coincident points give 0.
pub fn turning_angle(prev: (f64, f64), cur: (f64, f64), next: (f64, f64)) -> f64 {
    let (ux, uy) = (cur.0 - prev.0, cur.1 - prev.1);
    let (vx, vy) = (next.0 - cur.0, next.1 - cur.1);
    if (ux == 0.0 && uy == 0.0) || (vx == 0.0 && vy == 0.0) {
        return 0.0;
    }
    let cross = ux * vy - uy * vx;
    let dot = ux * vx + uy * vy;
    cross.atan2(dot).abs()
}

/// Angle/dwell filter over one constant-magnification fragment. Endpoints
/// are kept; an interior point is kept iff its turning angle exceeds
/// `th_angle` and its duration exceeds `th_time`.
pub fn simplify_fragment(sub: &[ViewportSample], params: &SimplifyParams) -> Vec<Fixation> {
    let pts: Vec<Fixation> = sub.iter().map(Fixation::from_sample).collect();
    angle_time_filter(&pts, params)
}

fn angle_time_filter(pts: &[Fixation], params: &SimplifyParams) -> Vec<Fixation> {
    match pts.len() {
        0 => return Vec::new(),
        1 | 2 => return pts.to_vec(),
        _ => {}
    }
    let mut out = vec![pts[0]];
    for w in pts.windows(3) {
        let (a, p, b) = (&w[0], &w[1], &w[2]);
        let angle = turning_angle((a.x, a.y), (p.x, p.y), (b.x, b.y));
        if angle > params.th_angle && p.dur > params.th_time {
            out.push(*p);
        }
    }
    out.push(pts[pts.len() - 1]);
    out
}

/// Dispersion step over a filtered fragment.
///
/// Default: a point closer than `th_dist` to the last emitted point is
/// merged into it (its duration is added); otherwise it is emitted. With
/// `literal_dispersion_branch`, the distance is taken to the preceding
/// point and the branches are swapped. First and last points always survive.
pub fn dispersion_merge(pts: &[Fixation], params: &SimplifyParams) -> Vec<Fixation> {
    let q = pts.len();
    if q <= 1 {
        return pts.to_vec();
    }
    let th = params.th_dist.resolve(pts[0].mag);
    let mut out = vec![pts[0]];
    let mut temp = pts[0].dur;
    for i in 1..q - 1 {
        let p = pts[i];
        let accumulate = if params.literal_dispersion_branch {
            p.distance(&pts[i - 1]) >= th
        } else {
            p.distance(out.last().unwrap()) < th
        };
        if accumulate {
            temp += p.dur;
        } else {
            out.last_mut().unwrap().dur = temp;
            out.push(p);
            temp = p.dur;
        }
    }
    out.last_mut().unwrap().dur = temp;
    out.push(pts[q - 1]);
    out
}

fn simplify_once(fragments: &[&[ViewportSample]], params: &SimplifyParams) -> Vec<Fixation> {
    fragments
        .iter()
        .flat_map(|frag| dispersion_merge(&simplify_fragment(frag, params), params))
        .collect()
}

/// Full simplification: split, filter, merge, concatenate.
///
/// If the result is longer than `max_fixations`, the time and distance
/// thresholds are multiplied by [`ESCALATION_FACTOR`] and the fragment
/// pipeline re-runs until the cap holds. Fragment endpoints are never
/// dropped, so a trajectory with more than `max_fixations / 2` magnification
/// changes can still end up above the cap; it then returns the
/// endpoints-only scanpath.
pub fn simplify(traj: &RawTrajectory, params: &SimplifyParams) -> Result<Scanpath> {
    params.validate()?;
    let fragments = split_by_magnification(traj)?;
    let mut p = *params;
    let floor = fragments.iter().map(|f| f.len().min(2)).sum::<usize>();
    let mut fixations = simplify_once(&fragments, &p);
    while fixations.len() > p.max_fixations {
        if fixations.len() <= floor || !p.th_time.is_finite() {
            log::warn!(
                "{}/{}: {} fragment endpoints exceed the {} fixation cap",
                traj.wsi_id,
                traj.reader_id,
                fixations.len(),
                p.max_fixations
            );
            break;
        }
        p = p.escalated();
        fixations = simplify_once(&fragments, &p);
    }
    Ok(Scanpath {
        wsi_id: traj.wsi_id.clone(),
        reader_id: traj.reader_id.clone(),
        fixations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

    fn s(x: f64, y: f64, mag: u32, t: f64) -> ViewportSample {
        ViewportSample {
            x,
            y,
            mag: MagLevel::from_factor(mag).unwrap(),
            t,
        }
    }

    fn traj(samples: Vec<ViewportSample>) -> RawTrajectory {
        RawTrajectory {
            wsi_id: "w".into(),
            reader_id: "r".into(),
            expertise: Expertise::General,
            samples,
        }
    }

    fn px(th: f64) -> SimplifyParams {
        SimplifyParams {
            th_dist: DistanceThreshold::Level0Px { px: th },
            ..SimplifyParams::default()
        }
    }

    #[test]
    fn mag_level_bijection() {
        for (i, &f) in MagLevel::FACTORS.iter().enumerate() {
            let m = MagLevel::from_index(i).unwrap();
            assert_eq!(m.factor(), f);
            assert_eq!(MagLevel::from_factor(f), Some(m));
        }
        assert!(MagLevel::from_factor(3).is_none());
        assert!(MagLevel::ALL.windows(2).all(|w| w[0] < w[1] && w[0].factor() < w[1].factor()));
        assert_eq!(MagLevel::X1.offset(-1), None);
        assert_eq!(MagLevel::X40.offset(1), None);
        assert_eq!(MagLevel::X2.offset(1), Some(MagLevel::X4));
    }

    #[test]
    fn split_constant_mag_is_single_fragment() {
        let t = traj((0..5).map(|i| s(i as f64, 0.0, 4, 50.0)).collect());
        let frags = split_by_magnification(&t).unwrap();
        assert_eq!(frags.len(), 1);
        assert_eq!(frags[0], &t.samples[..]);
    }

    #[test]
    fn split_by_mag_fragment_lengths() {
        let mags = [1, 1, 2, 2, 1];
        let t = traj(mags.iter().enumerate().map(|(i, &m)| s(i as f64, 0.0, m, 50.0)).collect());
        let lens: Vec<usize> = split_by_magnification(&t).unwrap().iter().map(|f| f.len()).collect();
        // direct scan: boundaries where mag changes
        let mut expected = vec![1usize];
        for w in mags.windows(2) {
            if w[0] == w[1] {
                *expected.last_mut().unwrap() += 1;
            } else {
                expected.push(1);
            }
        }
        assert_eq!(lens, expected);
        assert_eq!(lens, vec![2, 2, 1]);
    }

    #[test]
    fn split_single_sample_and_empty() {
        let t = traj(vec![s(1.0, 1.0, 1, 10.0)]);
        assert_eq!(split_by_magnification(&t).unwrap().len(), 1);
        assert!(matches!(split_by_magnification(&traj(vec![])), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn turning_angle_cases() {
        assert_eq!(turning_angle((0.0, 0.0), (1.0, 0.0), (2.0, 0.0)), 0.0);
        assert!((turning_angle((0.0, 0.0), (1.0, 0.0), (1.0, 1.0)) - FRAC_PI_2).abs() < 1e-12);
        assert!((turning_angle((0.0, 0.0), (1.0, 0.0), (0.0, 0.0)) - PI).abs() < 1e-12);
        assert_eq!(turning_angle((0.0, 0.0), (0.0, 0.0), (1.0, 1.0)), 0.0);
    }

    #[test]
    fn collinear_fragment_keeps_endpoints() {
        let frag: Vec<_> = (0..5).map(|i| s(i as f64 * 10.0, 0.0, 2, 20.0)).collect();
        let out = simplify_fragment(&frag, &SimplifyParams::default());
        assert_eq!(out.len(), 2);
        assert_eq!((out[0].x, out[1].x), (0.0, 40.0));
    }

    #[test]
    fn zigzag_fragment_keeps_all_points() {
        let pts = [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (2.0, 1.0), (2.0, 2.0)];
        let frag: Vec<_> = pts.iter().map(|&(x, y)| s(x, y, 2, 500.0)).collect();
        let params = SimplifyParams {
            th_angle: FRAC_PI_4,
            ..SimplifyParams::default()
        };
        // brute-force filter: every interior point turns by pi/2 > pi/4 and dwells 500 > 100
        let expected = (1..4)
            .filter(|&i| {
                let a = turning_angle(pts[i - 1], pts[i], pts[i + 1]);
                a > params.th_angle && frag[i].t > params.th_time
            })
            .count()
            + 2;
        let out = simplify_fragment(&frag, &params);
        assert_eq!(out.len(), expected);
        assert_eq!(out.len(), 5);
    }

    #[test]
    fn two_point_fragment_is_unchanged() {
        let frag = vec![s(0.0, 0.0, 1, 10.0), s(5.0, 5.0, 1, 20.0)];
        let out = simplify_fragment(&frag, &SimplifyParams::default());
        assert_eq!(out, frag.iter().map(Fixation::from_sample).collect::<Vec<_>>());
    }

    #[test]
    fn dispersion_merges_close_points() {
        let m = MagLevel::X10;
        let pts = vec![
            Fixation::new(0.0, 0.0, m, 100.0),
            Fixation::new(10.0, 0.0, m, 40.0),
            Fixation::new(500.0, 0.0, m, 70.0),
        ];
        let out = dispersion_merge(&pts, &px(100.0));
        assert_eq!(out, vec![Fixation::new(0.0, 0.0, m, 140.0), Fixation::new(500.0, 0.0, m, 70.0)]);
    }

    #[test]
    fn dispersion_far_points_pass_through() {
        let m = MagLevel::X4;
        let pts: Vec<_> = (0..4).map(|i| Fixation::new(i as f64 * 300.0, 0.0, m, 50.0)).collect();
        assert_eq!(dispersion_merge(&pts, &px(100.0)), pts);
        assert_eq!(dispersion_merge(&pts[..1], &px(100.0)), pts[..1].to_vec());
    }

    #[test]
    fn literal_branch_inverts_the_condition() {
        let m = MagLevel::X10;
        let pts = vec![
            Fixation::new(0.0, 0.0, m, 100.0),
            Fixation::new(10.0, 0.0, m, 40.0),
            Fixation::new(500.0, 0.0, m, 70.0),
            Fixation::new(505.0, 0.0, m, 30.0),
        ];
        let p = SimplifyParams {
            literal_dispersion_branch: true,
            ..px(100.0)
        };
        // q=2: D=10 < 100 -> emit (10,0), Temp=40
        // q=3: D=490 >= 100 -> Temp=110, not emitted
        // last point always appended
        let out = dispersion_merge(&pts, &p);
        assert_eq!(
            out,
            vec![
                Fixation::new(0.0, 0.0, m, 100.0),
                Fixation::new(10.0, 0.0, m, 110.0),
                Fixation::new(505.0, 0.0, m, 30.0),
            ]
        );
    }

    #[test]
    fn simplify_single_sample() {
        let sp = simplify(&traj(vec![s(3.0, 4.0, 1, 10.0)]), &SimplifyParams::default()).unwrap();
        assert_eq!(sp.fixations, vec![Fixation::new(3.0, 4.0, MagLevel::X1, 10.0)]);
    }

    #[test]
    fn simplify_keeps_magnification_boundaries() {
        let t = traj(vec![s(0.0, 0.0, 1, 10.0), s(100.0, 0.0, 1, 10.0), s(200.0, 50.0, 2, 10.0)]);
        let sp = simplify(&t, &px(1000.0)).unwrap();
        assert_eq!(sp.len(), 3);
        assert_eq!(sp.mags(), vec![MagLevel::X1, MagLevel::X1, MagLevel::X2]);
    }

    #[test]
    fn cap_is_enforced_by_escalation() {
        // long zig-zag with long dwells: every interior point passes the filter
        let samples: Vec<_> = (0..400)
            .map(|i| s((i / 2) as f64 * 1000.0, (i % 2) as f64 * 1000.0 + (i / 2) as f64, 10, 150.0 + (i % 7) as f64 * 40.0))
            .collect();
        let t = traj(samples);
        let params = SimplifyParams {
            max_fixations: 20,
            ..px(10.0)
        };
        let sp = simplify(&t, &params).unwrap();
        assert!(sp.len() <= 20, "{}", sp.len());
        assert!(sp.len() >= 2);
    }

    #[test]
    fn invalid_params_are_rejected() {
        let t = traj(vec![s(0.0, 0.0, 1, 1.0)]);
        let bad = SimplifyParams {
            max_fixations: 1,
            ..SimplifyParams::default()
        };
        assert!(matches!(simplify(&t, &bad), Err(Error::InvalidConfig(_))));
        let bad = SimplifyParams {
            th_time: 0.0,
            ..SimplifyParams::default()
        };
        assert!(simplify(&t, &bad).is_err());
    }

    #[test]
    fn viewport_fraction_threshold_scales_with_magnification() {
        let th = DistanceThreshold::ViewportFraction {
            fraction: 0.25,
            viewport_px_at_1x: 10_240.0,
        };
        assert_eq!(th.resolve(MagLevel::X1), 2560.0);
        assert_eq!(th.resolve(MagLevel::X10), 256.0);
    }
}
