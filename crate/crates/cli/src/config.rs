//! TOML run configuration. Every stochastic component draws its seed from
//! the single top-level `seed`, which `PATHSCAN_SEED` overrides.

use std::path::Path;

use pathscan::features::{FeatureConfig, PatchOverride};
use pathscan::heatmap_model::HeatmapModelConfig;
use pathscan::inference::{IorConfig, MagMode};
use pathscan::metrics::{AlignScoring, TokSimMatch};
use pathscan::scanpath_model::ScanpathModelConfig;
use pathscan::synth::{GradeMix, ReaderProfile};
use pathscan::{MagLevel, SimplifyParams};
use serde::{Deserialize, Serialize};

use crate::error::{io_err, CliError, Result};

pub const SEED_ENV: &str = "PATHSCAN_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub gen: GenConfig,
    pub features: FeatureConfig,
    pub simplify: SimplifyParams,
    pub heatmap: HeatmapModelConfig,
    pub scanpath: ScanpathModelConfig,
    pub inference: InferenceConfig,
    pub eval: EvalConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub wsis: usize,
    pub readers: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    /// Level-0 pixels per grade-map cell.
    pub cell_size: f64,
    pub samples_per_reader: usize,
    pub mix: GradeMix,
    pub profile: ReaderProfile,
    /// Levels at which feature grids are written.
    pub feature_mags: Vec<MagLevel>,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            wsis: 10,
            readers: 3,
            grid_rows: 32,
            grid_cols: 32,
            cell_size: 320.0,
            samples_per_reader: 600,
            mix: GradeMix::default(),
            profile: ReaderProfile::default(),
            feature_mags: MagLevel::ALL.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    pub mode: MagMode,
    /// Fixations per rollout; the training mean length when absent.
    pub n: Option<usize>,
    /// Rollouts per slide.
    pub samples: usize,
    pub ior: IorConfig,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            mode: MagMode::ProbMag,
            n: None,
            samples: 1,
            ior: IorConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub scoring: AlignScoring,
    pub toksim: TokSimMatch,
    /// Cells per side of the grid on which scanpath heatmaps are scored.
    pub grid_cells: usize,
    /// Magnification rule for next-fixation evaluation.
    pub next_mag_mode: MagMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            scoring: AlignScoring::default(),
            toksim: TokSimMatch::default(),
            grid_cells: 32,
            next_mag_mode: MagMode::ProbMagArgmax,
        }
    }
}

/// Default per-level patch sizes keep every grid of a 10240 px slide small:
/// 8x8 up to 4X, 20x20 at 10X and 32x32 at 20X and 40X.
pub fn default_patch_overrides() -> Vec<PatchOverride> {
    [(MagLevel::X1, 32), (MagLevel::X2, 64), (MagLevel::X4, 128), (MagLevel::X10, 128), (MagLevel::X20, 160), (MagLevel::X40, 320)]
        .into_iter()
        .map(|(mag, patch_px)| PatchOverride { mag, patch_px })
        .collect()
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 0,
            gen: GenConfig::default(),
            features: FeatureConfig {
                patch_overrides: default_patch_overrides(),
                ..FeatureConfig::default()
            },
            simplify: SimplifyParams::default(),
            heatmap: HeatmapModelConfig::default(),
            scanpath: ScanpathModelConfig::default(),
            inference: InferenceConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// SplitMix64 finalizer over the seed and an FNV-1a hash of `tag`.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = seed ^ h;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl Config {
    /// Reads `path` (defaults when absent), applies the seed override from
    /// the environment and resolves every component seed.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => Self::parse(&std::fs::read_to_string(p).map_err(io_err(p)), p)?,
            None => Self::default(),
        };
        if let Ok(v) = std::env::var(SEED_ENV) {
            cfg.seed = v
                .trim()
                .parse()
                .map_err(|_| CliError::Usage(format!("{SEED_ENV}={v} is not an unsigned integer")))?;
        }
        cfg.resolve();
        cfg.validate()?;
        Ok(cfg)
    }

    fn parse(text: &std::result::Result<String, CliError>, path: &Path) -> Result<Self> {
        let text = match text {
            Ok(t) => t,
            Err(CliError::Io { source, .. }) => {
                return Err(CliError::Usage(format!("cannot read config {}: {source}", path.display())))
            }
            Err(e) => return Err(CliError::Usage(e.to_string())),
        };
        toml::from_str(text).map_err(|source| CliError::Config {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn resolve(&mut self) {
        self.features.seed = derive_seed(self.seed, "features");
        self.heatmap.seed = derive_seed(self.seed, "heatmap");
        self.scanpath.seed = derive_seed(self.seed, "scanpath");
    }

    pub fn validate(&self) -> Result<()> {
        let usage = |e: pathscan::Error| CliError::Usage(e.to_string());
        self.simplify.validate().map_err(usage)?;
        self.heatmap.validate().map_err(usage)?;
        self.scanpath.validate().map_err(usage)?;
        self.gen.profile.validate().map_err(usage)?;
        if self.eval.grid_cells == 0 || self.inference.samples == 0 {
            return Err(CliError::Usage("eval.grid_cells and inference.samples must be >= 1".into()));
        }
        if self.inference.n == Some(0) {
            return Err(CliError::Usage("inference.n must be >= 1".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}
