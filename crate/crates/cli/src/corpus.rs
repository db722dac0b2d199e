//! On-disk synthetic corpus: grade maps, feature grids, trajectories and a
//! manifest listing every file with its SHA-256.
//!
//! ```text
//! <dir>/manifest.json
//! <dir>/manifest.sha256
//! <dir>/grades/<wsi>.txt (+ .json sidecar)
//! <dir>/features/<wsi>.<factor>x.psft
//! <dir>/trajectories.jsonl
//! ```

use std::collections::BTreeMap;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use pathscan::features::{embed, patchify, FeatureGrid, FeatureProvider, FileProvider};
use pathscan::io::{read_trajectories, write_trajectories};
use pathscan::synth::{gen_wsi, simulate_reader, GradeMap};
use pathscan::{MagLevel, RawTrajectory, WsiBounds};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{derive_seed, Config};
use crate::error::{io_err, CliError, Context, Result};
use crate::output::{provenance, write_atomic};

pub const MANIFEST: &str = "manifest.json";
pub const MANIFEST_HASH: &str = "manifest.sha256";
const GRADES_DIR: &str = "grades";
const FEATURES_DIR: &str = "features";
const TRAJECTORIES: &str = "trajectories.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WsiEntry {
    pub id: String,
    /// Grade map path relative to the corpus root.
    pub grades: String,
    pub width: f64,
    pub height: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub provenance: serde_json::Value,
    pub wsis: Vec<WsiEntry>,
    pub readers: Vec<String>,
    pub trajectories: String,
    pub features_dir: String,
    pub feature_mags: Vec<MagLevel>,
    /// Relative path to hex SHA-256 for every data file.
    pub files: BTreeMap<String, String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let d = Sha256::digest(bytes);
    d.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn wsi_id(i: usize) -> String {
    format!("wsi_{i:03}")
}

pub fn reader_id(r: usize) -> String {
    format!("reader_{r:02}")
}

fn is_non_empty_dir(p: &Path) -> Result<bool> {
    if !p.exists() {
        return Ok(false);
    }
    if !p.is_dir() {
        return Err(CliError::Usage(format!("{} exists and is not a directory", p.display())));
    }
    Ok(std::fs::read_dir(p).map_err(io_err(p))?.next().is_some())
}

/// Writes a corpus of `cfg.gen.wsis` slides read by `cfg.gen.readers`
/// readers each and returns the manifest hash. Without `force`, refuses to
/// write into a non-empty directory; with it, replaces the corpus files
/// and leaves anything else in place.
pub fn generate(cfg: &Config, out: &Path, force: bool) -> Result<String> {
    let g = &cfg.gen;
    if g.wsis == 0 || g.readers == 0 {
        return Err(CliError::Usage("--wsis and --readers must be >= 1".into()));
    }
    if is_non_empty_dir(out)? {
        if !force {
            return Err(CliError::Usage(format!(
                "{} is not empty; pass --force to overwrite",
                out.display()
            )));
        }
        for sub in [GRADES_DIR, FEATURES_DIR] {
            let p = out.join(sub);
            if p.exists() {
                std::fs::remove_dir_all(&p).map_err(io_err(&p))?;
            }
        }
    }
    for sub in [GRADES_DIR, FEATURES_DIR] {
        let p = out.join(sub);
        std::fs::create_dir_all(&p).map_err(io_err(&p))?;
    }

    let mut files = BTreeMap::new();
    let mut wsis = Vec::with_capacity(g.wsis);
    let mut trajs: Vec<RawTrajectory> = Vec::with_capacity(g.wsis * g.readers);
    let readers: Vec<String> = (0..g.readers).map(reader_id).collect();
    for i in 0..g.wsis {
        let id = wsi_id(i);
        let map = gen_wsi(derive_seed(cfg.seed, &format!("wsi/{id}")), g.grid_rows, g.grid_cols, &g.mix, g.cell_size)
            .ctx(|| format!("generating {id}"))?;
        let rel = format!("{GRADES_DIR}/{id}.txt");
        let path = out.join(&rel);
        map.save(&path).ctx(|| format!("writing {}", path.display()))?;
        files.insert(rel.clone(), hash_file(&path)?);
        let side = format!("{GRADES_DIR}/{id}.json");
        files.insert(side.clone(), hash_file(&out.join(&side))?);
        for &mag in &g.feature_mags {
            let grid = featurize(&map, mag, cfg).ctx(|| format!("featurizing {id} at {mag}"))?;
            let rel = format!("{FEATURES_DIR}/{id}.{}x.psft", mag.factor());
            let mut bytes = Vec::new();
            grid.write_to(&mut bytes).ctx(|| format!("encoding {rel}"))?;
            write_atomic(&out.join(&rel), &bytes)?;
            files.insert(rel, sha256_hex(&bytes));
        }
        for r in &readers {
            let seed = derive_seed(cfg.seed, &format!("reader/{id}/{r}"));
            trajs.push(
                simulate_reader(&map, &id, r, &g.profile, seed, g.samples_per_reader)
                    .ctx(|| format!("simulating {r} on {id}"))?,
            );
        }
        let b = map.bounds();
        wsis.push(WsiEntry {
            id,
            grades: rel,
            width: b.width,
            height: b.height,
        });
    }
    let mut bytes = Vec::new();
    write_trajectories(&mut bytes, &trajs).ctx(|| "encoding trajectories".into())?;
    write_atomic(&out.join(TRAJECTORIES), &bytes)?;
    files.insert(TRAJECTORIES.into(), sha256_hex(&bytes));

    let manifest = Manifest {
        provenance: provenance("gen", cfg),
        wsis,
        readers,
        trajectories: TRAJECTORIES.into(),
        features_dir: FEATURES_DIR.into(),
        feature_mags: g.feature_mags.clone(),
        files,
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    let hash = sha256_hex(text.as_bytes());
    write_atomic(&out.join(MANIFEST), text.as_bytes())?;
    write_atomic(&out.join(MANIFEST_HASH), format!("{hash}  {MANIFEST}\n").as_bytes())?;
    Ok(hash)
}

pub fn featurize(map: &GradeMap, mag: MagLevel, cfg: &Config) -> pathscan::Result<FeatureGrid> {
    embed(&patchify(map, mag, cfg.features.patch_px_for(mag))?, cfg.features.dim, cfg.features.seed)
}

fn hash_file(p: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(p).map_err(io_err(p))?))
}

/// A generated corpus opened for reading; every listed file is verified
/// against its recorded hash.
pub struct Corpus {
    pub root: PathBuf,
    pub manifest: Manifest,
}

impl Corpus {
    pub fn open(root: &Path) -> Result<Self> {
        let mpath = root.join(MANIFEST);
        let text = std::fs::read_to_string(&mpath).map_err(io_err(&mpath))?;
        let manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| CliError::Data(format!("{}: invalid manifest: {e}", mpath.display())))?;
        for (rel, want) in &manifest.files {
            let got = hash_file(&root.join(rel))?;
            if &got != want {
                return Err(CliError::Data(format!("{rel}: hash mismatch with manifest")));
            }
        }
        if manifest.wsis.is_empty() {
            return Err(CliError::Data(format!("{}: corpus lists no slides", mpath.display())));
        }
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
        })
    }

    pub fn wsi_ids(&self) -> Vec<String> {
        self.manifest.wsis.iter().map(|w| w.id.clone()).collect()
    }

    pub fn entry(&self, id: &str) -> Result<&WsiEntry> {
        self.manifest
            .wsis
            .iter()
            .find(|w| w.id == id)
            .ok_or_else(|| CliError::Data(format!("slide {id} is not in the corpus")))
    }

    pub fn bounds(&self, id: &str) -> Result<WsiBounds> {
        let e = self.entry(id)?;
        WsiBounds::new(e.width, e.height).ctx(|| format!("bounds of {id}"))
    }

    pub fn all_bounds(&self) -> BTreeMap<String, WsiBounds> {
        self.manifest
            .wsis
            .iter()
            .filter_map(|w| WsiBounds::new(w.width, w.height).ok().map(|b| (w.id.clone(), b)))
            .collect()
    }

    pub fn provider(&self) -> FileProvider {
        FileProvider::new(self.root.join(&self.manifest.features_dir), self.all_bounds())
    }

    pub fn grid(&self, id: &str, mag: MagLevel) -> Result<FeatureGrid> {
        self.entry(id)?;
        self.provider().grid(id, mag).ctx(|| format!("{mag} features of {id}"))
    }

    pub fn grade_map(&self, id: &str) -> Result<GradeMap> {
        let p = self.root.join(&self.entry(id)?.grades);
        GradeMap::load(&p).ctx(|| format!("reading {}", p.display()))
    }

    pub fn trajectories(&self) -> Result<Vec<RawTrajectory>> {
        let p = self.root.join(&self.manifest.trajectories);
        let f = std::fs::File::open(&p).map_err(io_err(&p))?;
        read_trajectories(BufReader::new(f)).ctx(|| format!("parsing {}", p.display()))
    }
}
