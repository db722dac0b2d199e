//! Stage 1: a transformer over patch tokens that predicts a per-magnification
//! attention heatmap, trained with a correlation loss.

use pathscan_autodiff::{adam_step, AdamConfig, AdamState, Bound, Checkpoint, Graph, ParamStore, Scalar, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureGrid;
use crate::heatmap::{GridShape, Heatmap};
use crate::nn;
use crate::trajectory::MagLevel;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeatmapModelConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for HeatmapModelConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            layers: 2,
            heads: 4,
            ffn_hidden: 64,
            lr: 1e-3,
            epochs: 100,
            seed: 0,
        }
    }
}

impl HeatmapModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::InvalidConfig(format!(
                "dim {} must be a positive multiple of heads {}",
                self.dim, self.heads
            )));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig(format!("lr {} must be >= 0", self.lr)));
        }
        Ok(())
    }
}

/// Trained (or freshly initialized) network for one magnification.
#[derive(Clone, Debug)]
pub struct HeatmapModel<T> {
    pub cfg: HeatmapModelConfig,
    pub mag: MagLevel,
    pub rows: usize,
    pub cols: usize,
    pub params: ParamStore<T>,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    kind: String,
    mag: MagLevel,
    rows: usize,
    cols: usize,
    config: HeatmapModelConfig,
    #[serde(default)]
    extra: serde_json::Value,
}

impl<T: Scalar> HeatmapModel<T> {
    /// Positional table starts from a 2D sinusoid of patch centres scaled
    /// to unit norm, so tokens are spatially identifiable from step one.
    pub fn init(cfg: &HeatmapModelConfig, mag: MagLevel, rows: usize, cols: usize) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut p = ParamStore::new();
        let d = cfg.dim;
        let s = (2.0 / d as f64).sqrt();
        let mut pos = Vec::with_capacity(rows * cols * d);
        for r in 0..rows {
            for c in 0..cols {
                let code = nn::sincos_2d((c as f64 + 0.5) / cols as f64, (r as f64 + 0.5) / rows as f64, d);
                pos.extend(code.iter().map(|v| T::from_f64(v * s)));
            }
        }
        p.insert("pos", Tensor::new(vec![rows * cols, d], pos)?);
        for l in 0..cfg.layers {
            nn::add_encoder_layer(&mut p, &mut rng, &format!("enc.{l}"), d, cfg.ffn_hidden);
        }
        if cfg.layers > 0 {
            nn::add_layernorm(&mut p, "ln_f", d);
        }
        nn::add_linear(&mut p, &mut rng, "dec", d, 1);
        Ok(Self {
            cfg: cfg.clone(),
            mag,
            rows,
            cols,
            params: p,
        })
    }

    fn check_grid(&self, grid: &FeatureGrid) -> Result<()> {
        if grid.dim != self.cfg.dim || grid.rows != self.rows || grid.cols != self.cols {
            return Err(Error::Contract(format!(
                "feature grid {}x{}x{} does not match model {}x{}x{}",
                grid.rows, grid.cols, grid.dim, self.rows, self.cols, self.cfg.dim
            )));
        }
        Ok(())
    }

    pub fn to_checkpoint(&self, extra: serde_json::Value) -> Result<Checkpoint<T>> {
        let meta = Meta {
            kind: "heatmap".into(),
            mag: self.mag,
            rows: self.rows,
            cols: self.cols,
            config: self.cfg.clone(),
            extra,
        };
        let mut ck = Checkpoint::new(serde_json::to_string(&meta)?);
        for (n, t) in self.params.iter() {
            ck.push(n, t.clone());
        }
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint<T>) -> Result<Self> {
        let meta: Meta = serde_json::from_str(&ck.meta)?;
        if meta.kind != "heatmap" {
            return Err(Error::Format(format!("checkpoint kind {} is not heatmap", meta.kind)));
        }
        let mut m = Self::init(&meta.config, meta.mag, meta.rows, meta.cols)?;
        m.params.load_entries(&ck.entries)?;
        Ok(m)
    }

    /// Contextual tokens z_L, `[rows*cols, dim]`.
    pub fn encode(&self, grid: &FeatureGrid) -> Result<FeatureGrid> {
        self.check_grid(grid)?;
        let g = Graph::new();
        let b = self.params.bind_frozen(&g)?;
        let x = g.constant(grid_tensor(grid))?;
        let z = encode_graph(&g, &b, &self.cfg, x)?;
        let data = g.value(z).data().iter().map(|v| v.as_f64() as f32).collect();
        FeatureGrid::new(grid.mag, grid.rows, grid.cols, grid.dim, grid.patch_px, data)
    }

    /// Raw per-patch scores before normalization.
    pub fn scores(&self, grid: &FeatureGrid) -> Result<Vec<f64>> {
        self.check_grid(grid)?;
        let g = Graph::new();
        let b = self.params.bind_frozen(&g)?;
        let x = g.constant(grid_tensor(grid))?;
        let z = encode_graph(&g, &b, &self.cfg, x)?;
        let s = nn::linear(&g, &b, "dec", z)?;
        Ok(g.value(s).to_f64_vec())
    }

    pub fn predict(&self, grid: &FeatureGrid) -> Result<Heatmap> {
        let s = self.scores(grid)?;
        decode_scores(self.mag, GridShape::of(grid), s)
    }
}

pub fn grid_tensor<T: Scalar>(grid: &FeatureGrid) -> Tensor<T> {
    Tensor::new(
        vec![grid.len(), grid.dim],
        grid.data.iter().map(|&v| T::from_f64(v as f64)).collect(),
    )
    .expect("grid shape matches data")
}

/// Adds positional embeddings and runs the encoder stack.
pub fn encode_graph<T: Scalar>(g: &Graph<T>, b: &Bound<'_, T>, cfg: &HeatmapModelConfig, x: Var) -> Result<Var> {
    let mut h = g.add(x, b.get("pos"))?;
    for l in 0..cfg.layers {
        h = nn::encoder_layer(g, b, &format!("enc.{l}"), h, cfg.heads)?;
    }
    if cfg.layers > 0 {
        h = nn::layernorm(g, b, "ln_f", h)?;
    }
    Ok(h)
}

/// Min-max normalized heatmap from raw scores; a constant score map yields
/// all zeros.
pub fn decode_scores(mag: MagLevel, shape: GridShape, scores: Vec<f64>) -> Result<Heatmap> {
    let mut h = Heatmap::new(mag, shape, scores)?;
    h.normalize_min_max();
    Ok(h)
}

/// Pearson correlation over cells.
pub fn cc(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Contract(format!("cc over {} and {} cells", a.len(), b.len())));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::Degenerate("correlation of a constant map".into()));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// `1 - cc(pred, gt)` recorded on the graph; `gt` is fixed.
pub fn loss_cc<T: Scalar>(g: &Graph<T>, pred: Var, gt: &[f64]) -> Result<Var> {
    let n = gt.len();
    if g.value(pred).numel() != n {
        return Err(Error::Contract(format!("prediction has {} cells, target {n}", g.value(pred).numel())));
    }
    let mb = gt.iter().sum::<f64>() / n as f64;
    let bc: Vec<f64> = gt.iter().map(|v| v - mb).collect();
    let nb = bc.iter().map(|v| v * v).sum::<f64>().sqrt();
    if nb == 0.0 {
        return Err(Error::Degenerate("correlation against a constant target".into()));
    }
    let p = g.reshape(pred, &[n])?;
    let mean = g.mean(p)?;
    let pc = g.sub(p, mean)?;
    let bcv = g.constant(Tensor::from_f64_slice(&[n], &bc)?)?;
    let num = g.sum(g.mul(pc, bcv)?)?;
    let sq = g.sum(g.mul(pc, pc)?)?;
    let den = g.scale(g.sqrt(sq)?, T::from_f64(nb))?;
    let r = g.div(num, den)?;
    let one = g.constant(Tensor::scalar(T::from_f64(1.0)))?;
    Ok(g.sub(one, r)?)
}

/// One training pair: input features and the ground-truth heatmap.
pub struct HeatmapExample<'a> {
    pub grid: &'a FeatureGrid,
    pub target: &'a Heatmap,
}

pub struct HeatmapTraining<T> {
    pub model: HeatmapModel<T>,
    /// Mean loss per epoch.
    pub losses: Vec<f64>,
    pub adam: AdamState<T>,
}

/// Per-example Adam updates over a seeded shuffled order each epoch.
/// Examples whose target is constant are skipped with a warning.
pub fn train_heatmap<T: Scalar>(
    examples: &[HeatmapExample<'_>],
    mag: MagLevel,
    cfg: &HeatmapModelConfig,
) -> Result<HeatmapTraining<T>> {
    train_heatmap_with(examples, mag, cfg, |_, _, _| Ok(()))
}

/// As [`train_heatmap`], calling `on_epoch(model, epoch, mean_loss)` after
/// every epoch; an error from the callback aborts training.
pub fn train_heatmap_with<T: Scalar>(
    examples: &[HeatmapExample<'_>],
    mag: MagLevel,
    cfg: &HeatmapModelConfig,
    mut on_epoch: impl FnMut(&HeatmapModel<T>, usize, f64) -> Result<()>,
) -> Result<HeatmapTraining<T>> {
    let usable: Vec<&HeatmapExample> = examples
        .iter()
        .filter(|e| {
            let (lo, hi) = (e.target.min(), e.target.max());
            if hi > lo {
                true
            } else {
                log::warn!("skipping constant {} target", e.target.mag);
                false
            }
        })
        .collect();
    let first = usable
        .first()
        .ok_or_else(|| Error::InvalidInput("no usable heatmap training examples".into()))?;
    let (rows, cols) = (first.grid.rows, first.grid.cols);
    let mut model = HeatmapModel::<T>::init(cfg, mag, rows, cols)?;
    for e in &usable {
        model.check_grid(e.grid)?;
        if e.target.rows() != rows || e.target.cols() != cols {
            return Err(Error::Contract("target shape differs from feature grid".into()));
        }
    }
    let mut adam = AdamState::new(&model.params);
    let opt = AdamConfig::with_lr(cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x68656174);
    let mut order: Vec<usize> = (0..usable.len()).collect();
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &i in &order {
            let e = usable[i];
            let g = Graph::new();
            let b = model.params.bind(&g)?;
            let x = g.constant(grid_tensor(e.grid))?;
            let z = encode_graph(&g, &b, cfg, x)?;
            let s = nn::linear(&g, &b, "dec", z)?;
            let loss = loss_cc(&g, s, &e.target.values)?;
            let lv = g.item(loss).as_f64();
            if !lv.is_finite() {
                return Err(Error::Degenerate(format!("non-finite loss at epoch {epoch}")));
            }
            total += lv;
            g.backward(loss)?;
            let grads = b.grads(&g);
            drop(b);
            adam_step(&mut model.params, &grads, &mut adam, &opt)?;
        }
        let mean = total / usable.len() as f64;
        log::info!("heatmap {mag} epoch {} loss {mean:.6}", epoch + 1);
        losses.push(mean);
        on_epoch(&model, epoch + 1, mean)?;
    }
    Ok(HeatmapTraining { model, losses, adam })
}
