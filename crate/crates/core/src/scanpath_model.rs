//! Stage 2: foveated working memory, single-query transformer aggregation,
//! fixation-heatmap head and magnification head, trained by behavior
//! cloning on scanpath prefixes.

use std::collections::BTreeMap;

use pathscan_autodiff::{adam_step, AdamConfig, AdamState, Bound, Checkpoint, Graph, ParamStore, Scalar, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::TransitionMatrix;
use crate::error::{Error, Result};
use crate::features::{token_at, FeatureGrid};
use crate::heatmap::{fixation_target, GridShape, Heatmap, SigmaRule};
use crate::nn;
use crate::trajectory::{Fixation, MagLevel, Scanpath};

pub const LOG_CLAMP: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScanpathModelConfig {
    /// Feature dimension D of the input grids.
    pub d_in: usize,
    /// Model width C.
    pub dim: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    /// Width of the two hidden layers of the heatmap MLP.
    pub mlp_hidden: usize,
    pub lambda_mag: f64,
    pub gamma: f64,
    pub beta: f64,
    /// Fixed class weights; estimated from training targets when absent.
    pub class_weights: Option<[f64; MagLevel::COUNT]>,
    pub temporal_cap: usize,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Random subset of prefix examples visited per epoch.
    pub examples_per_epoch: Option<usize>,
    pub seed: u64,
}

impl Default for ScanpathModelConfig {
    fn default() -> Self {
        Self {
            d_in: 32,
            dim: 32,
            enc_layers: 1,
            dec_layers: 1,
            heads: 4,
            ffn_hidden: 64,
            mlp_hidden: 64,
            lambda_mag: 1.0,
            gamma: 2.0,
            beta: 4.0,
            class_weights: None,
            temporal_cap: 150,
            lr: 1e-3,
            epochs: 20,
            batch_size: 8,
            examples_per_epoch: None,
            seed: 0,
        }
    }
}

impl ScanpathModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::InvalidConfig(format!(
                "dim {} must be a positive multiple of heads {}",
                self.dim, self.heads
            )));
        }
        if self.d_in == 0 || self.mlp_hidden == 0 || self.ffn_hidden == 0 || self.temporal_cap == 0 {
            return Err(Error::InvalidConfig("widths and temporal_cap must be positive".into()));
        }
        if !(self.gamma > 0.0 && self.beta > 0.0) {
            return Err(Error::InvalidConfig("focal gamma and beta must be > 0".into()));
        }
        if !(self.lambda_mag >= 0.0) || !(self.lr >= 0.0) {
            return Err(Error::InvalidConfig("lambda_mag and lr must be >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenKind {
    Wsi,
    Viewport,
}

/// Raw inputs of the working memory before embedding: the WSI tokens of the
/// coarse grid followed by one viewport token per prior fixation.
#[derive(Clone, Debug)]
pub struct MemoryLayout {
    pub kinds: Vec<TokenKind>,
    /// `[alpha, D]` row-major.
    pub features: Vec<f64>,
    /// Normalized (x, y) per token.
    pub positions: Vec<(f64, f64)>,
    pub mags: Vec<MagLevel>,
    pub n_wsi: usize,
}

impl MemoryLayout {
    pub fn len(&self) -> usize {
        self.kinds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kinds.is_empty()
    }

    pub fn n_viewport(&self) -> usize {
        self.len() - self.n_wsi
    }
}

/// Slide extent covered by a grid, in level-0 pixels.
fn extent(grid: &FeatureGrid) -> (f64, f64) {
    (grid.cols as f64 * grid.patch_px, grid.rows as f64 * grid.patch_px)
}

pub fn layout_memory(f2x: &FeatureGrid, history: &[Fixation], f10x: &FeatureGrid) -> Result<MemoryLayout> {
    if f2x.dim != f10x.dim {
        return Err(Error::Contract(format!("grid dims differ: {} vs {}", f2x.dim, f10x.dim)));
    }
    let (w, h) = extent(f2x);
    let n = f2x.len() + history.len();
    let mut out = MemoryLayout {
        kinds: Vec::with_capacity(n),
        features: Vec::with_capacity(n * f2x.dim),
        positions: Vec::with_capacity(n),
        mags: Vec::with_capacity(n),
        n_wsi: f2x.len(),
    };
    for r in 0..f2x.rows {
        for c in 0..f2x.cols {
            out.kinds.push(TokenKind::Wsi);
            out.features.extend(f2x.token(r, c).iter().map(|&v| v as f64));
            let (x, y) = f2x.cell_center(r, c);
            out.positions.push((x / w, y / h));
            out.mags.push(f2x.mag);
        }
    }
    for f in history {
        let tok = token_at(f10x, f.x, f.y)?;
        out.kinds.push(TokenKind::Viewport);
        out.features.extend(tok.iter().map(|&v| v as f64));
        out.positions.push((f.x / w, f.y / h));
        out.mags.push(f.mag);
    }
    Ok(out)
}

/// Cumulative magnification count of a fixation history.
pub fn cumulative_mag_count(history: &[Fixation]) -> [u32; MagLevel::COUNT] {
    let mut cm = [0u32; MagLevel::COUNT];
    for f in history {
        cm[f.mag.index()] += 1;
    }
    cm
}

/// `w_c = N / (C * N_c)`, zero for classes without samples.
pub fn class_weights(counts: &[usize; MagLevel::COUNT]) -> [f64; MagLevel::COUNT] {
    let n: usize = counts.iter().sum();
    let mut w = [0.0; MagLevel::COUNT];
    for (wc, &nc) in w.iter_mut().zip(counts) {
        if nc > 0 {
            *wc = n as f64 / (MagLevel::COUNT as f64 * nc as f64);
        }
    }
    w
}

/// Values recorded alongside the weights for inference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanpathModelMeta {
    pub mean_length: f64,
    pub transition: Option<TransitionMatrix>,
    pub class_weights: [f64; MagLevel::COUNT],
}

impl Default for ScanpathModelMeta {
    fn default() -> Self {
        Self {
            mean_length: 0.0,
            transition: None,
            class_weights: [1.0; MagLevel::COUNT],
        }
    }
}

#[derive(Clone, Debug)]
pub struct ScanpathModel<T> {
    pub cfg: ScanpathModelConfig,
    pub meta: ScanpathModelMeta,
    pub params: ParamStore<T>,
}

#[derive(Serialize, Deserialize)]
struct CkMeta {
    kind: String,
    config: ScanpathModelConfig,
    model: ScanpathModelMeta,
    #[serde(default)]
    extra: serde_json::Value,
}

/// Prediction for one step.
#[derive(Clone, Debug)]
pub struct StepOutput {
    /// Fixation heatmap on the fine grid, values in (0, 1).
    pub heatmap: Heatmap,
    /// Sigmoid magnification activations.
    pub mag: [f64; MagLevel::COUNT],
}

/// Per-example loss parts.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub fix: f64,
    pub mag: f64,
    pub total: f64,
}

impl<T: Scalar> ScanpathModel<T> {
    pub fn init(cfg: &ScanpathModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut p = ParamStore::new();
        let c = cfg.dim;
        nn::add_linear(&mut p, &mut rng, "in", cfg.d_in, c);
        let emb_std = (1.0 / c as f64).sqrt();
        p.insert("emb.scale", nn::normal(&mut rng, &[2, c], emb_std));
        p.insert("emb.time", nn::normal(&mut rng, &[cfg.temporal_cap, c], emb_std));
        p.insert("emb.mag", nn::normal(&mut rng, &[MagLevel::COUNT, c], emb_std));
        for l in 0..cfg.enc_layers {
            nn::add_encoder_layer(&mut p, &mut rng, &format!("enc.{l}"), c, cfg.ffn_hidden);
        }
        p.insert("query", nn::normal(&mut rng, &[1, c], emb_std));
        for l in 0..cfg.dec_layers {
            nn::add_cross_layer(&mut p, &mut rng, &format!("dec.{l}"), c, cfg.ffn_hidden);
        }
        nn::add_linear(&mut p, &mut rng, "mlp_h.1", c, cfg.mlp_hidden);
        nn::add_linear(&mut p, &mut rng, "mlp_h.2", cfg.mlp_hidden, cfg.mlp_hidden);
        nn::add_linear(&mut p, &mut rng, "mlp_h.3", cfg.mlp_hidden, cfg.d_in);
        nn::add_linear(&mut p, &mut rng, "mag", MagLevel::COUNT, MagLevel::COUNT);
        Ok(Self {
            cfg: cfg.clone(),
            meta: ScanpathModelMeta::default(),
            params: p,
        })
    }

    pub fn to_checkpoint(&self, extra: serde_json::Value) -> Result<Checkpoint<T>> {
        let meta = CkMeta {
            kind: "scanpath".into(),
            config: self.cfg.clone(),
            model: self.meta.clone(),
            extra,
        };
        let mut ck = Checkpoint::new(serde_json::to_string(&meta)?);
        for (n, t) in self.params.iter() {
            ck.push(n, t.clone());
        }
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint<T>) -> Result<Self> {
        let meta: CkMeta = serde_json::from_str(&ck.meta)?;
        if meta.kind != "scanpath" {
            return Err(Error::Format(format!("checkpoint kind {} is not scanpath", meta.kind)));
        }
        let mut m = Self::init(&meta.config)?;
        m.params.load_entries(&ck.entries)?;
        m.meta = meta.model;
        Ok(m)
    }

    fn check_grids(&self, f2x: &FeatureGrid, f10x: &FeatureGrid) -> Result<()> {
        for g in [f2x, f10x] {
            if g.dim != self.cfg.d_in {
                return Err(Error::Contract(format!(
                    "feature dim {} does not match model input {}",
                    g.dim, self.cfg.d_in
                )));
            }
        }
        Ok(())
    }

    /// Embedded working memory `[alpha, C]` (frozen weights).
    pub fn build_memory(&self, f2x: &FeatureGrid, history: &[Fixation], f10x: &FeatureGrid) -> Result<Tensor<f64>> {
        self.check_grids(f2x, f10x)?;
        let layout = layout_memory(f2x, history, f10x)?;
        let g = Graph::new();
        let b = self.params.bind_frozen(&g)?;
        let m = embed_memory(&g, &b, &self.cfg, &layout)?;
        Ok(g.value(m).cast())
    }

    pub fn predict_mag(&self, cm: &[u32; MagLevel::COUNT]) -> Result<[f64; MagLevel::COUNT]> {
        let g = Graph::new();
        let b = self.params.bind_frozen(&g)?;
        let m = mag_head(&g, &b, cm)?;
        Ok(to_array(&g.value(m).to_f64_vec()))
    }

    /// Next-fixation heatmap and magnification activations given a history.
    pub fn step(&self, f2x: &FeatureGrid, history: &[Fixation], f10x: &FeatureGrid) -> Result<StepOutput> {
        self.check_grids(f2x, f10x)?;
        let layout = layout_memory(f2x, history, f10x)?;
        let g = Graph::new();
        let b = self.params.bind_frozen(&g)?;
        let fine = g.constant(grid_tensor(f10x))?;
        let (h, m) = forward(&g, &b, &self.cfg, &layout, fine, &cumulative_mag_count(history))?;
        let heatmap = Heatmap::new(f10x.mag, GridShape::of(f10x), g.value(h).to_f64_vec())?;
        Ok(StepOutput {
            heatmap,
            mag: to_array(&g.value(m).to_f64_vec()),
        })
    }
}

fn to_array(v: &[f64]) -> [f64; MagLevel::COUNT] {
    let mut out = [0.0; MagLevel::COUNT];
    out.copy_from_slice(&v[..MagLevel::COUNT]);
    out
}

fn grid_tensor<T: Scalar>(grid: &FeatureGrid) -> Tensor<T> {
    crate::heatmap_model::grid_tensor(grid)
}

fn pos_tensor<T: Scalar>(positions: &[(f64, f64)], c: usize) -> Result<Tensor<T>> {
    let s = (2.0 / c as f64).sqrt();
    let data: Vec<T> = positions
        .iter()
        .flat_map(|&(x, y)| nn::sincos_2d(x, y, c).into_iter().map(move |v| T::from_f64(v * s)))
        .collect();
    Ok(Tensor::new(vec![positions.len(), c], data)?)
}

/// Projects raw tokens to width C and adds position, scale, temporal and
/// magnification embeddings.
pub fn embed_memory<T: Scalar>(g: &Graph<T>, b: &Bound<'_, T>, cfg: &ScanpathModelConfig, layout: &MemoryLayout) -> Result<Var> {
    let c = cfg.dim;
    let d = cfg.d_in;
    let n = layout.len();
    let feats = g.constant(Tensor::new(
        vec![n, d],
        layout.features.iter().map(|&v| T::from_f64(v)).collect(),
    )?)?;
    let x = nn::linear(g, b, "in", feats)?;
    let x = g.add(x, g.constant(pos_tensor(&layout.positions, c)?)?)?;
    let nw = layout.n_wsi;
    let nv = layout.n_viewport();
    let wsi = g.slice(x, 0, 0, nw)?;
    let wsi = g.add(wsi, g.embedding(b.get("emb.scale"), &vec![0; nw])?)?;
    if nv == 0 {
        return Ok(wsi);
    }
    let vp = g.slice(x, 0, nw, n)?;
    let vp = g.add(vp, g.embedding(b.get("emb.scale"), &vec![1; nv])?)?;
    let times: Vec<usize> = (0..nv).map(|i| i.min(cfg.temporal_cap - 1)).collect();
    let vp = g.add(vp, g.embedding(b.get("emb.time"), &times)?)?;
    let mags: Vec<usize> = layout.mags[nw..].iter().map(|m| m.index()).collect();
    let vp = g.add(vp, g.embedding(b.get("emb.mag"), &mags)?)?;
    Ok(g.concat(&[wsi, vp], 0)?)
}

/// Self-attention encoder over the memory; shape preserved.
pub fn update_memory<T: Scalar>(g: &Graph<T>, b: &Bound<'_, T>, cfg: &ScanpathModelConfig, mem: Var) -> Result<Var> {
    let mut h = mem;
    for l in 0..cfg.enc_layers {
        h = nn::encoder_layer(g, b, &format!("enc.{l}"), h, cfg.heads)?;
    }
    Ok(h)
}

/// Learnable query attending to the memory through the decoder stack: `[1, C]`.
pub fn aggregate<T: Scalar>(g: &Graph<T>, b: &Bound<'_, T>, cfg: &ScanpathModelConfig, mem: Var) -> Result<Var> {
    let mut q = b.get("query");
    for l in 0..cfg.dec_layers {
        q = nn::cross_layer(g, b, &format!("dec.{l}"), q, mem, cfg.heads)?;
    }
    Ok(q)
}

/// `MLP_H(Q')`: C -> hidden -> hidden -> D.
pub fn mlp_h<T: Scalar>(g: &Graph<T>, b: &Bound<'_, T>, q: Var) -> Result<Var> {
    let h = g.gelu(nn::linear(g, b, "mlp_h.1", q)?)?;
    let h = g.gelu(nn::linear(g, b, "mlp_h.2", h)?)?;
    nn::linear(g, b, "mlp_h.3", h)
}

/// `sigmoid(F_fine . v)` per cell, `[cells, 1]`; `v` is `[1, D]`.
pub fn fixation_heatmap<T: Scalar>(g: &Graph<T>, fine: Var, v: Var) -> Result<Var> {
    let fd = g.shape(fine)[1];
    let vd = *g.shape(v).last().unwrap_or(&0);
    if fd != vd {
        return Err(Error::Contract(format!("heatmap head width {vd} differs from feature dim {fd}")));
    }
    Ok(g.sigmoid(g.matmul_nt(fine, v)?)?)
}

/// `sigmoid(CM W + b)`, `[1, 6]`.
pub fn mag_head<T: Scalar>(g: &Graph<T>, b: &Bound<'_, T>, cm: &[u32; MagLevel::COUNT]) -> Result<Var> {
    let x = g.constant(Tensor::new(vec![1, MagLevel::COUNT], cm.iter().map(|&v| T::from_f64(v as f64)).collect())?)?;
    Ok(g.sigmoid(nn::linear(g, b, "mag", x)?)?)
}

/// Full step: returns (heatmap `[cells, 1]`, magnification activations `[1, 6]`).
pub fn forward<T: Scalar>(
    g: &Graph<T>,
    b: &Bound<'_, T>,
    cfg: &ScanpathModelConfig,
    layout: &MemoryLayout,
    fine: Var,
    cm: &[u32; MagLevel::COUNT],
) -> Result<(Var, Var)> {
    let mem = embed_memory(g, b, cfg, layout)?;
    let mem = update_memory(g, b, cfg, mem)?;
    let q = aggregate(g, b, cfg, mem)?;
    let v = mlp_h(g, b, q)?;
    let h = fixation_heatmap(g, fine, v)?;
    Ok((h, mag_head(g, b, cm)?))
}

/// Pixel-wise focal loss averaged over cells, log arguments clamped.
pub fn focal_loss<T: Scalar>(g: &Graph<T>, pred: Var, target: &[f64], gamma: f64, beta: f64) -> Result<Var> {
    if target.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Contract("focal target outside [0, 1]".into()));
    }
    let t = Tensor::from_f64_slice(g.shape(pred).as_slice(), target)?;
    Ok(g.focal_loss(pred, &t, gamma, beta, LOG_CLAMP)?)
}

/// Weighted NLL of the ground-truth level after renormalizing the sigmoid
/// activations to a distribution.
pub fn mag_loss<T: Scalar>(g: &Graph<T>, pred: Var, gt: usize, weights: &[f64; MagLevel::COUNT]) -> Result<Var> {
    if gt >= MagLevel::COUNT {
        return Err(Error::Range(format!("magnification class {gt} outside 0..5")));
    }
    let p = g.div(pred, g.sum(pred)?)?;
    let sel = g.sum(g.slice(g.reshape(p, &[MagLevel::COUNT])?, 0, gt, gt + 1)?)?;
    Ok(g.scale(g.log(sel)?, T::from_f64(-weights[gt]))?)
}

pub fn total_loss<T: Scalar>(g: &Graph<T>, fix: Var, mag: Var, lambda_mag: f64) -> Result<Var> {
    Ok(g.add(fix, g.scale(mag, T::from_f64(lambda_mag))?)?)
}

/// Feature grids backing one slide.
#[derive(Clone, Debug)]
pub struct SlideGrids {
    /// Coarse grid for WSI tokens.
    pub f2x: FeatureGrid,
    /// Fine grid for viewport tokens and heatmaps.
    pub f10x: FeatureGrid,
}

/// A prefix example: the first `k` fixations predict fixation `k`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PrefixExample {
    pub scanpath: usize,
    pub k: usize,
}

/// One example per proper prefix of every scanpath with at least two
/// fixations.
pub fn prefix_examples(corpus: &[Scanpath]) -> Vec<PrefixExample> {
    let mut out = Vec::new();
    for (i, sp) in corpus.iter().enumerate() {
        if sp.len() < 2 {
            log::warn!("skipping scanpath {}/{} with {} fixations", sp.wsi_id, sp.reader_id, sp.len());
            continue;
        }
        out.extend((1..sp.len()).map(|k| PrefixExample { scanpath: i, k }));
    }
    out
}

/// Ground-truth next-fixation map on the fine grid.
pub fn target_map(next: &Fixation, f10x: &FeatureGrid) -> Heatmap {
    let shape = GridShape::of(f10x);
    let (w, h) = extent(f10x);
    fixation_target(next, shape, SigmaRule::for_width(w.max(h)))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub l_fix: f64,
    pub l_mag: f64,
    pub l_total: f64,
}

pub struct ScanpathTraining<T> {
    pub model: ScanpathModel<T>,
    pub log: Vec<EpochLog>,
}

/// Loss and (optionally) gradients of one prefix example.
pub fn example_loss<T: Scalar>(
    model: &ScanpathModel<T>,
    grids: &SlideGrids,
    sp: &Scanpath,
    k: usize,
    with_grads: bool,
) -> Result<(LossParts, Option<Vec<Tensor<T>>>)> {
    let cfg = &model.cfg;
    let history = &sp.fixations[..k];
    let next = &sp.fixations[k];
    let layout = layout_memory(&grids.f2x, history, &grids.f10x)?;
    let target = target_map(next, &grids.f10x);
    let g = Graph::new();
    let b = if with_grads {
        model.params.bind(&g)?
    } else {
        model.params.bind_frozen(&g)?
    };
    let fine = g.constant(grid_tensor(&grids.f10x))?;
    let (h, m) = forward(&g, &b, cfg, &layout, fine, &cumulative_mag_count(history))?;
    let lf = focal_loss(&g, h, &target.values, cfg.gamma, cfg.beta)?;
    let lm = mag_loss(&g, m, next.mag.index(), &model.meta.class_weights)?;
    let lt = total_loss(&g, lf, lm, cfg.lambda_mag)?;
    let parts = LossParts {
        fix: g.item(lf).as_f64(),
        mag: g.item(lm).as_f64(),
        total: g.item(lt).as_f64(),
    };
    if !parts.total.is_finite() {
        return Err(Error::Degenerate(format!("non-finite loss on {}/{} prefix {k}", sp.wsi_id, sp.reader_id)));
    }
    let grads = if with_grads {
        g.backward(lt)?;
        Some(b.grads(&g))
    } else {
        None
    };
    Ok((parts, grads))
}

/// Behavior cloning over all prefixes. `on_epoch` sees the model after each
/// epoch (for checkpointing) and may abort by returning an error.
pub fn train_scanpath<T: Scalar>(
    corpus: &[Scanpath],
    grids: &BTreeMap<String, SlideGrids>,
    cfg: &ScanpathModelConfig,
    meta: ScanpathModelMeta,
    mut on_epoch: impl FnMut(&ScanpathModel<T>, &EpochLog) -> Result<()>,
) -> Result<ScanpathTraining<T>> {
    let examples = prefix_examples(corpus);
    if examples.is_empty() {
        return Err(Error::InvalidInput("no scanpath with at least two fixations".into()));
    }
    for sp in corpus {
        let gr = grids
            .get(&sp.wsi_id)
            .ok_or_else(|| Error::InvalidInput(format!("no feature grids for slide {}", sp.wsi_id)))?;
        if gr.f2x.dim != cfg.d_in || gr.f10x.dim != cfg.d_in {
            return Err(Error::Contract(format!("feature dim for {} differs from d_in {}", sp.wsi_id, cfg.d_in)));
        }
    }
    let mut model = ScanpathModel::<T>::init(cfg)?;
    let mut counts = [0usize; MagLevel::COUNT];
    for e in &examples {
        counts[corpus[e.scanpath].fixations[e.k].mag.index()] += 1;
    }
    model.meta = ScanpathModelMeta {
        class_weights: cfg.class_weights.unwrap_or_else(|| class_weights(&counts)),
        ..meta
    };

    let mut adam = AdamState::new(&model.params);
    let opt = AdamConfig::with_lr(cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7363616e);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let per_epoch = cfg.examples_per_epoch.unwrap_or(examples.len()).min(examples.len()).max(1);
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut sums = LossParts::default();
        for batch in order[..per_epoch].chunks(cfg.batch_size) {
            let mut acc: Option<Vec<Tensor<T>>> = None;
            for &i in batch {
                let e = examples[i];
                let sp = &corpus[e.scanpath];
                let (parts, grads) = example_loss(&model, &grids[&sp.wsi_id], sp, e.k, true)?;
                sums.fix += parts.fix;
                sums.mag += parts.mag;
                sums.total += parts.total;
                let grads = grads.expect("gradients requested");
                match acc.as_mut() {
                    None => acc = Some(grads),
                    Some(a) => {
                        for (x, y) in a.iter_mut().zip(&grads) {
                            x.add_assign(y);
                        }
                    }
                }
            }
            let inv = T::from_f64(1.0 / batch.len() as f64);
            let grads: Vec<Tensor<T>> = acc.expect("non-empty batch").into_iter().map(|t| t.map(|v| v * inv)).collect();
            adam_step(&mut model.params, &grads, &mut adam, &opt)?;
        }
        let n = per_epoch as f64;
        let row = EpochLog {
            epoch,
            l_fix: sums.fix / n,
            l_mag: sums.mag / n,
            l_total: sums.total / n,
        };
        log::info!("scanpath epoch {epoch} L_fix {:.6} L_mag {:.6} L_total {:.6}", row.l_fix, row.l_mag, row.l_total);
        log.push(row);
        on_epoch(&model, &row)?;
    }
    Ok(ScanpathTraining { model, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use pathscan_autodiff::gradcheck::rel_err;

    fn grid(mag: MagLevel, rows: usize, cols: usize, dim: usize, patch: f64, seed: u64) -> FeatureGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t: Tensor<f64> = nn::normal(&mut rng, &[rows * cols, dim], 0.5);
        FeatureGrid::new(mag, rows, cols, dim, patch, t.data().iter().map(|&v| v as f32).collect()).unwrap()
    }

    fn small_cfg() -> ScanpathModelConfig {
        ScanpathModelConfig {
            d_in: 4,
            dim: 8,
            heads: 2,
            ffn_hidden: 8,
            mlp_hidden: 8,
            temporal_cap: 10,
            ..Default::default()
        }
    }

    fn slide() -> SlideGrids {
        SlideGrids {
            f2x: grid(MagLevel::X2, 3, 3, 4, 100.0 / 3.0, 1),
            f10x: grid(MagLevel::X10, 5, 5, 4, 20.0, 2),
        }
    }

    fn fx(x: f64, y: f64, m: MagLevel) -> Fixation {
        Fixation::new(x, y, m, 100.0)
    }

    fn path() -> Scanpath {
        Scanpath {
            wsi_id: "s".into(),
            reader_id: "r".into(),
            fixations: vec![
                fx(50.0, 50.0, MagLevel::X1),
                fx(30.0, 70.0, MagLevel::X2),
                fx(35.0, 72.0, MagLevel::X4),
                fx(80.0, 10.0, MagLevel::X10),
                fx(81.0, 12.0, MagLevel::X10),
                fx(10.0, 90.0, MagLevel::X4),
            ],
        }
    }

    #[test]
    fn memory_token_counts_and_order() {
        let m = ScanpathModel::<f64>::init(&small_cfg()).unwrap();
        let s = slide();
        assert_eq!(m.build_memory(&s.f2x, &[], &s.f10x).unwrap().shape(), &[9, 8]);
        let hist = &path().fixations[..1];
        let l = layout_memory(&s.f2x, hist, &s.f10x).unwrap();
        assert_eq!(l.len(), 10);
        assert!(l.kinds[..9].iter().all(|k| *k == TokenKind::Wsi));
        assert_eq!(l.kinds[9], TokenKind::Viewport);
        assert_eq!(m.build_memory(&s.f2x, hist, &s.f10x).unwrap().shape(), &[10, 8]);
        assert!(layout_memory(&s.f2x, &[fx(500.0, 5.0, MagLevel::X1)], &s.f10x).is_err());
    }

    #[test]
    fn magnification_embedding_separates_same_location() {
        let m = ScanpathModel::<f64>::init(&small_cfg()).unwrap();
        let s = slide();
        let a = m.build_memory(&s.f2x, &[fx(40.0, 40.0, MagLevel::X2)], &s.f10x).unwrap();
        let b = m.build_memory(&s.f2x, &[fx(40.0, 40.0, MagLevel::X20)], &s.f10x).unwrap();
        assert_eq!(a.data()[..72], b.data()[..72]);
        let emb = m.params.get("emb.mag").unwrap();
        for j in 0..8 {
            let diff = a.data()[72 + j] - b.data()[72 + j];
            let want = emb.data()[MagLevel::X2.index() * 8 + j] - emb.data()[MagLevel::X20.index() * 8 + j];
            assert!((diff - want).abs() < 1e-12);
        }
    }

    #[test]
    fn update_preserves_shape_and_couples_tokens() {
        let cfg = small_cfg();
        let m = ScanpathModel::<f64>::init(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x: Tensor<f64> = nn::normal(&mut rng, &[4, 8], 1.0);
        let run = |x: &Tensor<f64>| {
            let g = Graph::new();
            let b = m.params.bind_frozen(&g).unwrap();
            let v = g.constant(x.clone()).unwrap();
            g.value(update_memory(&g, &b, &cfg, v).unwrap()).clone()
        };
        let base = run(&x);
        assert_eq!(base.shape(), &[4, 8]);
        let mut masked = x.clone();
        masked.data_mut()[24..32].iter_mut().for_each(|v| *v = 0.0);
        let other = run(&masked);
        let d: f64 = base.data()[..8].iter().zip(&other.data()[..8]).map(|(a, b)| (a - b).abs()).sum();
        assert!(d > 1e-6);
    }

    #[test]
    fn aggregate_over_identical_tokens_matches_single_token() {
        let cfg = small_cfg();
        let m = ScanpathModel::<f64>::init(&cfg).unwrap();
        let row: Vec<f64> = (0..8).map(|i| i as f64 * 0.1 - 0.3).collect();
        let g = Graph::new();
        let b = m.params.bind_frozen(&g).unwrap();
        let many = g.constant(Tensor::from_f64_slice(&[5, 8], &row.repeat(5)).unwrap()).unwrap();
        let one = g.constant(Tensor::from_f64_slice(&[1, 8], &row).unwrap()).unwrap();
        let a = aggregate(&g, &b, &cfg, many).unwrap();
        let c = aggregate(&g, &b, &cfg, one).unwrap();
        assert_eq!(g.shape(a), vec![1, 8]);
        for (x, y) in g.value(a).data().iter().zip(g.value(c).data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn single_head_cross_attention_by_hand() {
        // C = 2, alpha = 2, identity projections, no feed-forward contribution.
        let mut p = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        nn::add_cross_layer(&mut p, &mut rng, "d", 2, 2);
        for part in ["q", "k", "v", "o"] {
            *p.get_mut(&format!("d.xattn.{part}.w")).unwrap() = Tensor::eye(2);
        }
        for w in ["d.ffn.2.w", "d.ffn.2.b"] {
            let s = p.get(w).unwrap().shape().to_vec();
            *p.get_mut(w).unwrap() = Tensor::zeros(&s);
        }
        let g = Graph::new();
        let b = p.bind_frozen(&g).unwrap();
        let q = g.constant(Tensor::from_f64_slice(&[1, 2], &[1.0, 3.0]).unwrap()).unwrap();
        let mem = g.constant(Tensor::from_f64_slice(&[2, 2], &[1.0, 0.0, 0.0, 2.0]).unwrap()).unwrap();
        let out = g.value(nn::cross_layer(&g, &b, "d", q, mem, 1).unwrap()).to_f64_vec();
        // layernorm of (1, 3) is (-1, 1) up to eps
        let e = 1e-5f64;
        let ln = 1.0 / (1.0 + e).sqrt();
        let s1 = -ln / 2f64.sqrt();
        let s2 = 2.0 * ln / 2f64.sqrt();
        let (w1, w2) = {
            let m = s1.max(s2);
            let (a, b) = ((s1 - m).exp(), (s2 - m).exp());
            (a / (a + b), b / (a + b))
        };
        let want = [1.0 + w1, 3.0 + 2.0 * w2];
        assert!((out[0] - want[0]).abs() < 1e-9 && (out[1] - want[1]).abs() < 1e-9, "{out:?} vs {want:?}");
    }

    #[test]
    fn heatmap_head_properties() {
        let g = Graph::<f64>::new();
        let fine = g.constant(Tensor::from_f64_slice(&[3, 2], &[1.0, 0.0, 0.6, 0.8, -1.0, 0.0]).unwrap()).unwrap();
        let zero = g.constant(Tensor::zeros(&[1, 2])).unwrap();
        let h = g.value(fixation_heatmap(&g, fine, zero).unwrap()).to_f64_vec();
        assert!(h.iter().all(|&v| v == 0.5));
        let v = g.constant(Tensor::from_f64_slice(&[1, 2], &[2.0, 0.0]).unwrap()).unwrap();
        let h = g.value(fixation_heatmap(&g, fine, v).unwrap()).to_f64_vec();
        assert!(h.iter().all(|&x| x > 0.0 && x < 1.0));
        assert!(h[0] > h[1] && h[1] > h[2]);
        let bad = g.constant(Tensor::zeros(&[1, 3])).unwrap();
        assert!(fixation_heatmap(&g, fine, bad).is_err());
    }

    #[test]
    fn cumulative_count_example() {
        use MagLevel as M;
        let h: Vec<Fixation> = [M::X1, M::X1, M::X2, M::X2, M::X2, M::X4, M::X10, M::X10]
            .iter()
            .map(|&m| fx(0.0, 0.0, m))
            .collect();
        assert_eq!(cumulative_mag_count(&h), [2, 3, 1, 2, 0, 0]);
        assert_eq!(cumulative_mag_count(&[]), [0; 6]);
    }

    #[test]
    fn mag_head_by_hand() {
        let mut m = ScanpathModel::<f64>::init(&small_cfg()).unwrap();
        *m.params.get_mut("mag.w").unwrap() = Tensor::zeros(&[6, 6]);
        assert_eq!(m.predict_mag(&[2, 3, 1, 2, 0, 0]).unwrap(), [0.5; 6]);
        let w: Vec<f64> = (0..36).map(|i| (i % 7) as f64 * 0.1 - 0.2).collect();
        let bias = [0.1, -0.1, 0.0, 0.2, -0.3, 0.05];
        *m.params.get_mut("mag.w").unwrap() = Tensor::from_f64_slice(&[6, 6], &w).unwrap();
        *m.params.get_mut("mag.b").unwrap() = Tensor::from_f64_slice(&[6], &bias).unwrap();
        let cm = [2.0, 3.0, 1.0, 2.0, 0.0, 0.0];
        let got = m.predict_mag(&[2, 3, 1, 2, 0, 0]).unwrap();
        for j in 0..6 {
            let z: f64 = (0..6).map(|i| cm[i] * w[i * 6 + j]).sum::<f64>() + bias[j];
            assert!((got[j] - 1.0 / (1.0 + (-z).exp())).abs() < 1e-12);
        }
    }

    #[test]
    fn focal_loss_values() {
        let g = Graph::<f64>::new();
        let y = [0.0, 1.0, 0.0, 0.0];
        let p = g.constant(Tensor::from_f64_slice(&[4, 1], &y).unwrap()).unwrap();
        assert!(g.item(focal_loss(&g, p, &y, 2.0, 4.0).unwrap()) < 1e-10);
        let half = g.constant(Tensor::from_f64_slice(&[1, 1], &[0.5]).unwrap()).unwrap();
        let l = g.item(focal_loss(&g, half, &[1.0], 2.0, 4.0).unwrap());
        assert!((l - 0.25 * -(0.5f64.ln()) ).abs() < 1e-12);
        assert!(focal_loss(&g, p, &[0.0, 0.5, 0.0, 0.0], 2.0, 4.0).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let logits: Tensor<f64> = nn::normal(&mut rng, &[9, 1], 1.0);
        let target = [0.1, 0.3, 0.0, 0.6, 1.0, 0.2, 0.0, 0.05, 0.4];
        let res = pathscan_autodiff::gradcheck::check(&[logits], 1e-5, |g, v| {
            let p = g.sigmoid(v[0])?;
            g.focal_loss(p, &Tensor::from_f64_slice(&[9, 1], &target)?, 2.0, 4.0, LOG_CLAMP)
        })
        .unwrap();
        assert!(res.max_rel_err < 1e-4, "{res:?}");
    }

    #[test]
    fn mag_loss_values_and_gradient() {
        let g = Graph::<f64>::new();
        let w = [1.0; 6];
        let u = g.constant(Tensor::full(&[1, 6], 0.3)).unwrap();
        assert!((g.item(mag_loss(&g, u, 2, &w).unwrap()) - 6f64.ln()).abs() < 1e-12);
        let sharp = g
            .constant(Tensor::from_f64_slice(&[1, 6], &[1e-12, 1e-12, 1.0, 1e-12, 1e-12, 1e-12]).unwrap())
            .unwrap();
        assert!(g.item(mag_loss(&g, sharp, 2, &w).unwrap()) < 1e-10);
        assert!(matches!(mag_loss(&g, u, 6, &w), Err(Error::Range(_))));

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let logits: Tensor<f64> = nn::normal(&mut rng, &[1, 6], 1.0);
        let weights = [1.5, 0.5, 0.8, 1.0, 2.0, 1.2];
        let res = pathscan_autodiff::gradcheck::check(&[logits], 1e-5, |g, v| {
            let p = g.sigmoid(v[0])?;
            mag_loss(g, p, 3, &weights).map_err(|e| pathscan_autodiff::AutodiffError::Contract(e.to_string()))
        })
        .unwrap();
        assert!(res.max_rel_err < 1e-4, "{res:?}");
    }

    #[test]
    fn class_weight_example() {
        let w = class_weights(&[10, 20, 30, 20, 10, 10]);
        let want = [1.667, 0.833, 0.556, 0.833, 1.667, 1.667];
        for (a, b) in w.iter().zip(want) {
            assert!((a - b).abs() < 1e-3);
        }
        for (wc, nc) in w.iter().zip([10, 20, 30, 20, 10, 10]) {
            assert!((wc * nc as f64 - 100.0 / 6.0).abs() < 1e-9);
        }
        assert_eq!(class_weights(&[5, 0, 0, 0, 0, 5])[1], 0.0);
    }

    #[test]
    fn total_loss_is_linear_and_reaches_both_heads() {
        let g = Graph::<f64>::new();
        let a = g.constant(Tensor::scalar(0.5)).unwrap();
        let b = g.constant(Tensor::scalar(0.5)).unwrap();
        assert_eq!(g.item(total_loss(&g, a, b, 1.0).unwrap()), 1.0);
        assert_eq!(g.item(total_loss(&g, a, b, 0.0).unwrap()), 0.5);

        let cfg = small_cfg();
        let mut m = ScanpathModel::<f64>::init(&cfg).unwrap();
        m.meta.class_weights = [1.0; 6];
        let (_, grads) = example_loss(&m, &slide(), &path(), 3, true).unwrap();
        let grads = grads.unwrap();
        let idx = |n: &str| m.params.names().iter().position(|x| x == n).unwrap();
        assert!(grads[idx("mag.w")].data().iter().any(|v| *v != 0.0));
        assert!(grads[idx("mlp_h.3.w")].data().iter().any(|v| *v != 0.0));
    }

    #[test]
    fn prefix_count() {
        let mut c = vec![path()];
        c[0].fixations.truncate(5);
        c.push(Scanpath {
            fixations: vec![fx(1.0, 1.0, MagLevel::X1)],
            ..path()
        });
        let ex = prefix_examples(&c);
        assert_eq!(ex.len(), 4);
        assert!(ex.iter().all(|e| e.scanpath == 0));
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        let cfg = small_cfg();
        let mut m = ScanpathModel::<f64>::init(&cfg).unwrap();
        m.meta.class_weights = [0.9, 1.1, 1.0, 1.3, 0.7, 1.0];
        let s = slide();
        let sp = path();
        let k = 5;
        let (_, grads) = example_loss(&m, &s, &sp, k, true).unwrap();
        let grads = grads.unwrap();
        let step = 1e-5;
        let mut worst = 0.0f64;
        for pi in 0..m.params.len() {
            for j in 0..m.params.tensors()[pi].numel() {
                let orig = m.params.tensors()[pi].data()[j];
                m.params.tensors_mut()[pi].data_mut()[j] = orig + step;
                let up = example_loss(&m, &s, &sp, k, false).unwrap().0.total;
                m.params.tensors_mut()[pi].data_mut()[j] = orig - step;
                let down = example_loss(&m, &s, &sp, k, false).unwrap().0.total;
                m.params.tensors_mut()[pi].data_mut()[j] = orig;
                worst = worst.max(rel_err(grads[pi].data()[j], (up - down) / (2.0 * step)));
            }
        }
        assert!(worst < 1e-3, "worst rel err {worst}");
    }

    #[test]
    fn training_is_deterministic_and_checkpoints_round_trip() {
        let mut cfg = small_cfg();
        cfg.epochs = 3;
        cfg.lr = 5e-3;
        cfg.batch_size = 2;
        let grids: BTreeMap<String, SlideGrids> = [("s".to_string(), slide())].into();
        let corpus = [path()];
        let mut seen = 0;
        let a = train_scanpath::<f64>(&corpus, &grids, &cfg, ScanpathModelMeta::default(), |_, _| {
            seen += 1;
            Ok(())
        })
        .unwrap();
        let b = train_scanpath::<f64>(&corpus, &grids, &cfg, ScanpathModelMeta::default(), |_, _| Ok(())).unwrap();
        assert_eq!(seen, 3);
        assert_eq!(a.log, b.log);
        assert_eq!(a.model.params.tensors(), b.model.params.tensors());
        let ck = a.model.to_checkpoint(serde_json::Value::Null).unwrap();
        let back = ScanpathModel::<f64>::from_checkpoint(&Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap()).unwrap();
        assert_eq!(back.meta, a.model.meta);
        assert_eq!(back.params.tensors(), a.model.params.tensors());

        cfg.lr = 0.0;
        cfg.batch_size = 100;
        let flat = train_scanpath::<f64>(&corpus, &grids, &cfg, ScanpathModelMeta::default(), |_, _| Ok(())).unwrap();
        assert!(flat.log.windows(2).all(|w| (w[0].l_total - w[1].l_total).abs() < 1e-12));
    }
}
