//! Anchor-based siamese tracker `f(z, x) -> (M_cls, M_reg)`, its
//! post-processing, frame-by-frame tracking with attack/defense hooks, and
//! baseline training.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use candle_core::{DType, Tensor};
use candle_nn::optim::{AdamW, Optimizer, ParamsAdamW};
use serde::{Deserialize, Serialize};

use crate::data::{sample_training_pairs, PairConfig, Sequence};
use crate::error::{Error, Result};
use crate::geometry::{decode_box, make_anchor_grid, AnchorConfig, AnchorGrid, BBox};
use crate::imaging::{crop_search, crop_template, CropMapping, Image};
use crate::losses::{dua_loss, scalar, DuaLossConfig, LossTargets};
use crate::nn::{depthwise_xcorr, derive_seed, Conv2d, ParamBuilder, Params};

/// Architecture, anchors and post-processing of the tracker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackerConfig {
    pub template_size: usize,
    pub search_size: usize,
    /// Output channels of the stride-2 backbone stages; the last width is
    /// repeated by a final stride-1 layer. Total stride is `2^widths.len()`.
    pub widths: Vec<usize>,
    pub head_width: usize,
    pub anchor_scales: Vec<f64>,
    pub anchor_ratios: Vec<f64>,
    pub pos_threshold: f64,
    pub neg_threshold: f64,
    /// Weight of the cosine window in the final score.
    pub window_influence: f64,
    /// Fraction of the predicted size change applied per frame.
    pub size_damping: f64,
}

impl TrackerConfig {
    /// Desk-scale preset: 64 px template, 128 px search on 256×256 frames.
    pub fn toy() -> Self {
        TrackerConfig {
            template_size: 64,
            search_size: 128,
            widths: vec![16, 32, 64],
            head_width: 64,
            anchor_scales: vec![32.0],
            anchor_ratios: vec![0.5, 1.0, 2.0],
            pos_threshold: 0.6,
            neg_threshold: 0.3,
            window_influence: 0.3,
            size_damping: 0.5,
        }
    }

    /// Smallest preset, 32/64 px, for fast end-to-end runs on a CPU.
    pub fn micro() -> Self {
        TrackerConfig {
            template_size: 32,
            search_size: 64,
            widths: vec![16, 32, 32],
            head_width: 32,
            anchor_scales: vec![16.0],
            ..Self::toy()
        }
    }

    /// 127/255 px patches as used with full-size siamese trackers.
    pub fn full() -> Self {
        TrackerConfig {
            template_size: 127,
            search_size: 255,
            widths: vec![32, 64, 128],
            head_width: 128,
            anchor_scales: vec![64.0],
            ..Self::toy()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "micro" => Ok(Self::micro()),
            "toy" => Ok(Self::toy()),
            "full" => Ok(Self::full()),
            other => Err(Error::Config(format!("unknown tracker preset {other:?}"))),
        }
    }

    pub fn stride(&self) -> usize {
        1 << self.widths.len()
    }

    fn feature_size(&self, input: usize) -> usize {
        // 3x3 kernels, padding 1, stride 2
        self.widths.iter().fold(input, |s, _| (s - 1) / 2 + 1)
    }

    /// Side of the score map.
    pub fn score_size(&self) -> usize {
        self.feature_size(self.search_size) - self.feature_size(self.template_size) + 1
    }

    pub fn anchor_config(&self) -> AnchorConfig {
        AnchorConfig {
            stride: self.stride() as f64,
            scales: self.anchor_scales.clone(),
            ratios: self.anchor_ratios.clone(),
            grid_h: self.score_size(),
            grid_w: self.score_size(),
            patch_size: self.search_size,
        }
    }

    pub fn anchors_per_cell(&self) -> usize {
        self.anchor_scales.len() * self.anchor_ratios.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) || self.head_width == 0 {
            return Err(Error::Config("tracker widths must be positive".into()));
        }
        if self.template_size < 2 || self.search_size <= self.template_size {
            return Err(Error::Config(format!(
                "search size {} must exceed template size {}",
                self.search_size, self.template_size
            )));
        }
        if !(0.0..=1.0).contains(&self.window_influence) || !(0.0..=1.0).contains(&self.size_damping) {
            return Err(Error::Config("window_influence and size_damping must lie in [0, 1]".into()));
        }
        if !(0.0 <= self.neg_threshold && self.neg_threshold < self.pos_threshold && self.pos_threshold <= 1.0) {
            return Err(Error::Config("need 0 <= neg_threshold < pos_threshold <= 1".into()));
        }
        make_anchor_grid(&self.anchor_config())?;
        Ok(())
    }
}

/// Tracker head outputs for a batch: `cls` is (B, 2K, Hf, Wf), `reg` is (B, 4K, Hf, Wf).
#[derive(Debug, Clone)]
pub struct ScoreMaps {
    pub cls: Tensor,
    pub reg: Tensor,
}

impl ScoreMaps {
    /// Maps of batch item `index`, as flat `(bg, fg, deltas)` vectors in anchor order.
    pub fn item(&self, index: usize) -> Result<(Vec<f64>, Vec<f64>, Vec<[f64; 4]>)> {
        let cls = self.cls.get(index)?.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        let reg = self.reg.get(index)?.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        let n = cls.len() / 2;
        let bg = cls[..n].to_vec();
        let fg = cls[n..].to_vec();
        let deltas = (0..n).map(|a| [reg[a], reg[n + a], reg[2 * n + a], reg[3 * n + a]]).collect();
        Ok((bg, fg, deltas))
    }

    /// Foreground probability per anchor for batch item `index`.
    pub fn fg_scores(&self, index: usize) -> Result<Vec<f64>> {
        let (bg, fg, _) = self.item(index)?;
        Ok(bg.iter().zip(&fg).map(|(b, f)| 1.0 / (1.0 + (b - f).exp())).collect())
    }
}

struct Branch {
    adjust_z: Conv2d,
    adjust_x: Conv2d,
    hidden: Conv2d,
    out: Conv2d,
}

impl Branch {
    fn new(pb: &mut ParamBuilder, name: &str, feat: usize, hidden: usize, out: usize) -> Result<Self> {
        pb.push(name);
        let b = Branch {
            adjust_z: Conv2d::new(pb, "adjust_z", feat, feat, 1, 1, 0)?,
            adjust_x: Conv2d::new(pb, "adjust_x", feat, feat, 1, 1, 0)?,
            hidden: Conv2d::new(pb, "hidden", feat, hidden, 1, 1, 0)?,
            out: Conv2d::new(pb, "out", hidden, out, 1, 1, 0)?,
        };
        pb.pop();
        Ok(b)
    }

    fn forward(&self, zf: &Tensor, xf: &Tensor) -> Result<Tensor> {
        let corr = depthwise_xcorr(&self.adjust_x.forward(xf)?, &self.adjust_z.forward(zf)?)?;
        self.out.forward(&self.hidden.forward(&corr)?.relu()?)
    }
}

/// Backbone features of a template batch.
#[derive(Debug, Clone)]
pub struct TemplateFeatures(Tensor);

/// The siamese tracker.
pub struct TrackerModel {
    cfg: TrackerConfig,
    params: Params,
    backbone: Vec<Conv2d>,
    cls: Branch,
    reg: Branch,
    grid: AnchorGrid,
    forward_passes: AtomicUsize,
}

impl TrackerModel {
    pub fn new(cfg: &TrackerConfig, seed: u64, dtype: DType) -> Result<Self> {
        Self::build(cfg, ParamBuilder::fresh(seed, dtype))
    }

    pub fn from_tensors(cfg: &TrackerConfig, tensors: &[(String, Tensor)], dtype: DType, trainable: bool) -> Result<Self> {
        Self::build(cfg, ParamBuilder::loaded(tensors, dtype, trainable))
    }

    fn build(cfg: &TrackerConfig, mut pb: ParamBuilder) -> Result<Self> {
        cfg.validate()?;
        let mut backbone = Vec::new();
        let mut cin = 3;
        pb.push("backbone");
        for (i, &w) in cfg.widths.iter().enumerate() {
            backbone.push(Conv2d::new(&mut pb, &format!("conv{i}"), cin, w, 3, 2, 1)?);
            cin = w;
        }
        backbone.push(Conv2d::new(&mut pb, &format!("conv{}", cfg.widths.len()), cin, cin, 3, 1, 1)?);
        pb.pop();
        let k = cfg.anchors_per_cell();
        let cls = Branch::new(&mut pb, "cls", cin, cfg.head_width, 2 * k)?;
        let reg = Branch::new(&mut pb, "reg", cin, cfg.head_width, 4 * k)?;
        let grid = make_anchor_grid(&cfg.anchor_config())?;
        Ok(TrackerModel {
            cfg: cfg.clone(),
            params: pb.finish(),
            backbone,
            cls,
            reg,
            grid,
            forward_passes: AtomicUsize::new(0),
        })
    }

    /// Copy whose parameters are plain tensors (never receive gradients).
    pub fn frozen(&self, dtype: DType) -> Result<Self> {
        Self::from_tensors(&self.cfg, &self.params.snapshot()?, dtype, false)
    }

    pub fn config(&self) -> &TrackerConfig {
        &self.cfg
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    pub fn grid(&self) -> &AnchorGrid {
        &self.grid
    }

    /// Number of tracker forward passes run so far.
    pub fn forward_count(&self) -> usize {
        self.forward_passes.load(Ordering::Relaxed)
    }

    fn features(&self, x: &Tensor) -> Result<Tensor> {
        let last = self.backbone.len() - 1;
        let mut h = x.clone();
        for (i, conv) in self.backbone.iter().enumerate() {
            h = conv.forward(&h)?;
            if i < last {
                h = h.relu()?;
            }
        }
        Ok(h)
    }

    fn check_patch(&self, t: &Tensor, size: usize, role: &str) -> Result<()> {
        let (_, c, h, w) = t.dims4()?;
        if c != 3 || h != size || w != size {
            return Err(Error::Shape(format!(
                "{role} patch {:?}, expected (B, 3, {size}, {size})",
                t.dims()
            )));
        }
        Ok(())
    }

    pub fn template_features(&self, z: &Tensor) -> Result<TemplateFeatures> {
        self.check_patch(z, self.cfg.template_size, "template")?;
        Ok(TemplateFeatures(self.features(&z.to_dtype(self.dtype())?)?))
    }

    /// Head outputs for precomputed template features. Counts as one forward pass.
    pub fn forward_features(&self, zf: &TemplateFeatures, x: &Tensor) -> Result<ScoreMaps> {
        self.check_patch(x, self.cfg.search_size, "search")?;
        self.forward_passes.fetch_add(1, Ordering::Relaxed);
        let xf = self.features(&x.to_dtype(self.dtype())?)?;
        let zf = if zf.0.dim(0)? == 1 && xf.dim(0)? > 1 {
            zf.0.broadcast_as((xf.dim(0)?, zf.0.dim(1)?, zf.0.dim(2)?, zf.0.dim(3)?))?.contiguous()?
        } else {
            zf.0.clone()
        };
        Ok(ScoreMaps {
            cls: self.cls.forward(&zf, &xf)?,
            reg: self.reg.forward(&zf, &xf)?,
        })
    }

    /// `f(z, x)` for (B, 3, T, T) templates and (B, 3, S, S) search patches.
    pub fn forward(&self, z: &Tensor, x: &Tensor) -> Result<ScoreMaps> {
        let zf = self.template_features(z)?;
        self.forward_features(&zf, x)
    }

    /// Post-processed box for batch item 0 of `maps`.
    pub fn select_box(&self, maps: &ScoreMaps, state: &TrackState, mapping: &CropMapping) -> Result<BBox> {
        select_box(maps, &self.grid, state, mapping)
    }

    pub fn post_config(&self) -> PostConfig {
        PostConfig {
            window_influence: self.cfg.window_influence,
            size_damping: self.cfg.size_damping,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PostConfig {
    pub window_influence: f64,
    pub size_damping: f64,
}

/// Per-sequence state carried between frames.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackState {
    pub prev: BBox,
    pub frame_w: f64,
    pub frame_h: f64,
    pub post: PostConfig,
}

/// Outer product of Hann windows, `0.5 − 0.5 cos(2πk / (n − 1))`.
pub fn cosine_window(h: usize, w: usize) -> Vec<f64> {
    let hann = |n: usize| -> Vec<f64> {
        if n == 1 {
            return vec![1.0];
        }
        (0..n)
            .map(|k| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * k as f64 / (n - 1) as f64).cos())
            .collect()
    };
    let (wy, wx) = (hann(h), hann(w));
    wy.iter().flat_map(|a| wx.iter().map(move |b| a * b)).collect()
}

/// Picks the best anchor, decodes it and maps it to frame coordinates.
///
/// Score = `(1 − λ) · p_fg + λ · window`; ties go to the lowest flat index.
/// The size moves toward the prediction by `size_damping`; the result is
/// clipped to the frame.
pub fn select_box(maps: &ScoreMaps, grid: &AnchorGrid, state: &TrackState, mapping: &CropMapping) -> Result<BBox> {
    let (bg, fg, deltas) = maps.item(0)?;
    if fg.len() != grid.len() {
        return Err(Error::Shape(format!("{} scores for {} anchors", fg.len(), grid.len())));
    }
    let window = cosine_window(grid.grid_h, grid.grid_w);
    let lambda = state.post.window_influence;
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for a in 0..fg.len() {
        let p = 1.0 / (1.0 + (bg[a] - fg[a]).exp());
        let score = (1.0 - lambda) * p + lambda * window[a % grid.cells()];
        if score > best_score {
            best = a;
            best_score = score;
        }
    }
    let d = deltas[best];
    let d = if d.iter().all(|v| v.is_finite()) { d } else { [0.0; 4] };
    let in_patch = decode_box(&grid.anchors[best], d);
    let pred = mapping.box_to_frame(&in_patch);
    let damp = state.post.size_damping;
    let w = state.prev.w + damp * (pred.w - state.prev.w);
    let h = state.prev.h + damp * (pred.h - state.prev.h);
    let cx = if pred.cx().is_finite() { pred.cx() } else { state.prev.cx() };
    let cy = if pred.cy().is_finite() { pred.cy() } else { state.prev.cy() };
    Ok(BBox::from_center(cx, cy, w, h).clip_to(state.frame_w, state.frame_h))
}

/// Per-frame wall-clock cost in milliseconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct FrameTiming {
    pub tracker_ms: f64,
    pub defense_template_ms: f64,
    pub defense_search_ms: f64,
    pub attack_ms: f64,
}

/// Template-side information visible to hooks at initialization.
pub struct TemplateContext<'a> {
    pub frame: &'a Image,
    pub init: BBox,
    pub mapping: CropMapping,
}

/// Search-side information visible to hooks on every frame.
pub struct FrameContext<'a> {
    pub index: usize,
    pub mapping: CropMapping,
    /// Ground truth in frame coordinates, when known.
    pub gt: Option<BBox>,
    pub state: TrackState,
    /// Template after the attack hook, before the defense hook.
    pub template_raw: &'a Tensor,
    /// Template as the tracker sees it.
    pub template: &'a Tensor,
}

/// Transformation applied to a patch before it reaches the tracker (an attack
/// or a defense). Identity hooks must return their input unchanged.
pub trait InputHook {
    fn on_template(&mut self, model: &TrackerModel, z: Tensor, ctx: &TemplateContext<'_>) -> Result<Tensor>;
    fn on_search(&mut self, model: &TrackerModel, x: Tensor, ctx: &FrameContext<'_>) -> Result<Tensor>;
}

/// Hook that leaves every patch untouched.
pub struct Identity;

impl InputHook for Identity {
    fn on_template(&mut self, _: &TrackerModel, z: Tensor, _: &TemplateContext<'_>) -> Result<Tensor> {
        Ok(z)
    }

    fn on_search(&mut self, _: &TrackerModel, x: Tensor, _: &FrameContext<'_>) -> Result<Tensor> {
        Ok(x)
    }
}

/// Anything that can follow a target frame by frame (the siamese tracker,
/// or an oracle in tests).
pub trait FrameTracker {
    fn init(&mut self, frame: &Image, init: BBox) -> Result<FrameTiming>;
    fn update(&mut self, frame: &Image, index: usize, gt: Option<&BBox>) -> Result<(BBox, FrameTiming)>;
}

struct SessionState {
    template_raw: Tensor,
    template: Tensor,
    features: TemplateFeatures,
    state: TrackState,
}

/// Siamese tracker with optional attack and defense hooks, applied in that order.
pub struct Session<'a> {
    model: &'a TrackerModel,
    attack: Option<&'a mut dyn InputHook>,
    defense: Option<&'a mut dyn InputHook>,
    current: Option<SessionState>,
}

fn ms_since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

impl<'a> Session<'a> {
    pub fn new(model: &'a TrackerModel, defense: Option<&'a mut dyn InputHook>, attack: Option<&'a mut dyn InputHook>) -> Self {
        Session {
            model,
            attack,
            defense,
            current: None,
        }
    }

    pub fn state(&self) -> Option<&TrackState> {
        self.current.as_ref().map(|c| &c.state)
    }
}

impl FrameTracker for Session<'_> {
    fn init(&mut self, frame: &Image, init: BBox) -> Result<FrameTiming> {
        let mut timing = FrameTiming::default();
        let (patch, mapping) = crop_template(frame, &init, self.model.cfg.template_size)?;
        let ctx = TemplateContext { frame, init, mapping };
        let mut z = patch.to_tensor(self.model.dtype())?;
        if let Some(attack) = self.attack.as_deref_mut() {
            let t = Instant::now();
            z = attack.on_template(self.model, z, &ctx)?;
            timing.attack_ms = ms_since(t);
        }
        let template_raw = z.clone();
        if let Some(defense) = self.defense.as_deref_mut() {
            let t = Instant::now();
            z = defense.on_template(self.model, z, &ctx)?;
            timing.defense_template_ms = ms_since(t);
        }
        let t = Instant::now();
        let features = self.model.template_features(&z)?;
        timing.tracker_ms = ms_since(t);
        self.current = Some(SessionState {
            template_raw,
            template: z,
            features,
            state: TrackState {
                prev: init,
                frame_w: frame.width() as f64,
                frame_h: frame.height() as f64,
                post: self.model.post_config(),
            },
        });
        Ok(timing)
    }

    fn update(&mut self, frame: &Image, index: usize, gt: Option<&BBox>) -> Result<(BBox, FrameTiming)> {
        let cur = self
            .current
            .as_mut()
            .ok_or_else(|| Error::Config("tracker updated before init".into()))?;
        let mut timing = FrameTiming::default();
        let cfg = &self.model.cfg;
        let (patch, mapping) = crop_search(frame, &cur.state.prev, cfg.template_size, cfg.search_size)?;
        let mut x = patch.to_tensor(self.model.dtype())?;
        let ctx = FrameContext {
            index,
            mapping,
            gt: gt.copied(),
            state: cur.state,
            template_raw: &cur.template_raw,
            template: &cur.template,
        };
        if let Some(attack) = self.attack.as_deref_mut() {
            let t = Instant::now();
            x = attack.on_search(self.model, x, &ctx)?;
            timing.attack_ms = ms_since(t);
        }
        if let Some(defense) = self.defense.as_deref_mut() {
            let t = Instant::now();
            x = defense.on_search(self.model, x, &ctx)?;
            timing.defense_search_ms = ms_since(t);
        }
        let t = Instant::now();
        let maps = self.model.forward_features(&cur.features, &x)?;
        let pred = select_box(&maps, &self.model.grid, &cur.state, &mapping)?;
        timing.tracker_ms = ms_since(t);
        cur.state.prev = pred;
        Ok((pred, timing))
    }
}

/// Result of tracking one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackOutput {
    pub boxes: Vec<BBox>,
    pub timings: Vec<FrameTiming>,
}

/// Tracks from `init` on frame 0; frame 0's prediction is `init` itself.
pub fn track_sequence<'a>(
    model: &'a TrackerModel,
    frames: &[Image],
    gt: Option<&[BBox]>,
    init: BBox,
    defense: Option<&'a mut dyn InputHook>,
    attack: Option<&'a mut dyn InputHook>,
) -> Result<TrackOutput> {
    let first = frames.first().ok_or(Error::EmptySequence)?;
    let mut session = Session::new(model, defense, attack);
    let mut timings = vec![session.init(first, init)?];
    let mut boxes = vec![init];
    for (i, frame) in frames.iter().enumerate().skip(1) {
        let (b, t) = session.update(frame, i, gt.and_then(|g| g.get(i)))?;
        boxes.push(b);
        timings.push(t);
    }
    Ok(TrackOutput { boxes, timings })
}

/// Baseline tracker training schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackerTrainConfig {
    pub epochs: usize,
    pub pairs_per_epoch: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub loss: DuaLossConfig,
    pub pairs: PairConfig,
}

impl Default for TrackerTrainConfig {
    fn default() -> Self {
        TrackerTrainConfig {
            epochs: 60,
            pairs_per_epoch: 512,
            batch_size: 16,
            learning_rate: 2e-3,
            seed: 0,
            loss: DuaLossConfig::default(),
            pairs: PairConfig {
                max_shift: 0.25,
                scale_jitter: 0.1,
                ..PairConfig::default()
            },
        }
    }
}

/// One optimizer step of tracker training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackerLogRow {
    pub epoch: usize,
    pub batch: usize,
    pub loss: f64,
}

/// Trains a fresh tracker on clean pairs by minimizing Dua-Loss.
pub fn train_baseline_tracker(
    cfg: &TrackerConfig,
    train: &TrackerTrainConfig,
    data: &[Sequence],
) -> Result<(TrackerModel, Vec<TrackerLogRow>)> {
    if train.epochs == 0 || train.batch_size == 0 || train.pairs_per_epoch == 0 || !(train.learning_rate > 0.0) {
        return Err(Error::Config("tracker training needs positive epochs, batch size, pairs and rate".into()));
    }
    train.loss.validate()?;
    let model = TrackerModel::new(cfg, derive_seed(train.seed, 1), DType::F32)?;
    let mut opt = AdamW::new(
        model.params.vars().to_vec(),
        ParamsAdamW {
            lr: train.learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        },
    )?;
    let mut log = Vec::new();
    for epoch in 0..train.epochs {
        let pairs = sample_training_pairs(data, cfg, &train.pairs, train.pairs_per_epoch, derive_seed(train.seed, 100 + epoch as u64))?;
        for (b, chunk) in pairs.chunks(train.batch_size).enumerate() {
            let batch = crate::data::PairBatch::from_pairs(chunk, DType::F32)?;
            let mut loss_cfg = train.loss;
            loss_cfg.sampling.seed = derive_seed(train.seed, ((epoch as u64) << 32) | b as u64);
            let targets = LossTargets::new(&batch.labels, &loss_cfg.sampling, DType::F32)?;
            let maps = model.forward(&batch.templates, &batch.searches)?;
            let loss = dua_loss(&maps.cls, &maps.reg, &targets, &loss_cfg)?;
            let value = scalar(&loss)?;
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("tracker loss at epoch {epoch}, batch {b}")));
            }
            opt.backward_step(&loss)?;
            log.push(TrackerLogRow { epoch, batch: b, loss: value });
        }
        log::info!(
            "tracker epoch {epoch}: mean loss {:.4}",
            mean(log.iter().filter(|r| r.epoch == epoch).map(|r| r.loss))
        );
    }
    Ok((model, log))
}

pub(crate) fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn state(lambda: f64) -> TrackState {
        TrackState {
            prev: BBox::new(40.0, 40.0, 20.0, 20.0).unwrap(),
            frame_w: 200.0,
            frame_h: 200.0,
            post: PostConfig {
                window_influence: lambda,
                size_damping: 0.5,
            },
        }
    }

    fn maps_from(bg: &[f64], fg: &[f64], grid: (usize, usize), reg: Option<Vec<f64>>) -> ScoreMaps {
        let n = bg.len();
        let dev = Device::Cpu;
        let cls = Tensor::from_vec([bg, fg].concat(), (1, 2, grid.0, grid.1), &dev).unwrap();
        let reg = Tensor::from_vec(reg.unwrap_or(vec![0.0; 4 * n]), (1, 4, grid.0, grid.1), &dev).unwrap();
        ScoreMaps { cls, reg }
    }

    fn grid(n: usize) -> AnchorGrid {
        make_anchor_grid(&AnchorConfig {
            stride: 8.0,
            scales: vec![16.0],
            ratios: vec![1.0],
            grid_h: n,
            grid_w: n,
            patch_size: 64,
        })
        .unwrap()
    }

    #[test]
    fn presets_are_consistent() {
        for cfg in [TrackerConfig::micro(), TrackerConfig::toy(), TrackerConfig::full()] {
            cfg.validate().unwrap();
            assert_eq!(cfg.stride(), 8);
            assert_eq!(cfg.score_size() % 2, 1);
        }
        assert_eq!(TrackerConfig::micro().score_size(), 5);
        assert_eq!(TrackerConfig::toy().score_size(), 9);
        assert_eq!(TrackerConfig::full().score_size(), 17);
    }

    #[test]
    fn single_anchor_zero_deltas() {
        let g = grid(1);
        let maps = maps_from(&[0.0], &[1.0], (1, 1), None);
        let mapping = CropMapping {
            origin_x: 10.0,
            origin_y: 20.0,
            scale: 2.0,
        };
        let mut st = state(0.0);
        st.post.size_damping = 1.0;
        let b = select_box(&maps, &g, &st, &mapping).unwrap();
        let expect = mapping.box_to_frame(&g.anchors[0]);
        assert!((b.x - expect.x).abs() < 1e-9 && (b.w - expect.w).abs() < 1e-9);
    }

    #[test]
    fn tie_goes_to_lowest_index() {
        let g = grid(2);
        let maps = maps_from(&[0.0; 4], &[0.0, 2.0, 2.0, 0.0], (2, 2), None);
        let mapping = CropMapping {
            origin_x: 0.0,
            origin_y: 0.0,
            scale: 1.0,
        };
        let b = select_box(&maps, &g, &state(0.0), &mapping).unwrap();
        assert_eq!(b.cx(), g.anchors[1].cx());
        assert_eq!(b.cy(), g.anchors[1].cy());
    }

    #[test]
    fn full_window_picks_center() {
        let g = grid(5);
        let maps = maps_from(&[0.0; 25], &[0.0; 25], (5, 5), None);
        let mapping = CropMapping {
            origin_x: 0.0,
            origin_y: 0.0,
            scale: 1.0,
        };
        let b = select_box(&maps, &g, &state(1.0), &mapping).unwrap();
        assert_eq!(b.center(), g.anchors[12].center());
    }

    #[test]
    fn selected_box_stays_in_frame() {
        let g = grid(3);
        let mut reg = vec![0.0; 36];
        reg[0..9].iter_mut().for_each(|v| *v = 50.0);
        reg[18..27].iter_mut().for_each(|v| *v = 10.0);
        let maps = maps_from(&[0.0; 9], &[1.0; 9], (3, 3), Some(reg));
        let mapping = CropMapping {
            origin_x: 150.0,
            origin_y: 150.0,
            scale: 2.0,
        };
        let b = select_box(&maps, &g, &state(0.3), &mapping).unwrap();
        assert!(b.x >= 0.0 && b.y >= 0.0 && b.right() <= 200.0 && b.bottom() <= 200.0);
    }

    #[test]
    fn forward_shapes_and_determinism() {
        let cfg = TrackerConfig::micro();
        let model = TrackerModel::new(&cfg, 3, DType::F32).unwrap();
        let dev = Device::Cpu;
        let z = Tensor::rand(0f32, 1.0, (2, 3, 32, 32), &dev).unwrap();
        let x = Tensor::rand(0f32, 1.0, (2, 3, 64, 64), &dev).unwrap();
        let a = model.forward(&z, &x).unwrap();
        let b = model.forward(&z, &x).unwrap();
        let k = cfg.anchors_per_cell();
        assert_eq!(a.cls.dims(), &[2, 2 * k, 5, 5]);
        assert_eq!(a.reg.dims(), &[2, 4 * k, 5, 5]);
        let va = a.cls.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let vb = b.cls.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(va, vb);
        assert_eq!(model.forward_count(), 2);
        let bad = Tensor::rand(0f32, 1.0, (2, 3, 60, 60), &dev).unwrap();
        assert!(model.forward(&z, &bad).is_err());
    }

    #[test]
    fn identity_hooks_match_no_hooks() {
        let cfg = TrackerConfig::micro();
        let model = TrackerModel::new(&cfg, 5, DType::F32).unwrap();
        let seq = crate::data::gen_synthetic_sequence(&crate::data::SynthConfig::micro(8), 11).unwrap();
        let plain = track_sequence(&model, &seq.frames, None, seq.gt[0], None, None).unwrap();
        let (mut a, mut d) = (Identity, Identity);
        let hooked = track_sequence(&model, &seq.frames, None, seq.gt[0], Some(&mut d), Some(&mut a)).unwrap();
        assert_eq!(plain.boxes, hooked.boxes);
        let one = track_sequence(&model, &seq.frames[..1], None, seq.gt[0], None, None).unwrap();
        assert_eq!(one.boxes, vec![seq.gt[0]]);
        assert!(matches!(
            track_sequence(&model, &[], None, seq.gt[0], None, None),
            Err(Error::EmptySequence)
        ));
    }
}
