//! Perturbation attacks used during evaluation: Dua-Loss gradient attacks
//! (FGSM, PGD) against the tracker or the defended tracker, and a black-box
//! random search that only sees predicted boxes.

use std::path::PathBuf;
use std::str::FromStr;

use candle_core::{DType, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::advtrain::{apply_delta, linf, project, signed_step};
use crate::defense::{DefenseSet, DeploymentPattern, Variant};
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox, LabelSet};
use crate::imaging::{crop_search, CropMapping, Image};
use crate::losses::{dua_loss, AnchorSampling, DuaLossConfig, LossKind, LossTargets};
use crate::tracker::{select_box, FrameContext, InputHook, TemplateContext, TemplateFeatures, TrackState, TrackerModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackKind {
    Fgsm,
    Pgd,
    IouBlackbox,
}

impl FromStr for AttackKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fgsm" => Ok(AttackKind::Fgsm),
            "pgd" => Ok(AttackKind::Pgd),
            "iou" | "iou-blackbox" => Ok(AttackKind::IouBlackbox),
            other => Err(Error::Config(format!("unknown attack {other:?} (fgsm|pgd|iou)"))),
        }
    }
}

impl std::fmt::Display for AttackKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AttackKind::Fgsm => "fgsm",
            AttackKind::Pgd => "pgd",
            AttackKind::IouBlackbox => "iou",
        })
    }
}

/// Tracker inputs an attack perturbs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackTarget {
    Template,
    Search,
    Both,
}

impl AttackTarget {
    pub fn hits(self, v: Variant) -> bool {
        matches!(
            (self, v),
            (Self::Both, _) | (Self::Template, Variant::Template) | (Self::Search, Variant::Search)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    pub kind: AttackKind,
    pub epsilon: f64,
    /// PGD iterations (FGSM always takes one step of size ε).
    pub steps: usize,
    /// PGD step size; `None` means ε/4.
    pub step_size: Option<f64>,
    /// Differentiate (or query) through the deployed defense.
    pub adaptive: bool,
    /// Black-box queries per frame.
    pub queries: usize,
    /// Black-box carry-over threshold on the previous frame's IoU.
    pub iou_threshold: f64,
    pub target: AttackTarget,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            kind: AttackKind::Pgd,
            epsilon: 8.0 / 255.0,
            steps: 10,
            step_size: None,
            adaptive: false,
            queries: 200,
            iou_threshold: 0.4,
            target: AttackTarget::Search,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn pgd(epsilon: f64, steps: usize) -> Self {
        AttackConfig {
            epsilon,
            steps,
            ..Self::default()
        }
    }

    pub fn fgsm(epsilon: f64) -> Self {
        AttackConfig {
            kind: AttackKind::Fgsm,
            epsilon,
            ..Self::default()
        }
    }

    pub fn iou(epsilon: f64, queries: usize) -> Self {
        AttackConfig {
            kind: AttackKind::IouBlackbox,
            epsilon,
            queries,
            ..Self::default()
        }
    }

    /// Iterations and step size actually used by gradient attacks.
    pub fn schedule(&self) -> (usize, f64) {
        match self.kind {
            AttackKind::Fgsm => (1, self.epsilon),
            _ => (self.steps, self.step_size.unwrap_or(self.epsilon / 4.0)),
        }
    }

    /// ε = 0 is allowed and means "no perturbation".
    pub fn validate(&self) -> Result<()> {
        if !(0.0..0.5).contains(&self.epsilon) {
            return Err(Error::Config(format!("attack epsilon {} must lie in [0, 0.5)", self.epsilon)));
        }
        if self.kind == AttackKind::Pgd && (self.steps == 0 || self.step_size.is_some_and(|a| !(a > 0.0))) {
            return Err(Error::Config("pgd needs at least one step and a positive step size".into()));
        }
        if self.kind == AttackKind::IouBlackbox && self.queries == 0 {
            return Err(Error::Config("black-box attack needs at least one query".into()));
        }
        Ok(())
    }
}

/// Defense networks an adaptive attack differentiates through.
#[derive(Clone, Copy)]
pub struct AdaptiveTarget<'a> {
    pub pattern: DeploymentPattern,
    pub nets: &'a DefenseSet<'a>,
}

impl AdaptiveTarget<'_> {
    fn apply(&self, v: Variant, t: &Tensor) -> Result<Tensor> {
        match self.nets.net(v).filter(|_| self.pattern.uses(v)) {
            Some(net) => net.forward(t),
            None => Ok(t.clone()),
        }
    }
}

fn attack_loss_config(labels: &[LabelSet]) -> DuaLossConfig {
    // without a positive anchor only the classification term is defined
    let kind = if labels.iter().all(|l| l.num_positive() > 0) {
        LossKind::Dua
    } else {
        LossKind::ClsOnly
    };
    DuaLossConfig {
        sampling: AnchorSampling::all(),
        ..DuaLossConfig::default()
    }
    .with_kind(kind)
}

/// Iterated signed-gradient ascent on Dua-Loss. Perturbs `z` and/or `x`
/// according to `cfg.target`; with `adaptive` set, gradients flow through the
/// defense first. Returns the perturbed `(z, x)`.
pub fn gradient_attack(
    tracker: &TrackerModel,
    adaptive: Option<AdaptiveTarget<'_>>,
    z: &Tensor,
    x: &Tensor,
    labels: &[LabelSet],
    cfg: &AttackConfig,
) -> Result<(Tensor, Tensor)> {
    cfg.validate()?;
    let defense = if cfg.adaptive {
        Some(adaptive.ok_or_else(|| Error::Config("adaptive attack needs a deployed defense".into()))?)
    } else {
        None
    };
    let loss_cfg = attack_loss_config(labels);
    let targets = LossTargets::new(labels, &loss_cfg.sampling, tracker.dtype())?;
    let (steps, alpha) = cfg.schedule();
    let hit_z = cfg.target.hits(Variant::Template);
    let hit_x = cfg.target.hits(Variant::Search);
    let mut dz = z.zeros_like()?;
    let mut dx = x.zeros_like()?;
    if cfg.epsilon == 0.0 {
        return Ok((z.clone(), x.clone()));
    }
    for _ in 0..steps {
        let zv = Var::from_tensor(&apply_delta(z, &dz)?)?;
        let xv = Var::from_tensor(&apply_delta(x, &dx)?)?;
        let (mut zin, mut xin) = (zv.as_tensor().clone(), xv.as_tensor().clone());
        if let Some(d) = &defense {
            zin = d.apply(Variant::Template, &zin)?;
            xin = d.apply(Variant::Search, &xin)?;
        }
        let maps = tracker.forward(&zin, &xin)?;
        let loss = dua_loss(&maps.cls, &maps.reg, &targets, &loss_cfg)?;
        let grads = loss.backward()?;
        if hit_z {
            let g = grads.get(zv.as_tensor()).ok_or_else(|| Error::NonFinite("missing template gradient".into()))?;
            dz = signed_step(&dz, g, z, alpha, cfg.epsilon)?;
        }
        if hit_x {
            let g = grads.get(xv.as_tensor()).ok_or_else(|| Error::NonFinite("missing search gradient".into()))?;
            dx = signed_step(&dx, g, x, alpha, cfg.epsilon)?;
        }
    }
    Ok((apply_delta(z, &dz)?, apply_delta(x, &dx)?))
}

/// Random-search attack that sees only predicted boxes. `query` maps a
/// perturbed patch to a predicted box; the returned perturbation minimizes
/// the IoU between that box and `reference`, preferring smaller ‖δ‖₁ on ties.
/// The first query is `start` (or zero). Returns `(δ, iou)`.
pub fn iou_blackbox_attack(
    query: &mut dyn FnMut(&Tensor) -> Result<BBox>,
    x: &Tensor,
    reference: &BBox,
    start: Option<&Tensor>,
    cfg: &AttackConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor, f64)> {
    if cfg.queries == 0 {
        return Err(Error::Config("black-box attack needs at least one query".into()));
    }
    let eps = cfg.epsilon;
    let l1 = |d: &Tensor| -> Result<f64> { crate::losses::scalar(&d.to_dtype(DType::F64)?.abs()?.sum_all()?) };
    let mut evaluate = |d: &Tensor| -> Result<f64> { Ok(iou(&query(&apply_delta(x, d)?)?, reference)) };

    let zero = x.zeros_like()?;
    let first = match start {
        Some(s) => project(s, x, eps)?,
        None => zero.clone(),
    };
    let mut best_iou = evaluate(&first)?;
    let mut best_l1 = l1(&first)?;
    let mut best = first;
    let mut used = 1;
    if start.is_some() && used < cfg.queries {
        let v = evaluate(&zero)?;
        used += 1;
        if v < best_iou || (v == best_iou && 0.0 < best_l1) {
            best_iou = v;
            best_l1 = 0.0;
            best = zero.clone();
        }
    }
    if eps == 0.0 {
        return Ok((best, best_iou));
    }
    let (_, c, h, w) = x.dims4()?;
    let x_host: Vec<f32> = x.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
    while used < cfg.queries {
        // square proposals: a random patch of the current best is set to ±ε per channel
        let side = ((h.min(w) as f64) * rng.gen_range(0.1..0.35)).round().max(1.0) as usize;
        let y0 = rng.gen_range(0..=h - side);
        let x0 = rng.gen_range(0..=w - side);
        let mut d: Vec<f32> = best.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
        for ch in 0..c {
            let s = if rng.gen_bool(0.5) { eps as f32 } else { -eps as f32 };
            for yy in y0..y0 + side {
                for xx in x0..x0 + side {
                    let i = (ch * h + yy) * w + xx;
                    d[i] = s.clamp(-x_host[i], 1.0 - x_host[i]);
                }
            }
        }
        let cand = Tensor::from_vec(d, x.dims(), x.device())?.to_dtype(x.dtype())?;
        let v = evaluate(&cand)?;
        used += 1;
        if v < best_iou {
            best_iou = v;
            best_l1 = l1(&cand)?;
            best = cand;
        } else if v == best_iou {
            let n = l1(&cand)?;
            if n < best_l1 {
                best_l1 = n;
                best = cand;
            }
        }
    }
    Ok((best, best_iou))
}

/// Per-run attack bookkeeping.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AttackStats {
    pub frames: usize,
    pub max_delta: f64,
    /// Perturbed template/search tensors, flattened, in the order produced.
    pub perturbations: Vec<Vec<f32>>,
}

/// Tracker hook that runs one configured attack on every frame.
pub struct AttackHook<'a> {
    cfg: AttackConfig,
    adaptive: Option<AdaptiveTarget<'a>>,
    rng: ChaCha8Rng,
    carry: Option<Tensor>,
    last_iou: f64,
    record: bool,
    dump_dir: Option<PathBuf>,
    pub stats: AttackStats,
}

impl<'a> AttackHook<'a> {
    pub fn new(cfg: AttackConfig, adaptive: Option<AdaptiveTarget<'a>>) -> Result<Self> {
        cfg.validate()?;
        if cfg.adaptive && adaptive.is_none() {
            return Err(Error::Config("adaptive attack needs a deployed defense".into()));
        }
        let seed = cfg.seed;
        Ok(AttackHook {
            cfg,
            adaptive,
            rng: ChaCha8Rng::seed_from_u64(seed),
            carry: None,
            last_iou: 1.0,
            record: false,
            dump_dir: None,
            stats: AttackStats::default(),
        })
    }

    /// Keep a copy of every perturbation (for determinism checks).
    pub fn recording(mut self) -> Self {
        self.record = true;
        self
    }

    /// Write clean and perturbed patches side by side as PNG files.
    pub fn dumping(mut self, dir: PathBuf) -> Self {
        self.dump_dir = Some(dir);
        self
    }

    fn adaptive_target(&self) -> Option<AdaptiveTarget<'a>> {
        self.adaptive.filter(|_| self.cfg.adaptive)
    }

    fn finish(&mut self, clean: &Tensor, out: Tensor, tag: &str) -> Result<Tensor> {
        let d = linf(&(&out - clean)?)?;
        if d > self.cfg.epsilon + 1e-6 {
            return Err(Error::OutOfRange);
        }
        self.stats.max_delta = self.stats.max_delta.max(d);
        self.stats.frames += 1;
        if self.record {
            self.stats.perturbations.push(out.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?);
        }
        if let Some(dir) = &self.dump_dir {
            dump_patch_pair(clean, &out, dir, tag)?;
        }
        Ok(out)
    }

    fn labels_for(model: &TrackerModel, target: &BBox) -> LabelSet {
        let cfg = model.config();
        LabelSet::from_gt(model.grid(), target, cfg.pos_threshold, cfg.neg_threshold)
    }
}

/// Writes `{tag}_clean.png` and `{tag}_adv.png` (batch item 0).
pub fn dump_patch_pair(clean: &Tensor, perturbed: &Tensor, dir: &std::path::Path, tag: &str) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Image::from_tensor(&clean.narrow(0, 0, 1)?)?.save_png(&dir.join(format!("{tag}_clean.png")))?;
    Image::from_tensor(&perturbed.narrow(0, 0, 1)?)?.save_png(&dir.join(format!("{tag}_adv.png")))
}

struct BoxQuery<'m> {
    model: &'m TrackerModel,
    features: TemplateFeatures,
    state: TrackState,
    mapping: CropMapping,
}

impl BoxQuery<'_> {
    fn run(&self, adaptive: Option<&AdaptiveTarget<'_>>, x: &Tensor) -> Result<BBox> {
        let x = match adaptive {
            Some(a) => a.apply(Variant::Search, x)?,
            None => x.clone(),
        };
        let maps = self.model.forward_features(&self.features, &x)?;
        select_box(&maps, self.model.grid(), &self.state, &self.mapping)
    }
}

impl InputHook for AttackHook<'_> {
    fn on_template(&mut self, model: &TrackerModel, z: Tensor, ctx: &TemplateContext<'_>) -> Result<Tensor> {
        self.carry = None;
        self.last_iou = 1.0;
        if !self.cfg.target.hits(Variant::Template) || self.cfg.kind == AttackKind::IouBlackbox {
            return Ok(z);
        }
        // the template attack raises the loss on the first frame's own search region
        let cfg = model.config();
        let (patch, mapping) = crop_search(ctx.frame, &ctx.init, cfg.template_size, cfg.search_size)?;
        let x = patch.to_tensor(model.dtype())?;
        let labels = [Self::labels_for(model, &mapping.box_to_patch(&ctx.init))];
        let attack = AttackConfig {
            target: AttackTarget::Template,
            ..self.cfg.clone()
        };
        let (zp, _) = gradient_attack(model, self.adaptive_target(), &z, &x, &labels, &attack)?;
        self.finish(&z, zp, "template")
    }

    fn on_search(&mut self, model: &TrackerModel, x: Tensor, ctx: &FrameContext<'_>) -> Result<Tensor> {
        if !self.cfg.target.hits(Variant::Search) {
            return Ok(x);
        }
        let adaptive = self.adaptive_target();
        // non-adaptive attacks never see the defended template
        let z = if adaptive.is_some() { ctx.template } else { ctx.template_raw };
        let tag = format!("frame{:04}", ctx.index);
        match self.cfg.kind {
            AttackKind::Fgsm | AttackKind::Pgd => {
                let target = ctx.mapping.box_to_patch(&ctx.gt.unwrap_or(ctx.state.prev));
                let labels = [Self::labels_for(model, &target)];
                let attack = AttackConfig {
                    target: AttackTarget::Search,
                    ..self.cfg.clone()
                };
                let (_, xp) = gradient_attack(model, adaptive, z, &x, &labels, &attack)?;
                self.finish(&x, xp, &tag)
            }
            AttackKind::IouBlackbox => {
                let q = BoxQuery {
                    model,
                    features: model.template_features(z)?,
                    state: ctx.state,
                    mapping: ctx.mapping,
                };
                let start = if self.last_iou < self.cfg.iou_threshold { self.carry.clone() } else { None };
                let mut query = |p: &Tensor| q.run(adaptive.as_ref(), p);
                let (delta, v) = iou_blackbox_attack(&mut query, &x, &ctx.state.prev, start.as_ref(), &self.cfg, &mut self.rng)?;
                self.last_iou = v;
                self.carry = Some(delta.clone());
                let xp = apply_delta(&x, &delta)?;
                self.finish(&x, xp, &tag)
            }
        }
    }
}
