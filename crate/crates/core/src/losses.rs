//! Dua-Loss: fore/background cross-entropy plus SmoothL1 box regression.
//!
//! The same loss scores defense quality during training and drives every
//! gradient attack. Score-map layouts follow [`crate::tracker::ScoreMaps`]:
//! classification channels are `[background × K, foreground × K]`, regression
//! channels are `[dx × K, dy × K, dw × K, dh × K]`.

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{AnchorLabel, LabelSet};
use crate::nn::derive_seed;

/// Which terms of the loss are active (the ablation axis).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    #[default]
    Dua,
    ClsOnly,
    RegOnly,
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dua" => Ok(LossKind::Dua),
            "cls-only" | "cls" => Ok(LossKind::ClsOnly),
            "reg-only" | "reg" => Ok(LossKind::RegOnly),
            other => Err(Error::Config(format!("unknown loss kind {other:?}"))),
        }
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossKind::Dua => "dua",
            LossKind::ClsOnly => "cls-only",
            LossKind::RegOnly => "reg-only",
        })
    }
}

/// Denominator of the regression term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RegNormalization {
    /// Mean over positive anchors.
    #[default]
    Positives,
    /// Mean over every anchor of every pair.
    AllAnchors,
}

/// Per-pair anchor sampling for the classification term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnchorSampling {
    /// `None` keeps every positive.
    pub max_positive: Option<usize>,
    /// `None` keeps every negative.
    pub max_total: Option<usize>,
    pub seed: u64,
}

impl Default for AnchorSampling {
    fn default() -> Self {
        AnchorSampling {
            max_positive: Some(16),
            max_total: Some(48),
            seed: 0,
        }
    }
}

impl AnchorSampling {
    pub fn all() -> Self {
        AnchorSampling {
            max_positive: None,
            max_total: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DuaLossConfig {
    pub sigma: f64,
    pub reg_weight: f64,
    pub kind: LossKind,
    pub normalization: RegNormalization,
    pub sampling: AnchorSampling,
}

impl Default for DuaLossConfig {
    fn default() -> Self {
        DuaLossConfig {
            sigma: 1.0,
            reg_weight: 1.0,
            kind: LossKind::Dua,
            normalization: RegNormalization::Positives,
            sampling: AnchorSampling::default(),
        }
    }
}

impl DuaLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!("sigma must be > 0, got {}", self.sigma)));
        }
        if !(self.reg_weight >= 0.0 && self.reg_weight.is_finite()) {
            return Err(Error::Config(format!("reg_weight must be >= 0, got {}", self.reg_weight)));
        }
        Ok(())
    }

    pub fn with_kind(mut self, kind: LossKind) -> Self {
        self.kind = kind;
        self
    }
}

/// `0.5 σ² d²` inside `|d| < 1/σ²`, `|d| − 0.5/σ²` outside.
pub fn smooth_l1(d: f64, sigma: f64) -> f64 {
    let s2 = sigma * sigma;
    if d.abs() < 1.0 / s2 {
        0.5 * s2 * d * d
    } else {
        d.abs() - 0.5 / s2
    }
}

/// Elementwise [`smooth_l1`] on a tensor, written with `minimum` so it
/// differentiates everywhere.
pub fn smooth_l1_tensor(d: &Tensor, sigma: f64) -> Result<Tensor> {
    let s2 = sigma * sigma;
    let a = d.abs()?;
    let m = a.clamp(0.0, 1.0 / s2)?;
    let quad = (m.sqr()? * (0.5 * s2))?;
    Ok((quad + (a - m)?)?)
}

/// Dense loss targets for a batch, built once from the label sets.
#[derive(Debug, Clone)]
pub struct LossTargets {
    /// (B, N) 1 where a positive anchor was sampled.
    pub cls_pos: Tensor,
    /// (B, N) 1 where a negative anchor was sampled.
    pub cls_neg: Tensor,
    pub cls_count: usize,
    /// (B, 4, N) regression targets.
    pub reg: Tensor,
    /// (B, 1, N) 1 on positive anchors.
    pub reg_mask: Tensor,
    pub pos_count: usize,
    pub batch: usize,
    pub anchors: usize,
}

impl LossTargets {
    pub fn new(labels: &[LabelSet], sampling: &AnchorSampling, dtype: DType) -> Result<Self> {
        let batch = labels.len();
        let anchors = labels.first().map(|l| l.len()).unwrap_or(0);
        if batch == 0 || anchors == 0 {
            return Err(Error::EmptyAnchors("empty label batch"));
        }
        if labels.iter().any(|l| l.len() != anchors) {
            return Err(Error::Shape("label sets of different lengths".into()));
        }
        let mut pos = vec![0f64; batch * anchors];
        let mut neg = vec![0f64; batch * anchors];
        let mut reg = vec![0f64; batch * 4 * anchors];
        let mut reg_mask = vec![0f64; batch * anchors];
        let mut cls_count = 0;
        let mut pos_count = 0;
        for (b, set) in labels.iter().enumerate() {
            let mut positives: Vec<usize> = Vec::new();
            let mut negatives: Vec<usize> = Vec::new();
            for (a, l) in set.cls.iter().enumerate() {
                match l {
                    AnchorLabel::Positive => positives.push(a),
                    AnchorLabel::Negative => negatives.push(a),
                    AnchorLabel::Ignore => {}
                }
            }
            for &a in &positives {
                reg_mask[b * anchors + a] = 1.0;
                for t in 0..4 {
                    reg[(b * 4 + t) * anchors + a] = set.reg[a][t];
                }
            }
            pos_count += positives.len();

            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(sampling.seed, b as u64));
            if let Some(cap) = sampling.max_positive {
                if positives.len() > cap {
                    positives.shuffle(&mut rng);
                    positives.truncate(cap);
                }
            }
            if let Some(total) = sampling.max_total {
                let room = total.saturating_sub(positives.len());
                if negatives.len() > room {
                    negatives.shuffle(&mut rng);
                    negatives.truncate(room);
                }
            }
            for &a in &positives {
                pos[b * anchors + a] = 1.0;
            }
            for &a in &negatives {
                neg[b * anchors + a] = 1.0;
            }
            cls_count += positives.len() + negatives.len();
        }
        let dev = Device::Cpu;
        let t = |v: Vec<f64>, shape: &[usize]| -> Result<Tensor> { Ok(Tensor::from_vec(v, shape, &dev)?.to_dtype(dtype)?) };
        Ok(LossTargets {
            cls_pos: t(pos, &[batch, anchors])?,
            cls_neg: t(neg, &[batch, anchors])?,
            cls_count,
            reg: t(reg, &[batch, 4, anchors])?,
            reg_mask: t(reg_mask, &[batch, 1, anchors])?,
            pos_count,
            batch,
            anchors,
        })
    }
}

fn check_map(map: &Tensor, groups: usize, targets: &LossTargets) -> Result<(usize, usize)> {
    let (b, ch, h, w) = map.dims4()?;
    if ch % groups != 0 || b != targets.batch || (ch / groups) * h * w != targets.anchors {
        return Err(Error::Shape(format!(
            "score map {:?} against {} pairs of {} anchors",
            map.dims(),
            targets.batch,
            targets.anchors
        )));
    }
    Ok((b, targets.anchors))
}

/// Mean cross-entropy over the sampled anchors.
pub fn cls_loss(cls_map: &Tensor, targets: &LossTargets) -> Result<Tensor> {
    let (b, n) = check_map(cls_map, 2, targets)?;
    if targets.cls_count == 0 {
        return Err(Error::EmptyAnchors("every anchor is ignored"));
    }
    let logits = cls_map.reshape((b, 2, n))?;
    let logp = candle_nn::ops::log_softmax(&logits, 1)?;
    let bg = logp.narrow(1, 0, 1)?.squeeze(1)?;
    let fg = logp.narrow(1, 1, 1)?.squeeze(1)?;
    let picked = ((fg * &targets.cls_pos)? + (bg * &targets.cls_neg)?)?;
    Ok((picked.sum_all()? * (-1.0 / targets.cls_count as f64))?)
}

/// Sum of SmoothL1 over `(dx, dy, dw, dh)`, averaged over positive anchors.
pub fn reg_loss(reg_map: &Tensor, targets: &LossTargets, cfg: &DuaLossConfig) -> Result<Tensor> {
    let (b, n) = check_map(reg_map, 4, targets)?;
    if targets.pos_count == 0 {
        return Err(Error::EmptyAnchors("no positive anchor"));
    }
    let pred = reg_map.reshape((b, 4, n))?;
    let diff = (pred - &targets.reg)?;
    let per = smooth_l1_tensor(&diff, cfg.sigma)?.broadcast_mul(&targets.reg_mask)?;
    let denom = match cfg.normalization {
        RegNormalization::Positives => targets.pos_count,
        RegNormalization::AllAnchors => b * n,
    };
    Ok((per.sum_all()? / denom as f64)?)
}

/// `L_cls + reg_weight · L_reg`, restricted by `cfg.kind`.
pub fn dua_loss(cls_map: &Tensor, reg_map: &Tensor, targets: &LossTargets, cfg: &DuaLossConfig) -> Result<Tensor> {
    match cfg.kind {
        LossKind::ClsOnly => cls_loss(cls_map, targets),
        LossKind::RegOnly => Ok((reg_loss(reg_map, targets, cfg)? * cfg.reg_weight)?),
        LossKind::Dua => {
            let c = cls_loss(cls_map, targets)?;
            if cfg.reg_weight == 0.0 {
                return Ok(c);
            }
            let r = reg_loss(reg_map, targets, cfg)?;
            Ok((c + (r * cfg.reg_weight)?)?)
        }
    }
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}
