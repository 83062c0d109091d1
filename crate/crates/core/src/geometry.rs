//! Boxes, anchor grids, overlap and the label/target encoding shared by the
//! tracker, the losses, the attacks and the evaluation metrics.
//!
//! Boxes are stored in corner form `(x, y, w, h)` with continuous pixel
//! coordinates: pixel `i` covers `[i, i + 1)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest magnitude allowed for a log-space size delta before `exp`.
pub const MAX_LOG_DELTA: f64 = 4.0;

/// Axis-aligned rectangle in frame or patch pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        let b = BBox { x, y, w, h };
        if b.is_valid() {
            Ok(b)
        } else {
            Err(Error::InvalidBox(format!("({x}, {y}, {w}, {h})")))
        }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox {
            x: cx - w / 2.0,
            y: cy - h / 2.0,
            w,
            h,
        }
    }

    pub fn is_valid(&self) -> bool {
        [self.x, self.y, self.w, self.h].iter().all(|v| v.is_finite()) && self.w > 0.0 && self.h > 0.0
    }

    pub fn cx(&self) -> f64 {
        self.x + self.w / 2.0
    }

    pub fn cy(&self) -> f64 {
        self.y + self.h / 2.0
    }

    pub fn center(&self) -> (f64, f64) {
        (self.cx(), self.cy())
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    /// Fits the box inside a `width × height` frame, shrinking it if needed.
    pub fn clip_to(&self, width: f64, height: f64) -> BBox {
        let w = self.w.clamp(1.0_f64.min(width), width);
        let h = self.h.clamp(1.0_f64.min(height), height);
        let x = self.x.clamp(0.0, width - w);
        let y = self.y.clamp(0.0, height - h);
        BBox { x, y, w, h }
    }

    pub fn intersects(&self, width: f64, height: f64) -> bool {
        self.x < width && self.y < height && self.right() > 0.0 && self.bottom() > 0.0
    }
}

/// Intersection over union; `0` for disjoint boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.right().min(b.right()) - a.x.max(b.x)).max(0.0);
    let ih = (a.bottom().min(b.bottom()) - a.y.max(b.y)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Euclidean distance between box centers.
pub fn center_error(pred: &BBox, gt: &BBox) -> f64 {
    let dx = pred.cx() - gt.cx();
    let dy = pred.cy() - gt.cy();
    dx.hypot(dy)
}

/// Center distance with the deltas scaled by the reference box size.
pub fn normalized_center_error(pred: &BBox, gt: &BBox) -> f64 {
    let dx = (pred.cx() - gt.cx()) / gt.w;
    let dy = (pred.cy() - gt.cy()) / gt.h;
    dx.hypot(dy)
}

/// Anchor layout over the tracker's score map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnchorConfig {
    /// Patch pixels per score-map cell.
    pub stride: f64,
    /// Anchor side lengths in patch pixels.
    pub scales: Vec<f64>,
    /// Aspect ratios `h / w`.
    pub ratios: Vec<f64>,
    pub grid_h: usize,
    pub grid_w: usize,
    /// Side of the (square) search patch the grid is centered in.
    pub patch_size: usize,
}

impl AnchorConfig {
    pub fn anchors_per_cell(&self) -> usize {
        self.scales.len() * self.ratios.len()
    }
}

/// Anchors in search-patch coordinates, indexed `k * grid_h * grid_w + i * grid_w + j`
/// where `k` enumerates (scale, ratio) pairs with the ratio varying fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorGrid {
    pub stride: f64,
    pub scales: Vec<f64>,
    pub ratios: Vec<f64>,
    pub grid_h: usize,
    pub grid_w: usize,
    pub anchors: Vec<BBox>,
}

impl AnchorGrid {
    pub fn per_cell(&self) -> usize {
        self.scales.len() * self.ratios.len()
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn cells(&self) -> usize {
        self.grid_h * self.grid_w
    }

    /// `(k, i, j)` of a flat anchor index.
    pub fn unravel(&self, index: usize) -> (usize, usize, usize) {
        let cells = self.cells();
        let k = index / cells;
        let rem = index % cells;
        (k, rem / self.grid_w, rem % self.grid_w)
    }
}

pub fn make_anchor_grid(cfg: &AnchorConfig) -> Result<AnchorGrid> {
    if cfg.scales.is_empty() || cfg.ratios.is_empty() {
        return Err(Error::Config("anchor scales and ratios must be non-empty".into()));
    }
    let positive = |v: &f64| v.is_finite() && *v > 0.0;
    if !positive(&cfg.stride)
        || !cfg.scales.iter().all(positive)
        || !cfg.ratios.iter().all(positive)
        || cfg.grid_h == 0
        || cfg.grid_w == 0
        || cfg.patch_size == 0
    {
        return Err(Error::Config(format!("anchor configuration must be positive: {cfg:?}")));
    }

    let center = cfg.patch_size as f64 / 2.0;
    let mut anchors = Vec::with_capacity(cfg.grid_h * cfg.grid_w * cfg.anchors_per_cell());
    for &scale in &cfg.scales {
        for &ratio in &cfg.ratios {
            let w = scale / ratio.sqrt();
            let h = scale * ratio.sqrt();
            for i in 0..cfg.grid_h {
                let cy = center + (i as f64 - (cfg.grid_h - 1) as f64 / 2.0) * cfg.stride;
                for j in 0..cfg.grid_w {
                    let cx = center + (j as f64 - (cfg.grid_w - 1) as f64 / 2.0) * cfg.stride;
                    anchors.push(BBox::from_center(cx, cy, w, h));
                }
            }
        }
    }
    Ok(AnchorGrid {
        stride: cfg.stride,
        scales: cfg.scales.clone(),
        ratios: cfg.ratios.clone(),
        grid_h: cfg.grid_h,
        grid_w: cfg.grid_w,
        anchors,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AnchorLabel {
    Positive,
    Negative,
    Ignore,
}

/// Classification labels and regression targets for one search patch.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelSet {
    pub cls: Vec<AnchorLabel>,
    /// `(dx, dy, dw, dh)`; meaningful only where `cls` is positive, zero elsewhere.
    pub reg: Vec<[f64; 4]>,
}

impl LabelSet {
    pub fn from_gt(grid: &AnchorGrid, gt: &BBox, pos_thr: f64, neg_thr: f64) -> Self {
        let cls = assign_cls_labels(grid, gt, pos_thr, neg_thr);
        let reg = encode_reg_targets(grid, gt)
            .into_iter()
            .zip(&cls)
            .map(|(d, l)| if *l == AnchorLabel::Positive { d } else { [0.0; 4] })
            .collect();
        LabelSet { cls, reg }
    }

    pub fn num_positive(&self) -> usize {
        self.cls.iter().filter(|l| **l == AnchorLabel::Positive).count()
    }

    pub fn len(&self) -> usize {
        self.cls.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cls.is_empty()
    }
}

/// Labels each anchor by its overlap with `gt`.
///
/// When no anchor clears `pos_thr`, the single best-overlapping anchor (lowest
/// index on ties) is promoted to positive, provided it overlaps at all.
pub fn assign_cls_labels(grid: &AnchorGrid, gt: &BBox, pos_thr: f64, neg_thr: f64) -> Vec<AnchorLabel> {
    let overlaps: Vec<f64> = grid.anchors.iter().map(|a| iou(a, gt)).collect();
    let mut labels: Vec<AnchorLabel> = overlaps
        .iter()
        .map(|&o| {
            if o > pos_thr {
                AnchorLabel::Positive
            } else if o < neg_thr {
                AnchorLabel::Negative
            } else {
                AnchorLabel::Ignore
            }
        })
        .collect();
    if !labels.contains(&AnchorLabel::Positive) {
        let mut best = 0;
        for (idx, &o) in overlaps.iter().enumerate() {
            if o > overlaps[best] {
                best = idx;
            }
        }
        if overlaps.get(best).is_some_and(|&o| o > 0.0) {
            labels[best] = AnchorLabel::Positive;
        }
    }
    labels
}

/// Center/log-size deltas from each anchor to `gt`.
pub fn encode(anchor: &BBox, gt: &BBox) -> [f64; 4] {
    [
        (gt.cx() - anchor.cx()) / anchor.w,
        (gt.cy() - anchor.cy()) / anchor.h,
        (gt.w / anchor.w).ln(),
        (gt.h / anchor.h).ln(),
    ]
}

pub fn encode_reg_targets(grid: &AnchorGrid, gt: &BBox) -> Vec<[f64; 4]> {
    grid.anchors.iter().map(|a| encode(a, gt)).collect()
}

/// Inverse of [`encode`]; size deltas are clamped to `±MAX_LOG_DELTA`.
pub fn decode_box(anchor: &BBox, deltas: [f64; 4]) -> BBox {
    let [dx, dy, dw, dh] = deltas;
    let cx = anchor.cx() + dx * anchor.w;
    let cy = anchor.cy() + dy * anchor.h;
    let w = anchor.w * dw.clamp(-MAX_LOG_DELTA, MAX_LOG_DELTA).exp();
    let h = anchor.h * dh.clamp(-MAX_LOG_DELTA, MAX_LOG_DELTA).exp();
    BBox::from_center(cx, cy, w, h)
}
