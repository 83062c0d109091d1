//! One-pass and reset-protocol evaluation, metric reduction, run comparison,
//! timing summaries, score-map dumps and report files.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attacks::{AdaptiveTarget, AttackConfig, AttackHook};
use crate::defense::{DefenseHook, DefenseSet, DeploymentPattern};
use crate::data::Sequence;
use crate::error::{Error, Result};
use crate::geometry::{center_error, iou, normalized_center_error, BBox};
use crate::imaging::{crop_search, crop_template};
use crate::nn::derive_seed;
use crate::tracker::{FrameTiming, FrameTracker, InputHook, ScoreMaps, Session, TrackerModel};

pub const SUCCESS_THRESHOLDS: usize = 21;
pub const PRECISION_PX: f64 = 20.0;

/// Per-frame outcome of tracking one sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceResult {
    pub name: String,
    pub boxes: Vec<BBox>,
    pub ious: Vec<f64>,
    pub center_errors: Vec<f64>,
    pub norm_center_errors: Vec<f64>,
    /// Frames where the reset protocol declared a failure.
    pub failures: Vec<usize>,
    pub timings: Vec<FrameTiming>,
}

impl SequenceResult {
    pub fn from_trace(name: &str, boxes: Vec<BBox>, gt: &[BBox], timings: Vec<FrameTiming>) -> Result<Self> {
        if boxes.len() != gt.len() {
            return Err(Error::CountMismatch {
                frames: boxes.len(),
                annotations: gt.len(),
            });
        }
        Ok(SequenceResult {
            name: name.to_string(),
            ious: boxes.iter().zip(gt).map(|(p, g)| iou(p, g)).collect(),
            center_errors: boxes.iter().zip(gt).map(|(p, g)| center_error(p, g)).collect(),
            norm_center_errors: boxes.iter().zip(gt).map(|(p, g)| normalized_center_error(p, g)).collect(),
            boxes,
            failures: Vec::new(),
            timings,
        })
    }

    pub fn len(&self) -> usize {
        self.ious.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ious.is_empty()
    }
}

fn pooled<'a>(results: &'a [SequenceResult], f: impl Fn(&'a SequenceResult) -> &'a [f64]) -> Vec<f64> {
    results.iter().flat_map(|r| f(r).iter().copied()).collect()
}

/// Fraction of frames with IoU strictly above each of 0, 0.05, …, 1.0.
pub fn success_curve(ious: &[f64]) -> Vec<f64> {
    (0..SUCCESS_THRESHOLDS)
        .map(|i| {
            let t = i as f64 * 0.05;
            fraction(ious, |v| v > t)
        })
        .collect()
}

fn fraction(values: &[f64], pred: impl Fn(f64) -> bool) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().filter(|v| pred(**v)).count() as f64 / values.len() as f64
}

fn mean_of(v: &[f64]) -> f64 {
    crate::tracker::mean(v.iter().copied())
}

pub fn success_auc_of(ious: &[f64]) -> f64 {
    mean_of(&success_curve(ious))
}

/// Success AUC over all frames of all sequences.
pub fn success_auc(results: &[SequenceResult]) -> f64 {
    success_auc_of(&pooled(results, |r| &r.ious))
}

pub fn precision_of(errors: &[f64], tau: f64) -> f64 {
    fraction(errors, |e| e <= tau)
}

/// Fraction of frames whose center error is at most `tau` pixels.
pub fn precision_at(results: &[SequenceResult], tau: f64) -> f64 {
    precision_of(&pooled(results, |r| &r.center_errors), tau)
}

/// Fraction of frames with center error ≤ t for t = 0, 1, …, 50 px.
pub fn precision_curve(errors: &[f64]) -> Vec<f64> {
    (0..=50).map(|t| precision_of(errors, t as f64)).collect()
}

pub fn norm_precision_of(errors: &[f64]) -> f64 {
    mean_of(&(0..SUCCESS_THRESHOLDS).map(|i| fraction(errors, |e| e <= i as f64 * 0.025)).collect::<Vec<_>>())
}

/// Mean over thresholds 0, 0.025, …, 0.5 of the fraction of frames whose
/// normalized center error is at most the threshold.
pub fn norm_precision(results: &[SequenceResult]) -> f64 {
    norm_precision_of(&pooled(results, |r| &r.norm_center_errors))
}

/// Optional defense and attack applied while tracking.
#[derive(Clone, Copy)]
pub struct EvalSetup<'a> {
    pub model: &'a TrackerModel,
    pub defense: Option<(DeploymentPattern, &'a DefenseSet<'a>)>,
    pub attack: Option<&'a AttackConfig>,
}

impl<'a> EvalSetup<'a> {
    pub fn clean(model: &'a TrackerModel) -> Self {
        EvalSetup {
            model,
            defense: None,
            attack: None,
        }
    }

    fn validate(&self) -> Result<()> {
        if let Some((pattern, nets)) = self.defense {
            nets.check(pattern)?;
        }
        if let Some(a) = self.attack {
            a.validate()?;
            if a.adaptive && self.defense.is_none() {
                return Err(Error::Config("adaptive attack needs a deployed defense".into()));
            }
        }
        Ok(())
    }

    /// Runs `f` with a fresh session whose attack is seeded for sequence `index`.
    fn with_session<T>(&self, index: usize, f: impl FnOnce(&mut Session<'_>) -> Result<T>) -> Result<T> {
        let mut defense = match self.defense {
            Some((pattern, nets)) => Some(DefenseHook::new(pattern, *nets)?),
            None => None,
        };
        let adaptive = self.defense.map(|(pattern, nets)| AdaptiveTarget { pattern, nets });
        let mut attack = match self.attack {
            Some(cfg) => Some(AttackHook::new(
                AttackConfig {
                    seed: derive_seed(cfg.seed, index as u64),
                    ..cfg.clone()
                },
                adaptive,
            )?),
            None => None,
        };
        let mut session = Session::new(
            self.model,
            defense.as_mut().map(|h| h as &mut dyn InputHook),
            attack.as_mut().map(|h| h as &mut dyn InputHook),
        );
        f(&mut session)
    }
}

/// Tracks `seq` once from its first ground-truth box.
pub fn track_ope(tracker: &mut dyn FrameTracker, seq: &Sequence) -> Result<SequenceResult> {
    let mut timings = vec![tracker.init(&seq.frames[0], seq.gt[0])?];
    let mut boxes = vec![seq.gt[0]];
    for (i, frame) in seq.frames.iter().enumerate().skip(1) {
        let (b, t) = tracker.update(frame, i, Some(&seq.gt[i]))?;
        boxes.push(b);
        timings.push(t);
    }
    SequenceResult::from_trace(&seq.name, boxes, &seq.gt, timings)
}

fn parallel_map<T: Send>(n: usize, jobs: usize, f: impl Fn(usize) -> Result<T> + Sync) -> Result<Vec<T>> {
    if jobs <= 1 || n <= 1 {
        return (0..n).map(f).collect();
    }
    let mut slots: Vec<Option<Result<T>>> = (0..n).map(|_| None).collect();
    std::thread::scope(|s| {
        let f = &f;
        let handles: Vec<_> = (0..jobs.min(n))
            .map(|w| s.spawn(move || (w..n).step_by(jobs).map(|i| (i, f(i))).collect::<Vec<_>>()))
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("evaluation worker panicked") {
                slots[i] = Some(r);
            }
        }
    });
    slots.into_iter().map(|s| s.expect("every index evaluated")).collect()
}

/// One-pass evaluation: every sequence tracked once, no re-initialization.
/// `jobs` sequences run concurrently; results keep sequence order.
pub fn run_ope(setup: &EvalSetup<'_>, sequences: &[Sequence], jobs: usize) -> Result<Vec<SequenceResult>> {
    setup.validate()?;
    if sequences.is_empty() {
        return Err(Error::EmptySequence);
    }
    parallel_map(sequences.len(), jobs, |i| setup.with_session(i, |s| track_ope(s, &sequences[i])))
}

/// Reset-protocol constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ResetConfig {
    /// Frames between a failure and re-initialization.
    pub gap: usize,
    /// Frames after each (re-)initialization excluded from accuracy.
    pub burn_in: usize,
}

impl Default for ResetConfig {
    fn default() -> Self {
        ResetConfig { gap: 5, burn_in: 10 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FrameState {
    Tracked,
    BurnIn,
    Failure,
    Skipped,
}

/// Per-frame overlap under the reset protocol (zero on failure and skipped frames).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResetTrace {
    pub ious: Vec<f64>,
    pub states: Vec<FrameState>,
}

impl ResetTrace {
    pub fn failures(&self) -> usize {
        self.states.iter().filter(|s| **s == FrameState::Failure).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResetSummary {
    pub accuracy: f64,
    pub robustness: f64,
    pub eao_s: f64,
    pub traces: Vec<ResetTrace>,
}

/// Tracks with re-initialization `gap` frames after every failure (IoU = 0).
pub fn track_reset(tracker: &mut dyn FrameTracker, seq: &Sequence, cfg: &ResetConfig) -> Result<ResetTrace> {
    let n = seq.len();
    let mut ious = vec![0.0; n];
    let mut states = vec![FrameState::Skipped; n];
    let mut next_init = Some(0);
    let mut last_init = 0;
    let mut i = 0;
    while i < n {
        if next_init == Some(i) {
            tracker.init(&seq.frames[i], seq.gt[i])?;
            ious[i] = 1.0;
            states[i] = if cfg.burn_in > 0 { FrameState::BurnIn } else { FrameState::Tracked };
            last_init = i;
            next_init = None;
            i += 1;
            continue;
        }
        if next_init.is_some() {
            i += 1;
            continue;
        }
        let (b, _) = tracker.update(&seq.frames[i], i, Some(&seq.gt[i]))?;
        let v = iou(&b, &seq.gt[i]);
        if v <= 0.0 {
            states[i] = FrameState::Failure;
            next_init = Some(i + cfg.gap.max(1));
        } else {
            ious[i] = v;
            states[i] = if i - last_init < cfg.burn_in { FrameState::BurnIn } else { FrameState::Tracked };
        }
        i += 1;
    }
    Ok(ResetTrace { ious, states })
}

/// Accuracy over tracked frames past burn-in, failures per sequence, and the
/// simplified expected average overlap. If burn-in leaves no frame, accuracy
/// falls back to every non-failed frame.
pub fn reset_metrics(traces: &[ResetTrace]) -> (f64, f64, f64) {
    let tracked: Vec<f64> = traces
        .iter()
        .flat_map(|t| t.ious.iter().zip(&t.states).filter(|(_, s)| **s == FrameState::Tracked).map(|(v, _)| *v))
        .collect();
    let accuracy = if tracked.is_empty() {
        mean_of(
            &traces
                .iter()
                .flat_map(|t| t.ious.iter().zip(&t.states).filter(|(_, s)| **s == FrameState::BurnIn).map(|(v, _)| *v))
                .collect::<Vec<_>>(),
        )
    } else {
        mean_of(&tracked)
    };
    let robustness = mean_of(&traces.iter().map(|t| t.failures() as f64).collect::<Vec<_>>());
    let eao = mean_of(&traces.iter().map(|t| mean_of(&t.ious)).collect::<Vec<_>>());
    (accuracy, robustness, eao)
}

pub fn run_reset_protocol(setup: &EvalSetup<'_>, sequences: &[Sequence], cfg: &ResetConfig, jobs: usize) -> Result<ResetSummary> {
    setup.validate()?;
    if sequences.is_empty() {
        return Err(Error::EmptySequence);
    }
    let traces = parallel_map(sequences.len(), jobs, |i| setup.with_session(i, |s| track_reset(s, &sequences[i], cfg)))?;
    let (accuracy, robustness, eao_s) = reset_metrics(&traces);
    Ok(ResetSummary {
        accuracy,
        robustness,
        eao_s,
        traces,
    })
}

/// Headline metrics of one evaluation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub run: String,
    pub dataset: String,
    pub metrics: BTreeMap<String, f64>,
}

impl RunMetrics {
    pub fn from_ope(run: &str, dataset: &str, results: &[SequenceResult]) -> Self {
        let mut metrics = BTreeMap::new();
        metrics.insert("success".to_string(), success_auc(results));
        metrics.insert("precision".to_string(), precision_at(results, PRECISION_PX));
        metrics.insert("norm_precision".to_string(), norm_precision(results));
        RunMetrics {
            run: run.into(),
            dataset: dataset.into(),
            metrics,
        }
    }

    pub fn with_reset(mut self, s: &ResetSummary) -> Self {
        self.metrics.insert("accuracy".into(), s.accuracy);
        self.metrics.insert("robustness".into(), s.robustness);
        self.metrics.insert("eao_s".into(), s.eao_s);
        self
    }

    pub fn get(&self, metric: &str) -> Option<f64> {
        self.metrics.get(metric).copied()
    }
}

/// Robustness counts failures, so smaller is better.
pub fn higher_is_better(metric: &str) -> bool {
    metric != "robustness"
}

/// Truncates toward zero at `decimals`, tolerating representation error
/// (0.29999999 prints as 0.30, not 0.29).
pub fn truncate(v: f64, decimals: i32) -> f64 {
    let s = 10f64.powi(decimals);
    let scaled = v * s;
    let nudged = scaled + scaled.signum() * 1e-7;
    nudged.trunc() / s
}

fn signed(v: f64, decimals: usize) -> String {
    let v = if v == 0.0 { 0.0 } else { v };
    format!("{v:+.decimals$}")
}

/// Change between two runs for one metric. Positive means improvement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Delta {
    pub metric: String,
    pub base: f64,
    pub value: f64,
    pub abs: f64,
    pub pct: f64,
}

impl Delta {
    pub fn new(metric: &str, base: f64, value: f64) -> Self {
        let abs = if higher_is_better(metric) { value - base } else { base - value };
        let pct = if base != 0.0 { abs / base.abs() * 100.0 } else { 0.0 };
        Delta {
            metric: metric.into(),
            base,
            value,
            abs,
            pct,
        }
    }

    /// Absolute change at three decimals, e.g. `+0.212`.
    pub fn abs_text(&self) -> String {
        signed(truncate(self.abs, 3), 3)
    }

    /// Relative change truncated at two decimals, e.g. `+60.74%`.
    pub fn pct_text(&self) -> String {
        format!("{}%", signed(truncate(self.pct, 2), 2))
    }
}

/// Per-metric deltas of `other` against `base`.
pub fn compare_runs(base: &RunMetrics, other: &RunMetrics) -> Result<Vec<Delta>> {
    if base.dataset != other.dataset {
        return Err(Error::MetricMismatch(format!(
            "runs use different datasets ({} vs {})",
            base.dataset, other.dataset
        )));
    }
    if base.metrics.keys().ne(other.metrics.keys()) {
        return Err(Error::MetricMismatch(format!("{} and {} report different metrics", base.run, other.run)));
    }
    Ok(base
        .metrics
        .iter()
        .map(|(k, b)| Delta::new(k, *b, other.metrics[k]))
        .collect())
}

/// Plain-text comparison table; the first run is the reference.
pub fn render_table(runs: &[RunMetrics]) -> Result<String> {
    let first = runs.first().ok_or_else(|| Error::Config("no runs to compare".into()))?;
    let mut out = format!("{:<28}", "run");
    for m in first.metrics.keys() {
        out.push_str(&format!(" {m:>14} {:>9} {:>9}", "Δ", "Δ(%)"));
    }
    out.push('\n');
    for (i, r) in runs.iter().enumerate() {
        let deltas = compare_runs(first, r)?;
        out.push_str(&format!("{:<28}", r.run));
        for d in deltas {
            let (a, p) = if i == 0 { (String::new(), String::new()) } else { (d.abs_text(), d.pct_text()) };
            out.push_str(&format!(" {:>14.3} {a:>9} {p:>9}", d.value));
        }
        out.push('\n');
    }
    Ok(out)
}

/// Mean per-frame cost of each stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub tracker_ms: f64,
    pub defense_template_ms: f64,
    pub defense_search_ms: f64,
    pub attack_ms: f64,
    /// Tracker plus defense, excluding the attack.
    pub total_ms: f64,
    pub fps: f64,
}

impl TimingReport {
    pub fn from_timings(timings: &[FrameTiming]) -> Self {
        let m = |f: fn(&FrameTiming) -> f64| crate::tracker::mean(timings.iter().map(f));
        let tracker_ms = m(|t| t.tracker_ms);
        let defense_template_ms = m(|t| t.defense_template_ms);
        let defense_search_ms = m(|t| t.defense_search_ms);
        let total_ms = tracker_ms + defense_template_ms + defense_search_ms;
        TimingReport {
            tracker_ms,
            defense_template_ms,
            defense_search_ms,
            attack_ms: m(|t| t.attack_ms),
            total_ms,
            fps: if total_ms > 0.0 { 1e3 / total_ms } else { 0.0 },
        }
    }

    /// Baseline minus this run's per-frame time (negative when slower).
    pub fn delta_ms(&self, baseline: &TimingReport) -> f64 {
        baseline.total_ms - self.total_ms
    }
}

pub fn timing_report(results: &[SequenceResult]) -> TimingReport {
    let all: Vec<FrameTiming> = results.iter().flat_map(|r| r.timings.iter().copied()).collect();
    TimingReport::from_timings(&all)
}

/// Speed / inference-time table with deltas against the first row.
pub fn render_timing_table(rows: &[(String, TimingReport)]) -> String {
    let mut out = format!("{:<28} {:>10} {:>20} {:>12}\n", "run", "Speed/FPS", "Inference Time/ms", "Δtime/ms");
    if let Some((_, base)) = rows.first() {
        for (i, (name, r)) in rows.iter().enumerate() {
            let d = if i == 0 { String::new() } else { signed(r.delta_ms(base), 2) };
            out.push_str(&format!("{name:<28} {:>10.2} {:>20.2} {d:>12}\n", r.fps, r.total_ms));
        }
    }
    out
}

/// One row of a metrics report file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub run: String,
    pub dataset: String,
    pub pattern: String,
    pub attack: String,
    pub adaptive: bool,
    pub metric: String,
    pub value: f64,
}

/// Writes `metrics.csv` and `metrics.json` (no wall-clock values, so reruns are
/// byte-identical).
pub fn write_report(dir: &Path, rows: &[ReportRow]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv_path = dir.join("metrics.csv");
    let mut w = csv::Writer::from_path(&csv_path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))?;
    let json_path = dir.join("metrics.json");
    fs::write(&json_path, serde_json::to_string_pretty(rows)? + "\n").map_err(|e| Error::io(&json_path, e))
}

pub fn read_report(dir: &Path) -> Result<Vec<ReportRow>> {
    let path = dir.join("metrics.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Foreground probability maximized over anchors, as a (H, W) grid.
pub fn fg_heatmap(maps: &ScoreMaps) -> Result<(Vec<f64>, usize, usize)> {
    let (_, ch, h, w) = maps.cls.dims4()?;
    let k = ch / 2;
    let scores = maps.fg_scores(0)?;
    let mut out = vec![0.0f64; h * w];
    for a in 0..k {
        for (cell, v) in out.iter_mut().enumerate() {
            *v = v.max(scores[a * h * w + cell]);
        }
    }
    Ok((out, h, w))
}

/// Writes a heatmap normalized so that its maximum is 1.0 (white),
/// upscaled by `scale` with nearest-neighbour.
pub fn save_heatmap(values: &[f64], h: usize, w: usize, scale: usize, path: &Path) -> Result<()> {
    let max = values.iter().cloned().fold(0.0f64, f64::max);
    let scale = scale.max(1);
    let img = ::image::GrayImage::from_fn((w * scale) as u32, (h * scale) as u32, |x, y| {
        let v = values[(y as usize / scale) * w + x as usize / scale];
        let n = if max > 0.0 { v / max } else { 0.0 };
        ::image::Luma([(n * 255.0).round() as u8])
    });
    img.save(path)?;
    Ok(())
}

/// Score-map heatmaps for clean, attacked and defended search regions at the
/// given frames. The search region is cropped around the previous frame's
/// ground truth. Returns the written paths.
pub fn dump_score_maps(
    model: &TrackerModel,
    seq: &Sequence,
    frames: &[usize],
    attack: &AttackConfig,
    defense: Option<(DeploymentPattern, &DefenseSet<'_>)>,
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let cfg = model.config();
    let (zp, _) = crop_template(&seq.frames[0], &seq.gt[0], cfg.template_size)?;
    let z = zp.to_tensor(model.dtype())?;
    let mut written = Vec::new();
    for &i in frames {
        if i >= seq.len() {
            return Err(Error::Config(format!("frame {i} beyond sequence length {}", seq.len())));
        }
        let prev = seq.gt[i.saturating_sub(1)];
        let (xp, mapping) = crop_search(&seq.frames[i], &prev, cfg.template_size, cfg.search_size)?;
        let x = xp.to_tensor(model.dtype())?;
        let labels = [crate::geometry::LabelSet::from_gt(
            model.grid(),
            &mapping.box_to_patch(&seq.gt[i]),
            cfg.pos_threshold,
            cfg.neg_threshold,
        )];
        let non_adaptive = AttackConfig {
            adaptive: false,
            kind: crate::attacks::AttackKind::Pgd,
            target: crate::attacks::AttackTarget::Search,
            ..attack.clone()
        };
        let (_, xa) = crate::attacks::gradient_attack(model, None, &z, &x, &labels, &non_adaptive)?;
        let (zd, xd) = match defense {
            Some((pattern, nets)) => crate::defense::apply_pattern(pattern, nets, &z, &xa)?,
            None => (z.clone(), xa.clone()),
        };
        for (tag, zz, xx) in [("clean", &z, &x), ("attacked", &z, &xa), ("defended", &zd, &xd)] {
            let maps = model.forward(zz, xx)?;
            let (v, h, w) = fg_heatmap(&maps)?;
            let path = dir.join(format!("frame{i:04}_{tag}.png"));
            save_heatmap(&v, h, w, 8, &path)?;
            written.push(path);
        }
    }
    Ok(written)
}

/// Draws curves (values in [0, 1]) on a white canvas with axes.
pub fn plot_curves(curves: &[(&str, Vec<f64>)], path: &Path) -> Result<()> {
    const W: u32 = 400;
    const H: u32 = 300;
    const M: u32 = 30;
    const COLORS: [[u8; 3]; 6] = [[214, 39, 40], [31, 119, 180], [44, 160, 44], [255, 127, 14], [148, 103, 189], [0, 0, 0]];
    let mut img = ::image::RgbImage::from_pixel(W, H, ::image::Rgb([255, 255, 255]));
    for x in M..W - M {
        img.put_pixel(x, H - M, ::image::Rgb([0, 0, 0]));
    }
    for y in M..=H - M {
        img.put_pixel(M, y, ::image::Rgb([0, 0, 0]));
    }
    let to_px = |i: usize, n: usize, v: f64| -> (f64, f64) {
        let fx = if n > 1 { i as f64 / (n - 1) as f64 } else { 0.0 };
        (
            M as f64 + fx * (W - 2 * M) as f64,
            (H - M) as f64 - v.clamp(0.0, 1.0) * (H - 2 * M) as f64,
        )
    };
    for (c, (_, ys)) in curves.iter().enumerate() {
        let color = ::image::Rgb(COLORS[c % COLORS.len()]);
        for i in 1..ys.len() {
            let (x0, y0) = to_px(i - 1, ys.len(), ys[i - 1]);
            let (x1, y1) = to_px(i, ys.len(), ys[i]);
            let steps = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
            for s in 0..=steps {
                let t = s as f64 / steps as f64;
                let (x, y) = (x0 + t * (x1 - x0), y0 + t * (y1 - y0));
                img.put_pixel((x.round() as u32).min(W - 1), (y.round() as u32).min(H - 1), color);
            }
        }
    }
    img.save(path)?;
    Ok(())
}

/// Success and precision plots for a set of named runs.
pub fn write_plots(dir: &Path, runs: &[(&str, &[SequenceResult])]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let success: Vec<(&str, Vec<f64>)> = runs.iter().map(|(n, r)| (*n, success_curve(&pooled(r, |s| &s.ious)))).collect();
    let precision: Vec<(&str, Vec<f64>)> = runs
        .iter()
        .map(|(n, r)| (*n, precision_curve(&pooled(r, |s| &s.center_errors))))
        .collect();
    plot_curves(&success, &dir.join("success.png"))?;
    plot_curves(&precision, &dir.join("precision.png"))
}

/// Mean IoU over every frame; a finer-grained companion to success AUC.
pub fn mean_iou(results: &[SequenceResult]) -> f64 {
    mean_of(&pooled(results, |r| &r.ious))
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::DType;
    use crate::data::{gen_synthetic_sequence, SynthConfig};
    use crate::imaging::Image;
    use crate::tracker::TrackerConfig;

    fn result_with(ious: Vec<f64>, errors: Vec<f64>, norm: Vec<f64>) -> SequenceResult {
        SequenceResult {
            name: "s".into(),
            boxes: Vec::new(),
            ious,
            center_errors: errors,
            norm_center_errors: norm,
            failures: Vec::new(),
            timings: Vec::new(),
        }
    }

    #[test]
    fn success_examples() {
        assert_eq!(success_auc(&[result_with(vec![0.0; 4], vec![], vec![])]), 0.0);
        assert!((success_auc(&[result_with(vec![1.0; 4], vec![], vec![])]) - 20.0 / 21.0).abs() < 1e-12);
        assert!((success_auc(&[result_with(vec![0.5; 4], vec![], vec![])]) - 10.0 / 21.0).abs() < 1e-12);
    }

    #[test]
    fn precision_examples() {
        let r = [result_with(vec![], vec![10.0, 30.0], vec![])];
        assert_eq!(precision_at(&r, 20.0), 0.5);
        let zero = [result_with(vec![], vec![0.0; 3], vec![0.0; 3])];
        assert_eq!(precision_at(&zero, 20.0), 1.0);
        assert_eq!(norm_precision(&zero), 1.0);
        assert_eq!(norm_precision(&[result_with(vec![], vec![], vec![10.0; 3])]), 0.0);
    }

    /// Replays fixed boxes; `init` resets to the scripted frame.
    struct Scripted {
        boxes: Vec<BBox>,
    }

    impl FrameTracker for Scripted {
        fn init(&mut self, _: &Image, _: BBox) -> Result<FrameTiming> {
            Ok(FrameTiming::default())
        }
        fn update(&mut self, _: &Image, index: usize, _: Option<&BBox>) -> Result<(BBox, FrameTiming)> {
            Ok((self.boxes[index], FrameTiming::default()))
        }
    }

    fn still_sequence(n: usize) -> Sequence {
        let frames = vec![Image::filled(64, 64, [0.5; 3]); n];
        let gt = vec![BBox::new(20.0, 20.0, 10.0, 10.0).unwrap(); n];
        Sequence::new("still", frames, gt).unwrap()
    }

    #[test]
    fn oracle_tracker_is_perfect() {
        let seq = still_sequence(30);
        let mut oracle = Scripted { boxes: seq.gt.clone() };
        let r = track_ope(&mut oracle, &seq).unwrap();
        assert!(r.ious.iter().all(|v| *v == 1.0));
        let t = track_reset(&mut oracle, &seq, &ResetConfig::default()).unwrap();
        assert_eq!(reset_metrics(&[t]), (1.0, 0.0, 1.0));
    }

    #[test]
    fn single_failure_trace() {
        let seq = still_sequence(100);
        let mut boxes = seq.gt.clone();
        boxes[40] = BBox::new(50.0, 50.0, 5.0, 5.0).unwrap();
        let mut t = Scripted { boxes };
        let trace = track_reset(&mut t, &seq, &ResetConfig::default()).unwrap();
        assert_eq!(trace.failures(), 1);
        let (acc, rob, eao) = reset_metrics(&[trace.clone()]);
        assert_eq!(rob, 1.0);
        assert!((eao - 0.95).abs() < 1e-12);
        assert_eq!(acc, 1.0);
        assert_eq!(trace.states[45], FrameState::BurnIn);
        assert!(trace.ious[40..45].iter().all(|v| *v == 0.0));
        let clean = ResetTrace {
            ious: vec![1.0; 100],
            states: vec![FrameState::Tracked; 100],
        };
        let mut twice = clean.clone();
        twice.states[10] = FrameState::Failure;
        twice.states[50] = FrameState::Failure;
        assert_eq!(reset_metrics(&[clean, twice]).1, 1.0);
    }

    #[test]
    fn delta_formatting_matches_reference_values() {
        let d = Delta::new("success", 0.349, 0.561);
        assert_eq!(d.abs_text(), "+0.212");
        assert_eq!(d.pct_text(), "+60.74%");
        let d = Delta::new("precision", 0.905, 0.847);
        assert_eq!(d.abs_text(), "-0.058");
        assert_eq!(d.pct_text(), "-6.40%");
        let d = Delta::new("success", 0.5, 0.5);
        assert_eq!((d.abs_text(), d.pct_text()), ("+0.000".to_string(), "+0.00%".to_string()));
        assert_eq!(Delta::new("robustness", 2.0, 1.0).abs, 1.0);
    }

    #[test]
    fn compare_rejects_mismatches() {
        let a = RunMetrics::from_ope("a", "synthetic", &[result_with(vec![1.0], vec![0.0], vec![0.0])]);
        let mut b = a.clone();
        b.dataset = "otb".into();
        assert!(compare_runs(&a, &b).is_err());
        let deltas = compare_runs(&a, &a).unwrap();
        assert!(deltas.iter().all(|d| d.abs == 0.0));
        let mut c = a.clone();
        c.metrics.insert("extra".into(), 1.0);
        assert!(compare_runs(&a, &c).is_err());
        let table = render_table(&[a.clone()]).unwrap();
        assert!(table.lines().count() == 2);
    }

    #[test]
    fn timing_arithmetic() {
        let t = FrameTiming {
            tracker_ms: 1.0,
            defense_search_ms: 2.5,
            ..FrameTiming::default()
        };
        let r = TimingReport::from_timings(&[t, t]);
        assert_eq!(r.total_ms, 3.5);
        let base = TimingReport::from_timings(&[FrameTiming {
            tracker_ms: 9.35,
            ..FrameTiming::default()
        }]);
        let both = TimingReport::from_timings(&[FrameTiming {
            tracker_ms: 9.35,
            defense_template_ms: 0.0,
            defense_search_ms: 5.36,
            attack_ms: 0.0,
        }]);
        assert_eq!(format!("{:+.2}", both.delta_ms(&base)), "-5.36");
        assert_eq!(base.delta_ms(&base), 0.0);
        assert!(render_timing_table(&[("base".into(), base), ("both".into(), both)]).contains("-5.36"));
    }

    #[test]
    fn heatmap_peak_and_normalization() {
        let dev = candle_core::Device::Cpu;
        let mut fg = vec![-5.0f32; 2 * 9];
        fg[9 + 4] = 5.0; // anchor 1, center cell
        let bg = vec![0.0f32; 2 * 9];
        let cls = candle_core::Tensor::from_vec([bg, fg].concat(), (1, 4, 3, 3), &dev).unwrap();
        let reg = candle_core::Tensor::zeros((1, 8, 3, 3), DType::F32, &dev).unwrap();
        let (v, h, w) = fg_heatmap(&ScoreMaps { cls, reg }).unwrap();
        let argmax = v.iter().enumerate().max_by(|a, b| a.1.partial_cmp(b.1).unwrap()).unwrap().0;
        assert_eq!((argmax, h, w), (4, 3, 3));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.png");
        save_heatmap(&v, h, w, 2, &path).unwrap();
        let img = ::image::open(&path).unwrap().to_luma8();
        assert_eq!(img.pixels().map(|p| p.0[0]).max(), Some(255));
    }

    #[test]
    fn ope_hooks_and_dumps() {
        let model = TrackerModel::new(&TrackerConfig::micro(), 1, DType::F32).unwrap();
        let seqs = vec![gen_synthetic_sequence(&SynthConfig::micro(5), 2).unwrap()];
        let a = run_ope(&EvalSetup::clean(&model), &seqs, 1).unwrap();
        let b = run_ope(&EvalSetup::clean(&model), &seqs, 2).unwrap();
        assert_eq!(a[0].boxes, b[0].boxes);
        assert_eq!(a[0].len(), 5);
        let adaptive = AttackConfig {
            adaptive: true,
            ..AttackConfig::pgd(0.03, 1)
        };
        let bad = EvalSetup {
            attack: Some(&adaptive),
            ..EvalSetup::clean(&model)
        };
        assert!(run_ope(&bad, &seqs, 1).is_err());
        let dir = tempfile::tempdir().unwrap();
        let files = dump_score_maps(&model, &seqs[0], &[1, 3], &AttackConfig::pgd(0.03, 2), None, dir.path()).unwrap();
        assert_eq!(files.len(), 6);
        write_plots(dir.path(), &[("clean", &a)]).unwrap();
        assert!(dir.path().join("success.png").exists());
    }

    #[test]
    fn report_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![ReportRow {
            run: "r".into(),
            dataset: "d".into(),
            pattern: "none".into(),
            attack: "none".into(),
            adaptive: false,
            metric: "success".into(),
            value: 0.5,
        }];
        write_report(dir.path(), &rows).unwrap();
        assert_eq!(read_report(dir.path()).unwrap(), rows);
        let csv = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert!(csv.starts_with("run,dataset,pattern,attack,adaptive,metric,value"));
    }
}
