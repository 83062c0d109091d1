//! Synthetic sequences, OTB-layout loading/saving, and training pairs.

use std::fs;
use std::path::Path;

use candle_core::{DType, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{make_anchor_grid, BBox, LabelSet};
use crate::imaging::{context_side, crop_search, crop_template, Image, ImagePatch};
use crate::tracker::TrackerConfig;

/// Frames with one ground-truth box each.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub name: String,
    pub frames: Vec<Image>,
    pub gt: Vec<BBox>,
}

impl Sequence {
    pub fn new(name: impl Into<String>, frames: Vec<Image>, gt: Vec<BBox>) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::EmptySequence);
        }
        if frames.len() != gt.len() {
            return Err(Error::CountMismatch {
                frames: frames.len(),
                annotations: gt.len(),
            });
        }
        for (f, b) in frames.iter().zip(&gt) {
            if !b.is_valid() || !b.intersects(f.width() as f64, f.height() as f64) {
                return Err(Error::InvalidBox(format!("{b:?} does not lie in its frame")));
            }
        }
        Ok(Sequence {
            name: name.into(),
            frames,
            gt,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Synthetic sequence generator settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub frame_width: usize,
    pub frame_height: usize,
    pub frames: usize,
    /// Initial target side range in pixels.
    pub target_min: f64,
    pub target_max: f64,
    /// Largest per-frame displacement in pixels; 0 keeps the target still.
    pub max_speed: f64,
    /// Standard deviation of the per-frame velocity change.
    pub acceleration: f64,
    /// Standard deviation of the per-frame log-size change.
    pub size_drift: f64,
    /// Aspect ratio `h / w` range.
    pub aspect_min: f64,
    pub aspect_max: f64,
    pub distractors: usize,
    pub occluders: usize,
    /// Peak relative brightness change over the sequence.
    pub illumination: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            frame_width: 256,
            frame_height: 256,
            frames: 60,
            target_min: 32.0,
            target_max: 56.0,
            max_speed: 3.0,
            acceleration: 0.6,
            size_drift: 0.01,
            aspect_min: 0.6,
            aspect_max: 1.6,
            distractors: 1,
            occluders: 0,
            illumination: 0.1,
        }
    }
}

impl SynthConfig {
    /// Half-resolution variant matching the micro tracker preset.
    pub fn micro(frames: usize) -> Self {
        SynthConfig {
            frame_width: 128,
            frame_height: 128,
            frames,
            target_min: 16.0,
            target_max: 28.0,
            max_speed: 1.5,
            acceleration: 0.3,
            ..Self::default()
        }
    }

    /// `micro` (128×128 frames) or `full` (256×256).
    pub fn preset(name: &str, frames: usize) -> Result<Self> {
        match name {
            "micro" => Ok(Self::micro(frames)),
            "full" => Ok(SynthConfig { frames, ..Self::default() }),
            other => Err(Error::Config(format!("unknown synthetic data preset {other:?} (expected micro or full)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 {
            return Err(Error::Config("synthetic sequence needs at least one frame".into()));
        }
        let limit = self.frame_width.min(self.frame_height) as f64;
        let longest = self.target_max * self.aspect_max.max(1.0 / self.aspect_min).sqrt();
        if !(self.target_min > 0.0 && self.target_min <= self.target_max) || longest + 2.0 > limit {
            return Err(Error::Config(format!(
                "target sides {}..{} do not fit a {}x{} frame",
                self.target_min, self.target_max, self.frame_width, self.frame_height
            )));
        }
        if !(self.aspect_min > 0.0 && self.aspect_min <= self.aspect_max) {
            return Err(Error::Config("aspect range must be positive and ordered".into()));
        }
        if self.max_speed < 0.0 || self.acceleration < 0.0 || self.size_drift < 0.0 || self.illumination < 0.0 {
            return Err(Error::Config("motion and drift parameters must be non-negative".into()));
        }
        Ok(())
    }
}

/// Positions are kept on a 1/64 px grid so that OTB text round-trips exactly.
fn snap(v: f64) -> f64 {
    (v * 64.0).round() / 64.0
}

#[derive(Clone)]
struct Pattern {
    base: [f32; 3],
    alt: [f32; 3],
    cells: f64,
    border: [f32; 3],
}

impl Pattern {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        let mut color = || -> [f32; 3] { [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)] };
        let base = color();
        let alt = color();
        let border = color();
        Pattern {
            base,
            alt,
            cells: rng.gen_range(2.0..5.0f64).floor(),
            border,
        }
    }

    /// Color at relative position `(u, v)` in `[0, 1)²`.
    fn at(&self, u: f64, v: f64) -> [f32; 3] {
        if !(0.08..0.92).contains(&u) || !(0.08..0.92).contains(&v) {
            return self.border;
        }
        let even = ((u * self.cells).floor() + (v * self.cells).floor()) as i64 % 2 == 0;
        if even {
            self.base
        } else {
            self.alt
        }
    }
}

struct Mover {
    cx: f64,
    cy: f64,
    vx: f64,
    vy: f64,
    w: f64,
    h: f64,
}

impl Mover {
    fn new(rng: &mut ChaCha8Rng, cfg: &SynthConfig) -> Self {
        let side = rng.gen_range(cfg.target_min..=cfg.target_max);
        let aspect = rng.gen_range(cfg.aspect_min..=cfg.aspect_max);
        let w = side / aspect.sqrt();
        let h = side * aspect.sqrt();
        let (fw, fh) = (cfg.frame_width as f64, cfg.frame_height as f64);
        let cx = rng.gen_range(w / 2.0 + 1.0..=fw - w / 2.0 - 1.0);
        let cy = rng.gen_range(h / 2.0 + 1.0..=fh - h / 2.0 - 1.0);
        let angle = rng.gen_range(0.0..std::f64::consts::TAU);
        let speed = cfg.max_speed * rng.gen_range(0.3..1.0);
        Mover {
            cx,
            cy,
            vx: speed * angle.cos(),
            vy: speed * angle.sin(),
            w,
            h,
        }
    }

    fn step(&mut self, rng: &mut ChaCha8Rng, cfg: &SynthConfig) {
        if cfg.max_speed > 0.0 {
            let n = Normal::new(0.0, cfg.acceleration.max(1e-12)).expect("valid normal");
            self.vx += n.sample(rng);
            self.vy += n.sample(rng);
            let speed = self.vx.hypot(self.vy);
            if speed > cfg.max_speed {
                self.vx *= cfg.max_speed / speed;
                self.vy *= cfg.max_speed / speed;
            }
            self.cx += self.vx;
            self.cy += self.vy;
        }
        if cfg.size_drift > 0.0 {
            let n = Normal::new(0.0, cfg.size_drift).expect("valid normal");
            let f = n.sample(rng).exp();
            let side = (self.w * self.h).sqrt() * f;
            if (cfg.target_min..=cfg.target_max).contains(&side) {
                self.w *= f;
                self.h *= f;
            }
        }
        let (fw, fh) = (cfg.frame_width as f64, cfg.frame_height as f64);
        let (lo_x, hi_x) = (self.w / 2.0 + 1.0, fw - self.w / 2.0 - 1.0);
        let (lo_y, hi_y) = (self.h / 2.0 + 1.0, fh - self.h / 2.0 - 1.0);
        if self.cx < lo_x || self.cx > hi_x {
            self.vx = -self.vx;
            self.cx = self.cx.clamp(lo_x, hi_x);
        }
        if self.cy < lo_y || self.cy > hi_y {
            self.vy = -self.vy;
            self.cy = self.cy.clamp(lo_y, hi_y);
        }
    }

    fn bbox(&self) -> BBox {
        BBox {
            x: snap(self.cx - self.w / 2.0),
            y: snap(self.cy - self.h / 2.0),
            w: snap(self.w).max(1.0 / 64.0),
            h: snap(self.h).max(1.0 / 64.0),
        }
    }
}

struct Background {
    waves: Vec<(f64, f64, f64, [f64; 3])>,
    offset: [f64; 3],
}

impl Background {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        let waves = (0..4)
            .map(|_| {
                let angle = rng.gen_range(0.0..std::f64::consts::PI);
                let freq = rng.gen_range(0.02..0.25);
                let phase = rng.gen_range(0.0..std::f64::consts::TAU);
                let amp = [rng.gen_range(0.0..0.12), rng.gen_range(0.0..0.12), rng.gen_range(0.0..0.12)];
                (freq * angle.cos(), freq * angle.sin(), phase, amp)
            })
            .collect();
        let offset = [rng.gen_range(0.3..0.7), rng.gen_range(0.3..0.7), rng.gen_range(0.3..0.7)];
        Background { waves, offset }
    }

    fn render(&self, w: usize, h: usize, noise: &mut ChaCha8Rng) -> Vec<f64> {
        let mut out = Vec::with_capacity(w * h * 3);
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    let mut v = self.offset[c];
                    for (fx, fy, phase, amp) in &self.waves {
                        v += amp[c] * (fx * x as f64 + fy * y as f64 + phase).sin();
                    }
                    v += noise.gen_range(-0.03..0.03);
                    out.push(v);
                }
            }
        }
        out
    }
}

/// Alpha-composites a patterned rectangle with exact fractional coverage.
fn draw(canvas: &mut [f64], w: usize, h: usize, b: &BBox, pattern: &Pattern) {
    let x0 = b.x.floor().max(0.0) as usize;
    let y0 = b.y.floor().max(0.0) as usize;
    let x1 = (b.right().ceil() as usize).min(w);
    let y1 = (b.bottom().ceil() as usize).min(h);
    for py in y0..y1 {
        let cov_y = ((py + 1) as f64).min(b.bottom()) - (py as f64).max(b.y);
        if cov_y <= 0.0 {
            continue;
        }
        for px in x0..x1 {
            let cov_x = ((px + 1) as f64).min(b.right()) - (px as f64).max(b.x);
            if cov_x <= 0.0 {
                continue;
            }
            let alpha = cov_x * cov_y;
            let u = ((px as f64 + 0.5 - b.x) / b.w).clamp(0.0, 0.999);
            let v = ((py as f64 + 0.5 - b.y) / b.h).clamp(0.0, 0.999);
            let color = pattern.at(u, v);
            let o = (py * w + px) * 3;
            for c in 0..3 {
                canvas[o + c] = canvas[o + c] * (1.0 - alpha) + color[c] as f64 * alpha;
            }
        }
    }
}

/// Renders a textured target moving over a textured background.
pub fn gen_synthetic_sequence(cfg: &SynthConfig, seed: u64) -> Result<Sequence> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let background = Background::random(&mut rng);
    let target_pattern = Pattern::random(&mut rng);
    let mut target = Mover::new(&mut rng, cfg);
    let mut distractors: Vec<(Mover, Pattern)> = (0..cfg.distractors)
        .map(|_| (Mover::new(&mut rng, cfg), Pattern::random(&mut rng)))
        .collect();
    let mut occluders: Vec<(Mover, Pattern)> = (0..cfg.occluders)
        .map(|_| {
            let mut m = Mover::new(&mut rng, cfg);
            m.w *= 0.4;
            m.h *= 1.5;
            let p = Pattern::random(&mut rng);
            (m, Pattern { alt: p.base, border: p.base, ..p })
        })
        .collect();
    let light_phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let mut noise = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);

    let (w, h) = (cfg.frame_width, cfg.frame_height);
    let mut frames = Vec::with_capacity(cfg.frames);
    let mut gt = Vec::with_capacity(cfg.frames);
    for t in 0..cfg.frames {
        if t > 0 {
            target.step(&mut rng, cfg);
            for (m, _) in distractors.iter_mut().chain(occluders.iter_mut()) {
                m.step(&mut rng, cfg);
            }
        }
        let mut canvas = background.render(w, h, &mut noise);
        for (m, p) in &distractors {
            draw(&mut canvas, w, h, &m.bbox(), p);
        }
        let b = target.bbox();
        draw(&mut canvas, w, h, &b, &target_pattern);
        for (m, p) in &occluders {
            draw(&mut canvas, w, h, &m.bbox(), p);
        }
        let light = 1.0 + cfg.illumination * (light_phase + t as f64 * std::f64::consts::TAU / 50.0).sin();
        let data: Vec<f32> = canvas
            .iter()
            .map(|v| ((v * light).clamp(0.0, 1.0) * 255.0).round() as u8 as f32 / 255.0)
            .collect();
        frames.push(Image::new(h, w, data)?);
        gt.push(b);
    }
    Sequence::new(format!("synthetic-{seed}"), frames, gt)
}

/// A set of generated sequences with consecutive seeds.
pub fn gen_synthetic_set(cfg: &SynthConfig, count: usize, seed: u64) -> Result<Vec<Sequence>> {
    (0..count).map(|i| gen_synthetic_sequence(cfg, seed.wrapping_add(i as u64))).collect()
}

fn parse_annotation(line: &str) -> Option<BBox> {
    let fields: Vec<f64> = line
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .ok()?;
    if fields.len() != 4 {
        return None;
    }
    BBox::new(fields[0] - 1.0, fields[1] - 1.0, fields[2], fields[3]).ok()
}

fn is_image(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(),
        Some("png" | "jpg" | "jpeg")
    )
}

/// Reads `dir/img/*` frames (sorted by file name) and `dir/groundtruth_rect.txt`.
/// Annotations are 1-based `x,y,w,h` (comma or whitespace separated) and are
/// shifted to 0-based.
pub fn load_otb_sequence(dir: &Path) -> Result<Sequence> {
    let img_dir = dir.join("img");
    let mut paths: Vec<_> = fs::read_dir(&img_dir)
        .map_err(|e| Error::io(&img_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| is_image(p))
        .collect();
    paths.sort();
    let gt_path = dir.join("groundtruth_rect.txt");
    let text = fs::read_to_string(&gt_path).map_err(|e| Error::io(&gt_path, e))?;
    let mut gt = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        gt.push(parse_annotation(line).ok_or_else(|| Error::Annotation {
            path: gt_path.clone(),
            line: i + 1,
            text: line.to_string(),
        })?);
    }
    if gt.len() != paths.len() {
        return Err(Error::CountMismatch {
            frames: paths.len(),
            annotations: gt.len(),
        });
    }
    let frames = paths.iter().map(|p| Image::load(p)).collect::<Result<Vec<_>>>()?;
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "sequence".into());
    Sequence::new(name, frames, gt)
}

/// Writes the OTB layout with PNG frames; `generator` is echoed to `synth.json`.
pub fn save_otb_sequence(seq: &Sequence, dir: &Path, generator: Option<(&SynthConfig, u64)>) -> Result<()> {
    let img_dir = dir.join("img");
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    for (i, frame) in seq.frames.iter().enumerate() {
        frame.save_png(&img_dir.join(format!("{:04}.png", i + 1)))?;
    }
    let mut text = String::new();
    for b in &seq.gt {
        text.push_str(&format!("{},{},{},{}\n", b.x + 1.0, b.y + 1.0, b.w, b.h));
    }
    let gt_path = dir.join("groundtruth_rect.txt");
    fs::write(&gt_path, text).map_err(|e| Error::io(&gt_path, e))?;
    if let Some((cfg, seed)) = generator {
        let path = dir.join("synth.json");
        let json = serde_json::to_string_pretty(&serde_json::json!({ "seed": seed, "config": cfg }))?;
        fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// How training pairs are drawn from sequences.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PairConfig {
    /// Largest frame distance between template and search frames.
    pub max_gap: usize,
    /// Random offset of the search crop center, as a fraction of the context side.
    pub max_shift: f64,
    /// Random log-scale change of the search crop.
    pub scale_jitter: f64,
    /// Attempts per requested pair before giving up.
    pub retries: usize,
}

impl Default for PairConfig {
    fn default() -> Self {
        PairConfig {
            max_gap: 30,
            max_shift: 0.0,
            scale_jitter: 0.0,
            retries: 20,
        }
    }
}

/// Clean template/search crops with labels for the search patch's anchors.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub template: ImagePatch,
    pub search: ImagePatch,
    pub labels: LabelSet,
    /// Ground truth in search-patch coordinates.
    pub target: BBox,
}

/// Template frame `i`, search frame `j` with `|i − j| ≤ max_gap`; the search crop
/// is centered on frame `i`'s box (plus jitter). Pairs without a positive
/// anchor are redrawn.
pub fn sample_training_pairs(
    sequences: &[Sequence],
    tracker: &TrackerConfig,
    cfg: &PairConfig,
    count: usize,
    seed: u64,
) -> Result<Vec<TrainingPair>> {
    let usable: Vec<&Sequence> = sequences.iter().filter(|s| s.len() >= 2).collect();
    if usable.is_empty() {
        return Err(Error::Config("pair sampling needs a sequence with at least two frames".into()));
    }
    let grid = make_anchor_grid(&tracker.anchor_config())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let budget = count.saturating_mul(cfg.retries.max(1)).max(1);
    let mut pairs = Vec::with_capacity(count);
    let mut attempts = 0;
    while pairs.len() < count {
        if attempts >= budget {
            return Err(Error::NoValidPairs(attempts));
        }
        attempts += 1;
        let seq = usable[rng.gen_range(0..usable.len())];
        let i = rng.gen_range(0..seq.len());
        let lo = i.saturating_sub(cfg.max_gap);
        let hi = (i + cfg.max_gap).min(seq.len() - 1);
        let j = rng.gen_range(lo..=hi);
        let (template, _) = crop_template(&seq.frames[i], &seq.gt[i], tracker.template_size)?;

        let anchor_box = seq.gt[i];
        let side = context_side(&anchor_box);
        let (dx, dy, ds) = (
            if cfg.max_shift > 0.0 { rng.gen_range(-cfg.max_shift..cfg.max_shift) * side } else { 0.0 },
            if cfg.max_shift > 0.0 { rng.gen_range(-cfg.max_shift..cfg.max_shift) * side } else { 0.0 },
            if cfg.scale_jitter > 0.0 { rng.gen_range(-cfg.scale_jitter..cfg.scale_jitter).exp() } else { 1.0 },
        );
        let crop_box = BBox::from_center(
            anchor_box.cx() + dx,
            anchor_box.cy() + dy,
            anchor_box.w * ds,
            anchor_box.h * ds,
        );
        let (search, mapping) = crop_search(&seq.frames[j], &crop_box, tracker.template_size, tracker.search_size)?;
        let target = mapping.box_to_patch(&seq.gt[j]);
        let labels = LabelSet::from_gt(&grid, &target, tracker.pos_threshold, tracker.neg_threshold);
        if labels.num_positive() == 0 {
            continue;
        }
        pairs.push(TrainingPair {
            template,
            search,
            labels,
            target,
        });
    }
    Ok(pairs)
}

/// Stacked tensors for a batch of pairs.
#[derive(Debug, Clone)]
pub struct PairBatch {
    pub templates: Tensor,
    pub searches: Tensor,
    pub labels: Vec<LabelSet>,
}

impl PairBatch {
    pub fn from_pairs(pairs: &[TrainingPair], dtype: DType) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Config("empty batch".into()));
        }
        let z = pairs.iter().map(|p| p.template.to_tensor(dtype)).collect::<Result<Vec<_>>>()?;
        let x = pairs.iter().map(|p| p.search.to_tensor(dtype)).collect::<Result<Vec<_>>>()?;
        Ok(PairBatch {
            templates: Tensor::cat(&z, 0)?,
            searches: Tensor::cat(&x, 0)?,
            labels: pairs.iter().map(|p| p.labels.clone()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_velocity_keeps_gt_constant() {
        let cfg = SynthConfig {
            max_speed: 0.0,
            size_drift: 0.0,
            ..SynthConfig::micro(10)
        };
        let seq = gen_synthetic_sequence(&cfg, 4).unwrap();
        assert!(seq.gt.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn generator_is_deterministic() {
        let cfg = SynthConfig::micro(6);
        let a = gen_synthetic_sequence(&cfg, 9).unwrap();
        let b = gen_synthetic_sequence(&cfg, 9).unwrap();
        assert_eq!(a, b);
        let c = gen_synthetic_sequence(&cfg, 10).unwrap();
        assert_ne!(a.frames[0], c.frames[0]);
    }

    #[test]
    fn default_targets_stay_inside() {
        let cfg = SynthConfig::default();
        for seed in 0..3 {
            let seq = gen_synthetic_sequence(&cfg, seed).unwrap();
            assert_eq!(seq.len(), 60);
            for b in &seq.gt {
                assert!(b.x >= 0.0 && b.y >= 0.0 && b.right() <= 256.0 && b.bottom() <= 256.0, "{b:?}");
            }
        }
    }

    #[test]
    fn oversized_target_is_rejected() {
        let cfg = SynthConfig {
            target_min: 100.0,
            target_max: 200.0,
            ..SynthConfig::micro(2)
        };
        assert!(gen_synthetic_sequence(&cfg, 0).is_err());
    }

    #[test]
    fn annotation_parsing() {
        assert_eq!(parse_annotation("100,120,50,60"), Some(BBox { x: 99.0, y: 119.0, w: 50.0, h: 60.0 }));
        assert_eq!(parse_annotation("100\t120\t50\t60"), parse_annotation("100,120,50,60"));
        assert_eq!(parse_annotation("1,2,3"), None);
        assert_eq!(parse_annotation("a,2,3,4"), None);
    }

    #[test]
    fn otb_count_mismatch_and_bad_lines() {
        let dir = tempfile::tempdir().unwrap();
        let seq = gen_synthetic_sequence(&SynthConfig::micro(3), 1).unwrap();
        save_otb_sequence(&seq, dir.path(), None).unwrap();
        let gt_path = dir.path().join("groundtruth_rect.txt");
        let text = fs::read_to_string(&gt_path).unwrap();
        let two: Vec<&str> = text.lines().take(2).collect();
        fs::write(&gt_path, two.join("\n")).unwrap();
        assert!(matches!(
            load_otb_sequence(dir.path()),
            Err(Error::CountMismatch { frames: 3, annotations: 2 })
        ));
        fs::write(&gt_path, "1,1,5,5\n1,1,5,5\nx,1,5,5\n").unwrap();
        match load_otb_sequence(dir.path()) {
            Err(Error::Annotation { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected annotation error, got {other:?}"),
        }
    }

    #[test]
    fn otb_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig::micro(4);
        let seq = gen_synthetic_sequence(&cfg, 2).unwrap();
        save_otb_sequence(&seq, dir.path(), Some((&cfg, 2))).unwrap();
        let back = load_otb_sequence(dir.path()).unwrap();
        assert_eq!(back.gt, seq.gt);
        assert_eq!(back.frames, seq.frames);
        assert!(dir.path().join("synth.json").exists());
    }

    #[test]
    fn pairs_without_gap_are_centered() {
        let tracker = TrackerConfig::micro();
        let seqs = gen_synthetic_set(&SynthConfig::micro(12), 2, 0).unwrap();
        let cfg = PairConfig {
            max_gap: 0,
            ..PairConfig::default()
        };
        let pairs = sample_training_pairs(&seqs, &tracker, &cfg, 8, 5).unwrap();
        for p in &pairs {
            assert!((p.target.cx() - 32.0).abs() < 1e-9 && (p.target.cy() - 32.0).abs() < 1e-9);
            assert!(p.labels.num_positive() >= 1);
            assert!(p.search.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn pairs_are_seeded_and_labeled() {
        let tracker = TrackerConfig::micro();
        let seqs = gen_synthetic_set(&SynthConfig::micro(20), 3, 7).unwrap();
        let cfg = PairConfig {
            max_shift: 0.3,
            scale_jitter: 0.1,
            ..PairConfig::default()
        };
        let a = sample_training_pairs(&seqs, &tracker, &cfg, 10, 1).unwrap();
        let b = sample_training_pairs(&seqs, &tracker, &cfg, 10, 1).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|p| p.labels.num_positive() >= 1));
        let single = vec![Sequence::new("one", vec![seqs[0].frames[0].clone()], vec![seqs[0].gt[0]]).unwrap()];
        assert!(sample_training_pairs(&single, &tracker, &cfg, 1, 0).is_err());
    }
}
