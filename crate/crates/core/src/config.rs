//! Experiment configuration file (TOML). Unknown keys are rejected and every
//! section is validated before any work starts.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::advtrain::TrainConfig;
use crate::attacks::AttackConfig;
use crate::data::SynthConfig;
use crate::defense::{DefenseConfig, Variant};
use crate::error::{Error, Result};
use crate::evaluation::ResetConfig;
use crate::tracker::{TrackerConfig, TrackerTrainConfig};

/// Environment variable that replaces the configured output root.
pub const OUT_ENV: &str = "DUALOSSDEF_OUT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackerSection {
    pub preset: String,
    pub widths: Option<Vec<usize>>,
    pub head_width: Option<usize>,
    pub window_influence: Option<f64>,
    pub size_damping: Option<f64>,
    /// Existing checkpoint; defaults to `<output>/tracker.ckpt`.
    pub checkpoint: Option<PathBuf>,
}

impl Default for TrackerSection {
    fn default() -> Self {
        TrackerSection {
            preset: "micro".into(),
            widths: None,
            head_width: None,
            window_influence: None,
            size_damping: None,
            checkpoint: None,
        }
    }
}

impl TrackerSection {
    pub fn resolve(&self) -> Result<TrackerConfig> {
        let mut cfg = TrackerConfig::preset(&self.preset)?;
        if let Some(w) = &self.widths {
            cfg.widths = w.clone();
        }
        if let Some(h) = self.head_width {
            cfg.head_width = h;
        }
        if let Some(v) = self.window_influence {
            cfg.window_influence = v;
        }
        if let Some(v) = self.size_damping {
            cfg.size_damping = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DefenseSection {
    pub preset: String,
    pub depth: Option<usize>,
    pub base_width: Option<usize>,
    pub residual_scale: Option<f64>,
    pub residual_bound: Option<f64>,
    /// Existing checkpoints; default to `<output>/defense-<branch>.ckpt`.
    pub template_checkpoint: Option<PathBuf>,
    pub search_checkpoint: Option<PathBuf>,
}

impl Default for DefenseSection {
    fn default() -> Self {
        DefenseSection {
            preset: "micro".into(),
            depth: None,
            base_width: None,
            residual_scale: None,
            residual_bound: None,
            template_checkpoint: None,
            search_checkpoint: None,
        }
    }
}

impl DefenseSection {
    pub fn resolve(&self, input_size: usize) -> Result<DefenseConfig> {
        let mut cfg = DefenseConfig::preset(&self.preset, input_size)?;
        if let Some(d) = self.depth {
            cfg.depth = d;
        }
        if let Some(w) = self.base_width {
            cfg.base_width = w;
        }
        if let Some(v) = self.residual_scale {
            cfg.residual_scale = v;
        }
        if let Some(v) = self.residual_bound {
            cfg.residual_bound = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Synthetic generator preset and sequence length.
    pub preset: String,
    pub frames: usize,
    /// Full generator settings; replaces `preset` and `frames` when present.
    pub synth: Option<SynthConfig>,
    pub train_sequences: usize,
    pub eval_sequences: usize,
    /// Seeds of the first generated training / evaluation sequence.
    pub train_seed: u64,
    pub eval_seed: u64,
    /// OTB-layout directories evaluated instead of generated sequences.
    pub otb: Vec<PathBuf>,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            preset: "micro".into(),
            frames: 40,
            synth: None,
            train_sequences: 24,
            eval_sequences: 8,
            train_seed: 1000,
            eval_seed: 5000,
            otb: Vec::new(),
        }
    }
}

impl DataSection {
    pub fn synth_config(&self) -> Result<SynthConfig> {
        match &self.synth {
            Some(s) => Ok(s.clone()),
            None => SynthConfig::preset(&self.preset, self.frames),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub tracker: TrackerTrainConfig,
    pub defense: TrainConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    Ope,
    Reset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationSection {
    pub protocols: Vec<Protocol>,
    pub reset: ResetConfig,
    pub plots: bool,
    pub jobs: usize,
    /// Frames whose score maps are dumped (none by default).
    pub dump_frames: Vec<usize>,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        EvaluationSection {
            protocols: vec![Protocol::Ope],
            reset: ResetConfig::default(),
            plots: false,
            jobs: 1,
            dump_frames: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub tracker: TrackerSection,
    pub defense: DefenseSection,
    pub attack: AttackConfig,
    pub data: DataSection,
    pub training: TrainingSection,
    pub evaluation: EvaluationSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            tracker: TrackerSection::default(),
            defense: DefenseSection::default(),
            attack: AttackConfig::default(),
            data: DataSection::default(),
            training: TrainingSection::default(),
            evaluation: EvaluationSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Replaces the output root when the environment variable is set.
    pub fn apply_env(&mut self) {
        if let Some(v) = std::env::var_os(OUT_ENV).filter(|v| !v.is_empty()) {
            self.output_dir = PathBuf::from(v);
        }
    }

    /// Checks every section against its module's invariants.
    pub fn validate(&self) -> Result<()> {
        let tracker = self.tracker.resolve()?;
        self.defense.resolve(tracker.template_size)?;
        self.defense.resolve(tracker.search_size)?;
        self.attack.validate()?;
        self.data.synth_config()?.validate()?;
        if self.data.otb.is_empty() && self.data.eval_sequences == 0 {
            return Err(Error::Config("no evaluation data (eval_sequences = 0 and no otb directories)".into()));
        }
        if self.data.train_sequences == 0 {
            return Err(Error::Config("train_sequences must be positive".into()));
        }
        self.training.defense.validate()?;
        let t = &self.training.tracker;
        if t.epochs == 0 || t.batch_size == 0 || t.pairs_per_epoch == 0 || !(t.learning_rate > 0.0) {
            return Err(Error::Config("tracker training needs positive epochs, batch size, pairs and rate".into()));
        }
        t.loss.validate()?;
        if self.evaluation.protocols.is_empty() {
            return Err(Error::Config("at least one evaluation protocol is required".into()));
        }
        Ok(())
    }

    pub fn tracker_checkpoint(&self) -> PathBuf {
        self.tracker
            .checkpoint
            .clone()
            .unwrap_or_else(|| self.output_dir.join("tracker.ckpt"))
    }

    pub fn defense_checkpoint(&self, v: Variant) -> PathBuf {
        let configured = match v {
            Variant::Template => &self.defense.template_checkpoint,
            Variant::Search => &self.defense.search_checkpoint,
        };
        configured
            .clone()
            .unwrap_or_else(|| self.output_dir.join(format!("defense-{}.ckpt", v.name())))
    }
}
