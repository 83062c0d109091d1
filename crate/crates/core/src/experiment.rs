//! End-to-end pipeline driven by an [`ExperimentConfig`]: tracker training,
//! defense training, evaluation grids and report merging. The command-line
//! tool is a thin layer over these functions.

use std::fs;
use std::path::{Path, PathBuf};

use candle_core::DType;
use serde::{Deserialize, Serialize};

use crate::advtrain::{load_defense_checkpoint, save_defense_checkpoint, train_defense, TrainConfig, TrainLog};
use crate::attacks::{AttackConfig, AttackKind};
use crate::checkpoint::{load_tracker, save_tracker};
use crate::config::{ExperimentConfig, Protocol};
use crate::data::{gen_synthetic_set, load_otb_sequence, Sequence};
use crate::defense::{build_defense_net, DefenseNet, DefenseSet, DeploymentPattern, Variant};
use crate::error::{Error, Result};
use crate::evaluation::{
    compare_runs, dump_score_maps, render_table, render_timing_table, run_ope, run_reset_protocol, timing_report,
    write_plots, write_report, Delta, EvalSetup, ReportRow, RunMetrics, SequenceResult, TimingReport,
};
use crate::nn::derive_seed;
use crate::tracker::{train_baseline_tracker, TrackerLogRow, TrackerModel};

/// Seed streams mixed with the experiment seed.
const TRACKER_STREAM: u64 = 1;
const DEFENSE_STREAM: u64 = 2;
const ATTACK_STREAM: u64 = 3;

/// Training sequences are generated from the config; evaluation uses the OTB
/// directories when any are listed, generated sequences otherwise.
pub fn train_data(cfg: &ExperimentConfig) -> Result<Vec<Sequence>> {
    gen_synthetic_set(&cfg.data.synth_config()?, cfg.data.train_sequences, cfg.data.train_seed)
}

pub fn eval_data(cfg: &ExperimentConfig) -> Result<(String, Vec<Sequence>)> {
    if cfg.data.otb.is_empty() {
        let seqs = gen_synthetic_set(&cfg.data.synth_config()?, cfg.data.eval_sequences, cfg.data.eval_seed)?;
        return Ok(("synthetic".into(), seqs));
    }
    let seqs = cfg.data.otb.iter().map(|d| load_otb_sequence(d)).collect::<Result<Vec<_>>>()?;
    Ok(("otb".into(), seqs))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Config(format!("{what} {} does not exist", path.display())))
    }
}

/// Tracker trained from scratch and written to its checkpoint path.
pub struct TrackerRun {
    pub checkpoint: PathBuf,
    pub log: Vec<TrackerLogRow>,
    pub model: TrackerModel,
}

pub fn cmd_train_tracker(cfg: &ExperimentConfig) -> Result<TrackerRun> {
    cfg.validate()?;
    let tcfg = cfg.tracker.resolve()?;
    let mut train = cfg.training.tracker.clone();
    train.seed = derive_seed(derive_seed(cfg.seed, TRACKER_STREAM), train.seed);
    let data = train_data(cfg)?;
    let (model, log) = train_baseline_tracker(&tcfg, &train, &data)?;
    create_dir(&cfg.output_dir)?;
    let checkpoint = cfg.tracker_checkpoint();
    if let Some(parent) = checkpoint.parent() {
        create_dir(parent)?;
    }
    save_tracker(&model, &checkpoint)?;
    let log_path = cfg.output_dir.join("tracker_log.csv");
    let mut w = csv::Writer::from_path(&log_path)?;
    for row in &log {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(&log_path, e))?;
    Ok(TrackerRun { checkpoint, log, model })
}

pub fn load_tracker_for(cfg: &ExperimentConfig) -> Result<TrackerModel> {
    let path = cfg.tracker_checkpoint();
    require_file(&path, "tracker checkpoint")?;
    let model = load_tracker(&path, DType::F32)?;
    let expected = cfg.tracker.resolve()?;
    if model.config() != &expected {
        return Err(Error::Config(format!(
            "tracker checkpoint {} was trained with a different tracker configuration",
            path.display()
        )));
    }
    Ok(model)
}

/// Effective defense training settings for `branch`.
pub fn defense_train_config(cfg: &ExperimentConfig, branch: Variant) -> TrainConfig {
    let mut train = cfg.training.defense.clone();
    train.branch = branch;
    train.seed = derive_seed(derive_seed(cfg.seed, DEFENSE_STREAM), train.seed);
    train
}

pub struct DefenseRun {
    pub checkpoint: PathBuf,
    pub log: TrainLog,
    pub net: DefenseNet,
}

/// Trains the defense for one branch against `tracker`, which must match the
/// configured tracker. The tracker checkpoint is only read.
pub fn train_defense_with(cfg: &ExperimentConfig, tracker: &TrackerModel, branch: Variant) -> Result<DefenseRun> {
    cfg.validate()?;
    let tcfg = tracker.config();
    let size = match branch {
        Variant::Template => tcfg.template_size,
        Variant::Search => tcfg.search_size,
    };
    let dcfg = cfg.defense.resolve(size)?;
    let train = defense_train_config(cfg, branch);
    let net = build_defense_net(branch, &dcfg, derive_seed(train.seed, 7), DType::F32)?;
    let data = train_data(cfg)?;
    let log = train_defense(tracker, &net, &data, &train)?;
    create_dir(&cfg.output_dir)?;
    let checkpoint = cfg.defense_checkpoint(branch);
    if let Some(parent) = checkpoint.parent() {
        create_dir(parent)?;
    }
    save_defense_checkpoint(&net, Some(&train), &checkpoint)?;
    let log_path = cfg.output_dir.join(format!("defense-{}_log.csv", branch.name()));
    if log_path.exists() {
        fs::remove_file(&log_path).map_err(|e| Error::io(&log_path, e))?;
    }
    log.append_csv(&log_path)?;
    log.write_report(&cfg.output_dir.join(format!("defense-{}_report.json", branch.name())))?;
    Ok(DefenseRun {
        checkpoint,
        log,
        net: net.frozen()?,
    })
}

pub fn cmd_train_defense(cfg: &ExperimentConfig, branch: Variant) -> Result<DefenseRun> {
    cfg.validate()?;
    let tracker = load_tracker_for(cfg)?;
    train_defense_with(cfg, &tracker, branch)
}

/// Defense networks loaded from checkpoints.
#[derive(Default)]
pub struct LoadedDefenses {
    pub template: Option<DefenseNet>,
    pub search: Option<DefenseNet>,
}

impl LoadedDefenses {
    pub fn set(&self) -> DefenseSet<'_> {
        DefenseSet {
            template: self.template.as_ref(),
            search: self.search.as_ref(),
        }
    }
}

/// Loads every network the given patterns need.
pub fn load_defenses(cfg: &ExperimentConfig, patterns: &[DeploymentPattern]) -> Result<LoadedDefenses> {
    let mut out = LoadedDefenses::default();
    for v in [Variant::Template, Variant::Search] {
        if patterns.iter().any(|p| p.uses(v)) {
            let path = cfg.defense_checkpoint(v);
            require_file(&path, &format!("{v} defense checkpoint"))?;
            let (net, _) = load_defense_checkpoint(&path, v, DType::F32)?;
            match v {
                Variant::Template => out.template = Some(net),
                Variant::Search => out.search = Some(net),
            }
        }
    }
    Ok(out)
}

/// One cell of an evaluation grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridCell {
    pub pattern: Option<DeploymentPattern>,
    pub attack: Option<AttackKind>,
    pub adaptive: bool,
}

impl GridCell {
    pub fn pattern_name(&self) -> &'static str {
        self.pattern.map_or("none", |p| p.name())
    }

    pub fn attack_name(&self) -> String {
        self.attack.map_or_else(|| "none".to_string(), |a| a.to_string())
    }

    pub fn run_name(&self) -> String {
        let mut name = format!("{}/{}", self.pattern_name(), self.attack_name());
        if self.adaptive {
            name.push_str("+adaptive");
        }
        name
    }
}

/// Cartesian product of patterns and attacks. Adaptive attacks need a
/// deployed defense; clean cells ignore the flag.
pub fn grid(patterns: &[Option<DeploymentPattern>], attacks: &[Option<AttackKind>], adaptive: bool) -> Result<Vec<GridCell>> {
    if patterns.is_empty() || attacks.is_empty() {
        return Err(Error::Config("evaluation grid needs at least one pattern and one attack".into()));
    }
    let mut cells = Vec::new();
    for &pattern in patterns {
        for &attack in attacks {
            let adaptive = adaptive && attack.is_some();
            if adaptive && pattern.is_none() {
                return Err(Error::Config("an adaptive attack needs a defense pattern".into()));
            }
            cells.push(GridCell { pattern, attack, adaptive });
        }
    }
    Ok(cells)
}

/// Outcome of one grid cell.
pub struct CellResult {
    pub cell: GridCell,
    pub metrics: RunMetrics,
    pub timing: TimingReport,
    pub ope: Vec<SequenceResult>,
}

/// Effective attack settings for a cell (seed mixed with the experiment seed).
pub fn attack_config(cfg: &ExperimentConfig, kind: AttackKind, adaptive: bool) -> AttackConfig {
    AttackConfig {
        kind,
        adaptive,
        seed: derive_seed(derive_seed(cfg.seed, ATTACK_STREAM), cfg.attack.seed),
        ..cfg.attack.clone()
    }
}

/// Evaluates every cell on `seqs` with already-loaded networks.
pub fn evaluate_cells(
    cfg: &ExperimentConfig,
    tracker: &TrackerModel,
    nets: &DefenseSet<'_>,
    dataset: &str,
    seqs: &[Sequence],
    cells: &[GridCell],
) -> Result<Vec<CellResult>> {
    let jobs = cfg.evaluation.jobs.max(1);
    let mut out = Vec::new();
    for &cell in cells {
        let attack = cell.attack.map(|k| attack_config(cfg, k, cell.adaptive));
        let setup = EvalSetup {
            model: tracker,
            defense: cell.pattern.map(|p| (p, nets)),
            attack: attack.as_ref(),
        };
        log::info!("evaluating {}", cell.run_name());
        let ope = run_ope(&setup, seqs, jobs)?;
        let mut metrics = RunMetrics::from_ope(&cell.run_name(), dataset, &ope);
        if !cfg.evaluation.protocols.contains(&Protocol::Ope) {
            metrics.metrics.clear();
        }
        if cfg.evaluation.protocols.contains(&Protocol::Reset) {
            let summary = run_reset_protocol(&setup, seqs, &cfg.evaluation.reset, jobs)?;
            metrics = metrics.with_reset(&summary);
        }
        out.push(CellResult {
            cell,
            metrics,
            timing: timing_report(&ope),
            ope,
        });
    }
    Ok(out)
}

/// Report rows, one per (pattern, attack, metric).
pub fn report_rows(results: &[CellResult]) -> Vec<ReportRow> {
    let mut rows = Vec::new();
    for r in results {
        for (metric, value) in &r.metrics.metrics {
            rows.push(ReportRow {
                run: r.metrics.run.clone(),
                dataset: r.metrics.dataset.clone(),
                pattern: r.cell.pattern_name().into(),
                attack: r.cell.attack_name(),
                adaptive: r.cell.adaptive,
                metric: metric.clone(),
                value: *value,
            });
        }
    }
    rows
}

const RUNS_FILE: &str = "runs.json";
const TIMING_FILE: &str = "timing.json";

/// Writes the report files of an evaluation. `metrics.csv`, `metrics.json` and
/// `runs.json` depend only on config and seed; wall-clock numbers go to
/// `timing.json`.
pub fn write_eval_outputs(dir: &Path, results: &[CellResult], plots: bool) -> Result<()> {
    write_report(dir, &report_rows(results))?;
    let runs: Vec<&RunMetrics> = results.iter().map(|r| &r.metrics).collect();
    let path = dir.join(RUNS_FILE);
    fs::write(&path, serde_json::to_string_pretty(&runs)? + "\n").map_err(|e| Error::io(&path, e))?;
    let timings: Vec<(String, TimingReport)> = results.iter().map(|r| (r.metrics.run.clone(), r.timing)).collect();
    let path = dir.join(TIMING_FILE);
    fs::write(&path, serde_json::to_string_pretty(&timings)? + "\n").map_err(|e| Error::io(&path, e))?;
    if plots {
        let named: Vec<(String, &[SequenceResult])> =
            results.iter().map(|r| (r.metrics.run.clone(), r.ope.as_slice())).collect();
        let refs: Vec<(&str, &[SequenceResult])> = named.iter().map(|(n, r)| (n.as_str(), *r)).collect();
        write_plots(dir, &refs)?;
    }
    Ok(())
}

/// Directory name for an evaluation grid.
pub fn eval_dir_name(cells: &[GridCell]) -> String {
    let mut name = cells
        .iter()
        .map(|c| c.run_name().replace('/', "-"))
        .collect::<Vec<_>>()
        .join("_");
    if name.len() > 120 {
        name = format!("grid-{}", cells.len());
    }
    name
}

pub struct EvalRun {
    pub dir: PathBuf,
    pub results: Vec<CellResult>,
    pub table: String,
}

/// Loads checkpoints, evaluates the grid and writes its reports under
/// `<output>/eval/<grid name>`.
pub fn cmd_eval(cfg: &ExperimentConfig, cells: &[GridCell]) -> Result<EvalRun> {
    cfg.validate()?;
    if cells.is_empty() {
        return Err(Error::Config("empty evaluation grid".into()));
    }
    let tracker = load_tracker_for(cfg)?;
    let patterns: Vec<DeploymentPattern> = cells.iter().filter_map(|c| c.pattern).collect();
    let nets = load_defenses(cfg, &patterns)?;
    let set = nets.set();
    let (dataset, seqs) = eval_data(cfg)?;
    let results = evaluate_cells(cfg, &tracker, &set, &dataset, &seqs, cells)?;
    let dir = cfg.output_dir.join("eval").join(eval_dir_name(cells));
    create_dir(&dir)?;
    write_eval_outputs(&dir, &results, cfg.evaluation.plots)?;
    if !cfg.evaluation.dump_frames.is_empty() {
        let attack = attack_config(cfg, AttackKind::Pgd, false);
        let attack = match cells.iter().find_map(|c| c.attack) {
            Some(kind) if kind != AttackKind::IouBlackbox => AttackConfig { kind, ..attack },
            _ => attack,
        };
        let pattern = patterns.first().copied();
        dump_score_maps(
            &tracker,
            &seqs[0],
            &cfg.evaluation.dump_frames,
            &attack,
            pattern.map(|p| (p, &set)),
            &dir.join("score_maps"),
        )?;
    }
    let runs: Vec<RunMetrics> = results.iter().map(|r| r.metrics.clone()).collect();
    let mut table = render_table(&runs)?;
    let timings: Vec<(String, TimingReport)> = results.iter().map(|r| (r.metrics.run.clone(), r.timing)).collect();
    table.push('\n');
    table.push_str(&render_timing_table(&timings));
    Ok(EvalRun { dir, results, table })
}

/// Merged view of several evaluation directories.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MergedReport {
    pub runs: Vec<RunMetrics>,
    /// Change of every run against the first one.
    pub deltas: Vec<(String, Vec<Delta>)>,
    pub timing: Vec<(String, TimingReport)>,
}

pub fn read_eval_dir(dir: &Path) -> Result<(Vec<RunMetrics>, Vec<(String, TimingReport)>)> {
    let path = dir.join(RUNS_FILE);
    let text = fs::read_to_string(&path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::Config(format!("{} is not an evaluation directory", dir.display())),
        _ => Error::io(&path, e),
    })?;
    let runs: Vec<RunMetrics> = serde_json::from_str(&text)?;
    let path = dir.join(TIMING_FILE);
    let timing = match fs::read_to_string(&path) {
        Ok(t) => serde_json::from_str(&t)?,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
        Err(e) => return Err(Error::io(&path, e)),
    };
    Ok((runs, timing))
}

/// Merges runs (first run is the baseline), checks that they compare the same
/// metrics on the same dataset, and renders the comparison tables.
pub fn merge_runs(runs: Vec<RunMetrics>, timing: Vec<(String, TimingReport)>) -> Result<(MergedReport, String)> {
    let base = runs.first().ok_or_else(|| Error::Config("no runs to report".into()))?;
    let mut deltas = Vec::new();
    for r in &runs[1..] {
        deltas.push((r.run.clone(), compare_runs(base, r)?));
    }
    let mut text = render_table(&runs)?;
    if !timing.is_empty() {
        text.push('\n');
        text.push_str(&render_timing_table(&timing));
    }
    Ok((MergedReport { runs, deltas, timing }, text))
}

/// Merges evaluation directories and writes `report.csv` / `report.json` into
/// `out`.
pub fn cmd_report(dirs: &[PathBuf], out: &Path) -> Result<(MergedReport, String)> {
    if dirs.is_empty() {
        return Err(Error::Config("report needs at least one run directory".into()));
    }
    let mut runs = Vec::new();
    let mut timing = Vec::new();
    for d in dirs {
        let (r, t) = read_eval_dir(d)?;
        runs.extend(r);
        timing.extend(t);
    }
    let (merged, text) = merge_runs(runs, timing)?;
    create_dir(out)?;
    let mut w = csv::Writer::from_path(out.join("report.csv"))?;
    w.write_record(["run", "dataset", "metric", "value", "delta", "delta_pct"])?;
    let base = &merged.runs[0];
    for (i, r) in merged.runs.iter().enumerate() {
        for (metric, value) in &r.metrics {
            let (d, p) = if i == 0 {
                (String::new(), String::new())
            } else {
                let d = Delta::new(metric, base.metrics[metric], *value);
                (d.abs_text(), d.pct_text())
            };
            w.write_record([r.run.as_str(), r.dataset.as_str(), metric, &value.to_string(), &d, &p])?;
        }
    }
    w.flush().map_err(|e| Error::io(out, e))?;
    let path = out.join("report.json");
    fs::write(&path, serde_json::to_string_pretty(&merged)? + "\n").map_err(|e| Error::io(&path, e))?;
    Ok((merged, text))
}
