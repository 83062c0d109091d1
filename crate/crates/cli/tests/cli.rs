use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

/// Smallest configuration that exercises every stage in a few seconds.
const TINY: &str = r#"
seed = 1

[data]
train_sequences = 2
eval_sequences = 1
frames = 6

[training.tracker]
epochs = 1
pairs_per_epoch = 4
batch_size = 2

[training.defense]
epochs = 1
pairs_per_epoch = 4
batch_size = 2

[attack]
steps = 1
"#;

fn advdef(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_advdef"))
        .args(args)
        .env_remove("DUALOSSDEF_OUT")
        .output()
        .expect("spawn advdef")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn sha(path: &Path) -> Vec<u8> {
    Sha256::digest(fs::read(path).unwrap()).to_vec()
}

struct Setup {
    _tmp: tempfile::TempDir,
    config: PathBuf,
    out: PathBuf,
}

impl Setup {
    fn new() -> Self {
        let tmp = tempfile::tempdir().unwrap();
        let config = tmp.path().join("exp.toml");
        let out = tmp.path().join("out");
        fs::write(&config, TINY).unwrap();
        Setup { _tmp: tmp, config, out }
    }

    fn run(&self, cmd: &str, extra: &[&str]) -> Output {
        let mut args = vec![cmd, "--config", self.config.to_str().unwrap(), "--output", self.out.to_str().unwrap()];
        args.extend_from_slice(extra);
        advdef(&args)
    }

    fn trained(self) -> Self {
        let o = self.run("train-tracker", &[]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        self
    }
}

#[test]
fn missing_config_exits_2_naming_the_path() {
    let o = advdef(&["train-tracker", "--config", "/nonexistent/exp.toml"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("/nonexistent/exp.toml"), "{}", stderr(&o));
}

#[test]
fn unknown_config_key_exits_2() {
    let s = Setup::new();
    fs::write(&s.config, format!("{TINY}\n[evaluation]\nprotocol = [\"ope\"]\n")).unwrap();
    let o = s.run("train-tracker", &[]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn invalid_config_value_exits_2() {
    let s = Setup::new();
    fs::write(&s.config, TINY.replace("steps = 1", "steps = 1\nepsilon = 0.9")).unwrap();
    assert_eq!(code(&s.run("train-tracker", &[])), 2);
}

#[test]
fn train_tracker_writes_reloadable_checkpoint_and_log() {
    let s = Setup::new().trained();
    let ckpt = s.out.join("tracker.ckpt");
    let model = advdef_core::checkpoint::load_tracker(&ckpt, advdef_core::candle::DType::F32).unwrap();
    assert_eq!(model.config(), &advdef_core::tracker::TrackerConfig::micro());
    let log = fs::read_to_string(s.out.join("tracker_log.csv")).unwrap();
    assert!(log.starts_with("epoch,batch,loss"));
    assert_eq!(log.lines().count(), 1 + 2);
}

#[test]
fn same_seed_gives_identical_checkpoints() {
    let a = Setup::new();
    let b = Setup::new();
    for s in [&a, &b] {
        assert_eq!(code(&s.run("train-tracker", &["--seed", "7"])), 0);
    }
    let c = Setup::new();
    assert_eq!(code(&c.run("train-tracker", &["--seed", "8"])), 0);
    let h = |s: &Setup| sha(&s.out.join("tracker.ckpt"));
    assert_eq!(h(&a), h(&b));
    assert_ne!(h(&a), h(&c));
}

#[test]
fn output_env_var_sets_root_and_flag_wins() {
    let s = Setup::new();
    let env_out = s.out.with_file_name("from-env");
    let o = Command::new(env!("CARGO_BIN_EXE_advdef"))
        .args(["train-tracker", "--config", s.config.to_str().unwrap()])
        .env("DUALOSSDEF_OUT", &env_out)
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(env_out.join("tracker.ckpt").is_file());
    let flag_out = s.out.with_file_name("from-flag");
    let o = Command::new(env!("CARGO_BIN_EXE_advdef"))
        .args(["train-tracker", "--config", s.config.to_str().unwrap(), "--output", flag_out.to_str().unwrap()])
        .env("DUALOSSDEF_OUT", &env_out)
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    assert!(flag_out.join("tracker.ckpt").is_file());
}

#[test]
fn train_defense_needs_tracker_checkpoint() {
    let s = Setup::new();
    let o = s.run("train-defense", &["--branch", "search"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("tracker checkpoint"), "{}", stderr(&o));
}

#[test]
fn train_defense_writes_variant_checkpoint_without_touching_tracker() {
    let s = Setup::new().trained();
    let tracker = s.out.join("tracker.ckpt");
    let before = sha(&tracker);
    let o = s.run("train-defense", &["--branch", "template"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(sha(&tracker), before);

    let ckpt = s.out.join("defense-template.ckpt");
    let read = advdef_core::checkpoint::read_checkpoint(&ckpt).unwrap();
    assert_eq!(read.kind, "defense-template");
    assert!(advdef_core::advtrain::load_defense_checkpoint(&ckpt, advdef_core::defense::Variant::Search, advdef_core::candle::DType::F32).is_err());

    let log = fs::read_to_string(s.out.join("defense-template_log.csv")).unwrap();
    let header = log.lines().next().unwrap();
    assert!(header.contains("loss_pass1") && header.contains("loss_pass2"), "{header}");
    assert_eq!(log.lines().count(), 1 + 2);
}

#[test]
fn adaptive_attack_without_pattern_exits_2() {
    let s = Setup::new().trained();
    let o = s.run("eval", &["--pattern", "none", "--attack", "pgd", "--adaptive"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn eval_needs_defense_checkpoint_for_pattern() {
    let s = Setup::new().trained();
    let o = s.run("eval", &["--pattern", "search"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn eval_grid_reports_and_merges() {
    let s = Setup::new().trained();
    assert_eq!(code(&s.run("train-defense", &["--branch", "search"])), 0);

    let clean = s.run("eval", &["--pattern", "none", "--attack", "none"]);
    assert_eq!(code(&clean), 0, "{}", stderr(&clean));
    assert!(stdout(&clean).contains("none/none"));
    let clean_dir = s.out.join("eval/none-none");
    let rows: Vec<serde_json::Value> =
        serde_json::from_str(&fs::read_to_string(clean_dir.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(rows.len(), 3);

    let o = s.run("eval", &["--pattern", "none,search", "--attack", "none,pgd"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let grid_dir = s.out.join("eval/none-none_none-pgd_search-only-none_search-only-pgd");
    let csv = fs::read_to_string(grid_dir.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 4 * 3);
    let first = fs::read(grid_dir.join("metrics.json")).unwrap();
    assert_eq!(code(&s.run("eval", &["--pattern", "none,search", "--attack", "none,pgd"])), 0);
    assert_eq!(fs::read(grid_dir.join("metrics.json")).unwrap(), first);

    let single = advdef(&["report", clean_dir.to_str().unwrap(), "--out", s.out.join("r1").to_str().unwrap()]);
    assert_eq!(code(&single), 0, "{}", stderr(&single));
    // the baseline row carries no deltas
    assert!(!stdout(&single).lines().nth(1).unwrap().contains('%'), "{}", stdout(&single));

    let merged = advdef(&[
        "report",
        clean_dir.to_str().unwrap(),
        grid_dir.to_str().unwrap(),
        "--out",
        s.out.join("r2").to_str().unwrap(),
    ]);
    assert_eq!(code(&merged), 0, "{}", stderr(&merged));
    assert!(stdout(&merged).lines().skip(2).any(|l| l.contains('%')), "{}", stdout(&merged));
    assert!(s.out.join("r2/report.json").is_file());
}

#[test]
fn report_of_mixed_datasets_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let mut dirs = Vec::new();
    for (name, dataset) in [("a", "otb"), ("b", "vot")] {
        let dir = tmp.path().join(name);
        fs::create_dir_all(&dir).unwrap();
        let runs = serde_json::json!([{ "run": name, "dataset": dataset, "metrics": { "success": 0.5 } }]);
        fs::write(dir.join("runs.json"), runs.to_string()).unwrap();
        dirs.push(dir);
    }
    let o = advdef(&["report", dirs[0].to_str().unwrap(), dirs[1].to_str().unwrap(), "--out", tmp.path().join("r").to_str().unwrap()]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn help_lists_documented_flags() {
    let top = stdout(&advdef(&["--help"]));
    for cmd in ["train-tracker", "train-defense", "eval", "report"] {
        assert!(top.contains(cmd), "{cmd} missing from --help");
    }
    let eval = stdout(&advdef(&["eval", "--help"]));
    for flag in ["--config", "--pattern", "--attack", "--adaptive", "--jobs", "--seed", "--output"] {
        assert!(eval.contains(flag), "{flag} missing from eval --help");
    }
    assert!(eval.contains("template") && eval.contains("iou"));
    let defense = stdout(&advdef(&["train-defense", "--help"]));
    assert!(defense.contains("--branch"));
}

#[test]
fn default_config_round_trips() {
    let o = advdef(&["default-config"]);
    assert_eq!(code(&o), 0);
    let cfg = advdef_core::config::ExperimentConfig::from_toml(&stdout(&o)).unwrap();
    assert_eq!(cfg, advdef_core::config::ExperimentConfig::default());
}
