//! Adversarial training of a defense network against a frozen tracker.
//!
//! Every batch runs two passes: one on `x + δ^g` (random noise) to get the
//! loss gradient with respect to the input, an FGSM step to `δ^adv`, and a
//! second pass on `x + δ^adv` whose loss drives one optimizer step.

use std::fs::OpenOptions;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use candle_core::{DType, Device, Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{read_checkpoint_kind, write_checkpoint, Checkpoint};
use crate::data::{sample_training_pairs, PairBatch, PairConfig, Sequence};
use crate::defense::{DefenseConfig, DefenseNet, Variant};
use crate::error::{Error, Result};
use crate::losses::{dua_loss, scalar, DuaLossConfig, LossTargets};
use crate::nn::derive_seed;
use crate::tracker::TrackerModel;

/// Distribution of the starting perturbation `δ^g`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseKind {
    /// i.i.d. uniform on `[−ε, ε]`.
    Uniform,
    /// Normal with σ = ε/2, truncated to `[−ε, ε]`.
    Gaussian,
}

impl FromStr for NoiseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(NoiseKind::Uniform),
            "gaussian" => Ok(NoiseKind::Gaussian),
            other => Err(Error::Config(format!("unknown noise kind {other:?}"))),
        }
    }
}

/// Defense training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub pairs_per_epoch: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub branch: Variant,
    pub seed: u64,
    pub noise: NoiseKind,
    pub loss: DuaLossConfig,
    pub pairs: PairConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 16,
            pairs_per_epoch: 256,
            learning_rate: 0.005,
            beta1: 0.5,
            beta2: 0.999,
            epsilon: 8.0 / 255.0,
            branch: Variant::Search,
            seed: 0,
            noise: NoiseKind::Uniform,
            loss: DuaLossConfig::default(),
            pairs: PairConfig {
                max_shift: 0.25,
                scale_jitter: 0.1,
                ..PairConfig::default()
            },
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.pairs_per_epoch == 0 {
            return Err(Error::Config("epochs, batch size and pairs per epoch must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return Err(Error::Config("optimizer betas must lie in [0, 1)".into()));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 0.5) {
            return Err(Error::Config(format!("epsilon {} must lie in (0, 0.5)", self.epsilon)));
        }
        self.loss.validate()
    }
}

/// Starting perturbation `δ^g` of the given shape; deterministic under `seed`.
pub fn init_perturbation(dims: &[usize], epsilon: f64, seed: u64, kind: NoiseKind, dtype: DType) -> Result<Tensor> {
    let n: usize = dims.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values: Vec<f64> = if epsilon <= 0.0 {
        vec![0.0; n]
    } else {
        match kind {
            NoiseKind::Uniform => (0..n).map(|_| rng.gen_range(-epsilon..=epsilon)).collect(),
            NoiseKind::Gaussian => {
                let normal = Normal::new(0.0, epsilon / 2.0).expect("positive sigma");
                (0..n)
                    .map(|_| loop {
                        let v = normal.sample(&mut rng);
                        if v.abs() <= epsilon {
                            break v;
                        }
                    })
                    .collect()
            }
        }
    };
    Ok(Tensor::from_vec(values, dims, &Device::Cpu)?.to_dtype(dtype)?)
}

/// Limits `δ` to the ε-ball and to `[−x, 1 − x]`; entries already inside are
/// returned unchanged.
pub fn project(delta: &Tensor, x: &Tensor, epsilon: f64) -> Result<Tensor> {
    let d = delta.clamp(-epsilon, epsilon)?;
    Ok(d.maximum(&x.neg()?)?.minimum(&x.affine(-1.0, 1.0)?)?)
}

/// `x + δ`, clipped to `[0, 1]` against rounding.
pub fn apply_delta(x: &Tensor, delta: &Tensor) -> Result<Tensor> {
    Ok((x + delta)?.clamp(0.0, 1.0)?)
}

/// One signed-gradient ascent step: `δ + ε·sign(grad)`, projected.
pub fn fgsm_step(delta: &Tensor, grad: &Tensor, x: &Tensor, epsilon: f64) -> Result<Tensor> {
    signed_step(delta, grad, x, epsilon, epsilon)
}

/// `δ + α·sign(grad)`, projected to the ε-ball and the pixel range.
pub fn signed_step(delta: &Tensor, grad: &Tensor, x: &Tensor, alpha: f64, epsilon: f64) -> Result<Tensor> {
    if delta.dims() != grad.dims() || delta.dims() != x.dims() {
        return Err(Error::Shape(format!(
            "fgsm step on δ {:?}, gradient {:?}, input {:?}",
            delta.dims(),
            grad.dims(),
            x.dims()
        )));
    }
    let total = scalar(&grad.to_dtype(DType::F64)?.abs()?.sum_all()?)?;
    if !total.is_finite() {
        return Err(Error::NonFinite("input gradient".into()));
    }
    let raw = (delta + (grad.sign()? * alpha)?)?;
    project(&raw, x, epsilon)
}

/// Largest absolute entry.
pub fn linf(t: &Tensor) -> Result<f64> {
    scalar(&t.to_dtype(DType::F64)?.abs()?.flatten_all()?.max(0)?)
}

/// One batch of defense training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub epoch: usize,
    pub batch: usize,
    pub loss_pass1: f64,
    pub loss_pass2: f64,
    pub grad_norm: f64,
    pub wall_ms: f64,
}

/// Training log with instrumentation counters.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub rows: Vec<TrainLogRow>,
    pub tracker_forwards: usize,
    pub optimizer_steps: usize,
    /// Largest `‖δ^adv‖∞` seen during training.
    pub max_delta: f64,
}

impl TrainLog {
    /// Mean second-pass loss per epoch.
    pub fn epoch_means(&self) -> Vec<f64> {
        let epochs = self.rows.iter().map(|r| r.epoch + 1).max().unwrap_or(0);
        (0..epochs)
            .map(|e| crate::tracker::mean(self.rows.iter().filter(|r| r.epoch == e).map(|r| r.loss_pass2)))
            .collect()
    }

    /// Appends rows to a CSV file, writing the header when the file is new.
    pub fn append_csv(&self, path: &Path) -> Result<()> {
        let fresh = !path.exists();
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    /// Writes the log as JSON without wall-clock times, so identical runs give
    /// identical files.
    pub fn write_report(&self, path: &Path) -> Result<()> {
        let mut stripped = self.clone();
        for r in &mut stripped.rows {
            r.wall_ms = 0.0;
        }
        let text = serde_json::to_string_pretty(&stripped)? + "\n";
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

fn grad_norm(net: &DefenseNet, grads: &candle_core::backprop::GradStore) -> Result<f64> {
    let mut total = 0.0;
    for var in net.params().vars() {
        if let Some(g) = grads.get(var.as_tensor()) {
            total += scalar(&g.to_dtype(DType::F64)?.sqr()?.sum_all()?)?;
        }
    }
    Ok(total.sqrt())
}

/// Trains `net` against the frozen `tracker`, perturbing only `cfg.branch`.
/// The opposite branch always sees clean input. Fails if the tracker's
/// parameters change.
pub fn train_defense(
    tracker: &TrackerModel,
    net: &DefenseNet,
    data: &[Sequence],
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    cfg.validate()?;
    if net.variant() != cfg.branch {
        return Err(Error::Config(format!(
            "defense network is a {} net but training targets the {} branch",
            net.variant(),
            cfg.branch
        )));
    }
    if !net.params().is_trainable() {
        return Err(Error::Config("defense network parameters are frozen".into()));
    }
    let expected = match cfg.branch {
        Variant::Template => tracker.config().template_size,
        Variant::Search => tracker.config().search_size,
    };
    if net.config().input_size != expected {
        return Err(Error::Shape(format!(
            "defense input size {} does not match the {} patch size {expected}",
            net.config().input_size,
            cfg.branch
        )));
    }
    let checksum = tracker.params().checksum()?;
    let dtype = net.dtype();
    let mut opt = AdamW::new(
        net.params().vars().to_vec(),
        ParamsAdamW {
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: 1e-8,
            weight_decay: 0.0,
        },
    )?;
    let mut log = TrainLog::default();
    let forwards_before = tracker.forward_count();

    for epoch in 0..cfg.epochs {
        let pairs = sample_training_pairs(
            data,
            tracker.config(),
            &cfg.pairs,
            cfg.pairs_per_epoch,
            derive_seed(cfg.seed, 1000 + epoch as u64),
        )?;
        for (b, chunk) in pairs.chunks(cfg.batch_size).enumerate() {
            let started = Instant::now();
            let stream = ((epoch as u64) << 32) | b as u64;
            let batch = PairBatch::from_pairs(chunk, dtype)?;
            let mut loss_cfg = cfg.loss;
            loss_cfg.sampling.seed = derive_seed(cfg.seed, stream ^ 0xA5A5);
            let targets = LossTargets::new(&batch.labels, &loss_cfg.sampling, tracker.dtype())?;
            let (clean, other) = match cfg.branch {
                Variant::Template => (&batch.templates, &batch.searches),
                Variant::Search => (&batch.searches, &batch.templates),
            };
            let clean_features = match cfg.branch {
                Variant::Search => Some(tracker.template_features(other)?),
                Variant::Template => None,
            };
            let run = |input: &Tensor| -> Result<Tensor> {
                let defended = net.forward(input)?;
                let maps = match &clean_features {
                    Some(zf) => tracker.forward_features(zf, &defended)?,
                    None => tracker.forward(&defended, other)?,
                };
                dua_loss(&maps.cls, &maps.reg, &targets, &loss_cfg)
            };

            // pass 1: random start
            let noise = init_perturbation(clean.dims(), cfg.epsilon, derive_seed(cfg.seed, stream), cfg.noise, dtype)?;
            let delta_g = project(&noise, clean, cfg.epsilon)?;
            let input = Var::from_tensor(&apply_delta(clean, &delta_g)?)?;
            let loss1 = run(input.as_tensor())?;
            let loss_pass1 = scalar(&loss1)?;
            if !loss_pass1.is_finite() {
                return Err(Error::NonFinite(format!("first-pass loss at epoch {epoch}, batch {b}")));
            }
            let grads = loss1.backward()?;
            let grad_x = grads
                .get(input.as_tensor())
                .ok_or_else(|| Error::NonFinite("missing input gradient".into()))?;

            // pass 2: adversarial input, one optimizer step
            let delta_adv = fgsm_step(&delta_g, grad_x, clean, cfg.epsilon)?;
            let d = linf(&delta_adv)?;
            if d > cfg.epsilon + 1e-6 {
                return Err(Error::NonFinite(format!("perturbation {d} exceeds budget {}", cfg.epsilon)));
            }
            log.max_delta = log.max_delta.max(d);
            let loss2 = run(&apply_delta(clean, &delta_adv)?)?;
            let loss_pass2 = scalar(&loss2)?;
            if !loss_pass2.is_finite() {
                return Err(Error::NonFinite(format!("second-pass loss at epoch {epoch}, batch {b}")));
            }
            let grads = loss2.backward()?;
            let norm = grad_norm(net, &grads)?;
            opt.step(&grads)?;
            log.optimizer_steps += 1;
            log.rows.push(TrainLogRow {
                epoch,
                batch: b,
                loss_pass1,
                loss_pass2,
                grad_norm: norm,
                wall_ms: started.elapsed().as_secs_f64() * 1e3,
            });
        }
        log::info!(
            "defense ({}) epoch {epoch}: mean second-pass loss {:.4}",
            cfg.branch,
            log.epoch_means()[epoch]
        );
    }
    log.tracker_forwards = tracker.forward_count() - forwards_before;
    if tracker.params().checksum()? != checksum {
        return Err(Error::Config("tracker parameters changed during defense training".into()));
    }
    if !net.params().all_finite()? {
        return Err(Error::NonFinite("defense parameters after training".into()));
    }
    Ok(log)
}

#[derive(Serialize, Deserialize)]
struct DefenseEcho {
    variant: Variant,
    defense: DefenseConfig,
    train: Option<TrainConfig>,
}

/// Stores `net` with its shape and (optionally) the training configuration.
pub fn save_defense_checkpoint(net: &DefenseNet, train: Option<&TrainConfig>, path: &Path) -> Result<()> {
    let echo = DefenseEcho {
        variant: net.variant(),
        defense: *net.config(),
        train: train.cloned(),
    };
    write_checkpoint(
        path,
        &Checkpoint {
            kind: net.variant().checkpoint_kind(),
            config: serde_json::to_value(echo)?,
            tensors: net.params().snapshot()?,
        },
    )
}

/// Loads a frozen defense network, checking that it was trained for `variant`.
pub fn load_defense_checkpoint(path: &Path, variant: Variant, dtype: DType) -> Result<(DefenseNet, Option<TrainConfig>)> {
    let ckpt = read_checkpoint_kind(path, &variant.checkpoint_kind())?;
    let echo: DefenseEcho = serde_json::from_value(ckpt.config)?;
    let net = DefenseNet::from_tensors(echo.variant, &echo.defense, &ckpt.tensors, dtype, false)?;
    Ok((net, echo.train))
}
