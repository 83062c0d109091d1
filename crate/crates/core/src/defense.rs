//! The defense network: a residual U-Net placed in front of a tracker branch.

use std::str::FromStr;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{Image, ImagePatch};
use crate::nn::{Conv2d, GroupNorm, Init, ParamBuilder, Params, Upsample2x};
use crate::tracker::{FrameContext, InputHook, TemplateContext, TrackerModel};

/// Which tracker input a defense network is trained for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Template,
    Search,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Template => "template",
            Variant::Search => "search",
        }
    }

    pub fn checkpoint_kind(self) -> String {
        format!("defense-{}", self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "template" => Ok(Variant::Template),
            "search" => Ok(Variant::Search),
            other => Err(Error::Config(format!("unknown branch {other:?} (template|search)"))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Branches that receive a defense network at deployment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DeploymentPattern {
    TemplateOnly,
    SearchOnly,
    Both,
}

impl DeploymentPattern {
    pub const ALL: [DeploymentPattern; 3] = [Self::TemplateOnly, Self::SearchOnly, Self::Both];

    pub fn uses(self, v: Variant) -> bool {
        matches!(
            (self, v),
            (Self::Both, _) | (Self::TemplateOnly, Variant::Template) | (Self::SearchOnly, Variant::Search)
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::TemplateOnly => "template-only",
            Self::SearchOnly => "search-only",
            Self::Both => "both",
        }
    }
}

impl FromStr for DeploymentPattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "template-only" | "template" => Ok(Self::TemplateOnly),
            "search-only" | "search" => Ok(Self::SearchOnly),
            "both" => Ok(Self::Both),
            other => Err(Error::Config(format!(
                "unknown pattern {other:?} (template-only|search-only|both)"
            ))),
        }
    }
}

impl std::fmt::Display for DeploymentPattern {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// U-Net shape for one input size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DefenseConfig {
    pub input_size: usize,
    /// Number of downsampling stages.
    pub depth: usize,
    /// Channels of the first stage, doubled at each stage below.
    pub base_width: usize,
    /// The raw output `r` becomes `R = b·tanh(s·r / b)` with scale `s` and
    /// bound `b`: slope `s` near zero, never beyond `±b`.
    #[serde(default = "default_residual")]
    pub residual_scale: f64,
    #[serde(default = "default_residual")]
    pub residual_bound: f64,
}

fn default_residual() -> f64 {
    0.1
}

impl DefenseConfig {
    pub fn new(input_size: usize, depth: usize, base_width: usize) -> Self {
        DefenseConfig {
            input_size,
            depth,
            base_width,
            residual_scale: default_residual(),
            residual_bound: default_residual(),
        }
    }

    /// Depth and width for a named preset, at the given patch size.
    pub fn preset(name: &str, input_size: usize) -> Result<Self> {
        match name {
            "micro" => Ok(Self::new(input_size, 2, 8)),
            "toy" => Ok(Self::new(input_size, 3, 16)),
            "full" => Ok(Self::new(input_size, 4, 16)),
            other => Err(Error::Config(format!("unknown defense preset {other:?}"))),
        }
    }

    /// Size after reflective padding up to a multiple of `2^depth`.
    pub fn padded_size(&self) -> usize {
        let m = 1usize << self.depth;
        self.input_size.div_ceil(m) * m
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.base_width == 0 || self.depth > 8 {
            return Err(Error::Config("defense depth must be in 1..=8 and width positive".into()));
        }
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.residual_scale) || !positive(self.residual_bound) {
            return Err(Error::Config("residual scale and bound must be positive".into()));
        }
        let m = 1usize << self.depth;
        let pad = self.padded_size() - self.input_size;
        if self.input_size < 2 * m || pad >= self.input_size {
            return Err(Error::Config(format!(
                "input size {} is too small for {} downsampling stages",
                self.input_size, self.depth
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct DoubleConv {
    a: Conv2d,
    na: GroupNorm,
    b: Conv2d,
    nb: GroupNorm,
}

impl DoubleConv {
    fn new(pb: &mut ParamBuilder, name: &str, cin: usize, cout: usize) -> Result<Self> {
        let groups = (1..=8).rev().find(|g| cout % g == 0).unwrap_or(1);
        pb.push(name);
        let a = Conv2d::new(pb, "a", cin, cout, 3, 1, 1)?;
        let na = GroupNorm::new(pb, "norm_a", cout, groups)?;
        let b = Conv2d::new(pb, "b", cout, cout, 3, 1, 1)?;
        let nb = GroupNorm::new(pb, "norm_b", cout, groups)?;
        pb.pop();
        Ok(DoubleConv { a, na, b, nb })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.na.forward(&self.a.forward(x)?)?.relu()?;
        Ok(self.nb.forward(&self.b.forward(&h)?)?.relu()?)
    }
}

/// `Def(x, θ) = clip(x + R_θ(x), 0, 1)`.
pub struct DefenseNet {
    cfg: DefenseConfig,
    variant: Variant,
    params: Params,
    down: Vec<DoubleConv>,
    bottom: DoubleConv,
    up: Vec<(Upsample2x, DoubleConv)>,
    out: Conv2d,
    pad_index: Option<Tensor>,
}

/// Builds a defense network whose residual layer starts at zero, so the fresh
/// network is exactly the identity.
pub fn build_defense_net(variant: Variant, cfg: &DefenseConfig, seed: u64, dtype: DType) -> Result<DefenseNet> {
    DefenseNet::build(variant, cfg, ParamBuilder::fresh(seed, dtype))
}

impl DefenseNet {
    pub fn from_tensors(
        variant: Variant,
        cfg: &DefenseConfig,
        tensors: &[(String, Tensor)],
        dtype: DType,
        trainable: bool,
    ) -> Result<Self> {
        Self::build(variant, cfg, ParamBuilder::loaded(tensors, dtype, trainable))
    }

    fn build(variant: Variant, cfg: &DefenseConfig, mut pb: ParamBuilder) -> Result<Self> {
        cfg.validate()?;
        let widths: Vec<usize> = (0..=cfg.depth).map(|i| cfg.base_width << i).collect();
        let mut down = Vec::new();
        let mut cin = 3;
        for (i, &w) in widths[..cfg.depth].iter().enumerate() {
            down.push(DoubleConv::new(&mut pb, &format!("down{i}"), cin, w)?);
            cin = w;
        }
        let bottom = DoubleConv::new(&mut pb, "bottom", cin, widths[cfg.depth])?;
        let mut up = Vec::new();
        for i in (0..cfg.depth).rev() {
            let u = Upsample2x::new(&mut pb, &format!("up{i}.upsample"), widths[i + 1], widths[i])?;
            let c = DoubleConv::new(&mut pb, &format!("up{i}"), 2 * widths[i], widths[i])?;
            up.push((u, c));
        }
        let out = Conv2d::with_init(&mut pb, "residual", widths[0], 3, 1, 1, 0, Init::Zeros)?;
        let pad_index = if cfg.padded_size() != cfg.input_size {
            let n = cfg.input_size;
            let idx: Vec<u32> = (0..cfg.padded_size())
                .map(|i| if i < n { i } else { 2 * n - 2 - i } as u32)
                .collect();
            Some(Tensor::new(idx, &Device::Cpu)?)
        } else {
            None
        };
        Ok(DefenseNet {
            cfg: *cfg,
            variant,
            params: pb.finish(),
            down,
            bottom,
            up,
            out,
            pad_index,
        })
    }

    /// Copy with plain-tensor parameters.
    pub fn frozen(&self) -> Result<Self> {
        Self::from_tensors(self.variant, &self.cfg, &self.params.snapshot()?, self.params.dtype(), false)
    }

    /// Same parameters converted to `dtype` (e.g. for 64-bit gradient checks).
    pub fn with_dtype(&self, dtype: DType, trainable: bool) -> Result<Self> {
        Self::from_tensors(self.variant, &self.cfg, &self.params.snapshot()?, dtype, trainable)
    }

    pub fn config(&self) -> &DefenseConfig {
        &self.cfg
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    /// `R_θ(x)` for a (B, 3, N, N) batch.
    pub fn residual(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        let n = self.cfg.input_size;
        if c != 3 || h != n || w != n {
            return Err(Error::Shape(format!(
                "defense input {:?}, expected (B, 3, {n}, {n})",
                x.dims()
            )));
        }
        let mut h = x.to_dtype(self.dtype())?;
        if let Some(idx) = &self.pad_index {
            h = h.index_select(idx, 2)?.index_select(idx, 3)?;
        }
        let mut skips = Vec::with_capacity(self.down.len());
        for stage in &self.down {
            let f = stage.forward(&h)?;
            h = f.avg_pool2d(2)?;
            skips.push(f);
        }
        h = self.bottom.forward(&h)?;
        for ((upsample, conv), skip) in self.up.iter().zip(skips.iter().rev()) {
            let u = upsample.forward(&h)?;
            h = conv.forward(&Tensor::cat(&[&u, skip], 1)?)?;
        }
        let b = self.cfg.residual_bound;
        let r = self
            .out
            .forward(&h)?
            .affine(self.cfg.residual_scale / b, 0.0)?
            .tanh()?
            .affine(b, 0.0)?;
        if self.pad_index.is_some() {
            Ok(r.narrow(2, 0, n)?.narrow(3, 0, n)?)
        } else {
            Ok(r)
        }
    }

    /// Differentiable defense without the input-range check.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = x.to_dtype(self.dtype())?;
        Ok((&x + self.residual(&x)?)?.clamp(0.0, 1.0)?)
    }

    /// Defended batch; inputs outside `[0, 1]` are rejected.
    pub fn defend(&self, x: &Tensor) -> Result<Tensor> {
        let flat = x.flatten_all()?.to_dtype(DType::F64)?;
        let lo = flat.min(0)?.to_scalar::<f64>()?;
        let hi = flat.max(0)?.to_scalar::<f64>()?;
        if !(lo >= 0.0 && hi <= 1.0) {
            return Err(Error::OutOfRange);
        }
        self.forward(x)
    }

    pub fn defend_patch(&self, patch: &ImagePatch) -> Result<ImagePatch> {
        Image::from_tensor(&self.defend(&patch.to_tensor(self.dtype())?)?)
    }
}

/// Defense networks available for deployment.
#[derive(Default, Clone, Copy)]
pub struct DefenseSet<'a> {
    pub template: Option<&'a DefenseNet>,
    pub search: Option<&'a DefenseNet>,
}

impl DefenseSet<'_> {
    pub fn net(&self, v: Variant) -> Option<&DefenseNet> {
        match v {
            Variant::Template => self.template,
            Variant::Search => self.search,
        }
    }

    /// Fails when the pattern needs a network that is absent.
    pub fn check(&self, pattern: DeploymentPattern) -> Result<()> {
        for v in [Variant::Template, Variant::Search] {
            if pattern.uses(v) && self.net(v).is_none() {
                return Err(Error::MissingNet(v.name()));
            }
        }
        Ok(())
    }
}

/// Defends the branches selected by `pattern`; other inputs pass through untouched.
pub fn apply_pattern(pattern: DeploymentPattern, nets: &DefenseSet<'_>, z: &Tensor, x: &Tensor) -> Result<(Tensor, Tensor)> {
    nets.check(pattern)?;
    let z = match nets.template.filter(|_| pattern.uses(Variant::Template)) {
        Some(net) => net.defend(z)?,
        None => z.clone(),
    };
    let x = match nets.search.filter(|_| pattern.uses(Variant::Search)) {
        Some(net) => net.defend(x)?,
        None => x.clone(),
    };
    Ok((z, x))
}

/// Tracker hook that deploys defense networks according to a pattern.
pub struct DefenseHook<'a> {
    pattern: DeploymentPattern,
    nets: DefenseSet<'a>,
}

impl<'a> DefenseHook<'a> {
    pub fn new(pattern: DeploymentPattern, nets: DefenseSet<'a>) -> Result<Self> {
        nets.check(pattern)?;
        Ok(DefenseHook { pattern, nets })
    }

    pub fn pattern(&self) -> DeploymentPattern {
        self.pattern
    }

    fn apply(&self, v: Variant, t: Tensor) -> Result<Tensor> {
        match self.nets.net(v).filter(|_| self.pattern.uses(v)) {
            Some(net) => net.defend(&t),
            None => Ok(t),
        }
    }
}

impl InputHook for DefenseHook<'_> {
    fn on_template(&mut self, _: &TrackerModel, z: Tensor, _: &TemplateContext<'_>) -> Result<Tensor> {
        self.apply(Variant::Template, z)
    }

    fn on_search(&mut self, _: &TrackerModel, x: Tensor, _: &FrameContext<'_>) -> Result<Tensor> {
        self.apply(Variant::Search, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_patch(n: usize, seed: u64, dtype: DType) -> Tensor {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f64> = (0..3 * n * n).map(|_| rng.gen_range(0.0..1.0)).collect();
        Tensor::from_vec(v, (1, 3, n, n), &Device::Cpu).unwrap().to_dtype(dtype).unwrap()
    }

    fn perturb(net: &DefenseNet, seed: u64) -> DefenseNet {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let tensors: Vec<(String, Tensor)> = net
            .params()
            .snapshot()
            .unwrap()
            .into_iter()
            .map(|(n, t)| {
                let noise: Vec<f64> = (0..t.elem_count()).map(|_| rng.gen_range(-0.3..0.3)).collect();
                let noise = Tensor::from_vec(noise, t.dims(), &Device::Cpu).unwrap().to_dtype(t.dtype()).unwrap();
                (n, (t + noise).unwrap())
            })
            .collect();
        DefenseNet::from_tensors(net.variant(), net.config(), &tensors, net.dtype(), false).unwrap()
    }

    #[test]
    fn fresh_net_is_identity_bitwise() {
        let net = build_defense_net(Variant::Search, &DefenseConfig::new(64, 2, 8), 1, DType::F32).unwrap();
        let x = random_patch(64, 2, DType::F32);
        let y = net.defend(&x).unwrap();
        assert_eq!(x.flatten_all().unwrap().to_vec1::<f32>().unwrap(), y.flatten_all().unwrap().to_vec1::<f32>().unwrap());
    }

    #[test]
    fn shapes_are_preserved_with_padding() {
        let cfg = DefenseConfig::new(127, 4, 4);
        assert_eq!(cfg.padded_size(), 128);
        let net = perturb(&build_defense_net(Variant::Template, &cfg, 0, DType::F32).unwrap(), 5);
        let y = net.defend(&random_patch(127, 1, DType::F32)).unwrap();
        assert_eq!(y.dims(), &[1, 3, 127, 127]);
        let net = build_defense_net(Variant::Template, &DefenseConfig::new(128, 3, 4), 0, DType::F32).unwrap();
        assert_eq!(net.defend(&random_patch(128, 1, DType::F32)).unwrap().dims(), &[1, 3, 128, 128]);
    }

    #[test]
    fn incompatible_sizes_are_rejected() {
        assert!(build_defense_net(Variant::Search, &DefenseConfig::new(12, 3, 4), 0, DType::F32).is_err());
        let net = build_defense_net(Variant::Search, &DefenseConfig::new(32, 2, 4), 0, DType::F32).unwrap();
        assert!(net.defend(&random_patch(64, 0, DType::F32)).is_err());
    }

    #[test]
    fn output_stays_in_range_and_rejects_bad_input() {
        let net = perturb(&build_defense_net(Variant::Search, &DefenseConfig::new(32, 2, 4), 0, DType::F32).unwrap(), 9);
        let y = net.defend(&random_patch(32, 3, DType::F32)).unwrap();
        let v = y.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(v.iter().all(|p| (0.0..=1.0).contains(p)));
        assert!(v.iter().any(|p| *p > 0.0 && *p < 1.0));
        let bad = (random_patch(32, 3, DType::F32) * 2.0).unwrap();
        assert!(matches!(net.defend(&bad), Err(Error::OutOfRange)));
    }

    #[test]
    fn residual_never_exceeds_its_bound() {
        let cfg = DefenseConfig {
            residual_bound: 0.05,
            ..DefenseConfig::new(32, 2, 4)
        };
        let net = perturb(&build_defense_net(Variant::Search, &cfg, 0, DType::F64).unwrap(), 11);
        let r = net.residual(&random_patch(32, 4, DType::F64)).unwrap();
        let v = r.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(v.iter().all(|p| p.abs() <= 0.05));
        assert!(v.iter().any(|p| p.abs() > 1e-4));
        let bad = DefenseConfig {
            residual_scale: 0.0,
            ..DefenseConfig::new(32, 2, 4)
        };
        assert!(build_defense_net(Variant::Search, &bad, 0, DType::F32).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let net = perturb(&build_defense_net(Variant::Search, &DefenseConfig::new(16, 2, 4), 0, DType::F64).unwrap(), 4);
        // keep the input in the middle of the range so the clip stays inactive
        let x0 = ((random_patch(16, 8, DType::F64) * 0.2).unwrap() + 0.4).unwrap();
        let w = random_patch(16, 11, DType::F64);
        let objective = |x: &Tensor| net.forward(x).unwrap().mul(&w).unwrap().sum_all().unwrap();
        let var = candle_core::Var::from_tensor(&x0).unwrap();
        let grads = objective(var.as_tensor()).backward().unwrap();
        let g = grads.get(var.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let base = x0.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let h = 1e-6;
        for idx in [3usize, 100, 257, 511, 700] {
            let eval = |d: f64| {
                let mut v = base.clone();
                v[idx] += d;
                let t = Tensor::from_vec(v, (1, 3, 16, 16), &Device::Cpu).unwrap();
                objective(&t).to_scalar::<f64>().unwrap()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let rel = (fd - g[idx]).abs() / fd.abs().max(1e-8);
            assert!(rel < 1e-3, "pixel {idx}: fd {fd} vs analytic {}", g[idx]);
        }
    }

    #[test]
    fn patterns_select_branches() {
        let zn = perturb(&build_defense_net(Variant::Template, &DefenseConfig::new(32, 2, 4), 0, DType::F32).unwrap(), 1);
        let xn = perturb(&build_defense_net(Variant::Search, &DefenseConfig::new(64, 2, 4), 0, DType::F32).unwrap(), 2);
        let z = random_patch(32, 5, DType::F32);
        let x = random_patch(64, 6, DType::F32);
        let set = DefenseSet {
            template: Some(&zn),
            search: Some(&xn),
        };
        let same = |a: &Tensor, b: &Tensor| {
            a.flatten_all().unwrap().to_vec1::<f32>().unwrap() == b.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        };
        let (z1, x1) = apply_pattern(DeploymentPattern::TemplateOnly, &set, &z, &x).unwrap();
        assert!(!same(&z1, &z) && same(&x1, &x));
        let (z2, x2) = apply_pattern(DeploymentPattern::SearchOnly, &set, &z, &x).unwrap();
        assert!(same(&z2, &z) && !same(&x2, &x));
        let only_template = DefenseSet {
            template: Some(&zn),
            search: None,
        };
        assert!(matches!(
            apply_pattern(DeploymentPattern::Both, &only_template, &z, &x),
            Err(Error::MissingNet("search"))
        ));
        let fresh_z = build_defense_net(Variant::Template, &DefenseConfig::new(32, 2, 4), 0, DType::F32).unwrap();
        let fresh_x = build_defense_net(Variant::Search, &DefenseConfig::new(64, 2, 4), 1, DType::F32).unwrap();
        let fresh = DefenseSet {
            template: Some(&fresh_z),
            search: Some(&fresh_x),
        };
        let (z3, x3) = apply_pattern(DeploymentPattern::Both, &fresh, &z, &x).unwrap();
        assert!(same(&z3, &z) && same(&x3, &x));
    }
}
