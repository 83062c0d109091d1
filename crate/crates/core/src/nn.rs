//! Small layer toolkit on top of candle: seeded parameter creation, frozen
//! copies, and the handful of layers the tracker and the defense need.
//!
//! candle's CPU RNG cannot be seeded, so every parameter is initialized from a
//! ChaCha stream owned by [`ParamBuilder`].

use std::collections::HashMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// How a parameter is initialized when created fresh.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// Uniform in `±sqrt(6 / fan_in)` (He/Kaiming for ReLU).
    Kaiming { fan_in: usize },
    /// Uniform in `±bound`.
    Uniform(f64),
    Zeros,
    Ones,
}

enum Source {
    Fresh(ChaCha8Rng),
    Loaded(HashMap<String, Tensor>),
}

/// Creates (or looks up) named parameters in construction order.
pub struct ParamBuilder {
    source: Source,
    dtype: DType,
    trainable: bool,
    prefix: Vec<String>,
    params: Vec<(String, Tensor)>,
    vars: Vec<Var>,
}

impl ParamBuilder {
    pub fn fresh(seed: u64, dtype: DType) -> Self {
        ParamBuilder {
            source: Source::Fresh(ChaCha8Rng::seed_from_u64(seed)),
            dtype,
            trainable: true,
            prefix: Vec::new(),
            params: Vec::new(),
            vars: Vec::new(),
        }
    }

    /// Reuses `tensors` by name. Frozen builders hand out plain tensors, so no
    /// gradient is ever accumulated for them.
    pub fn loaded(tensors: &[(String, Tensor)], dtype: DType, trainable: bool) -> Self {
        ParamBuilder {
            source: Source::Loaded(tensors.iter().cloned().collect()),
            dtype,
            trainable,
            prefix: Vec::new(),
            params: Vec::new(),
            vars: Vec::new(),
        }
    }

    pub fn push(&mut self, name: &str) {
        self.prefix.push(name.to_string());
    }

    pub fn pop(&mut self) {
        self.prefix.pop();
    }

    fn full_name(&self, name: &str) -> String {
        let mut parts = self.prefix.clone();
        parts.push(name.to_string());
        parts.join(".")
    }

    pub fn get(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let full = self.full_name(name);
        let t = match &mut self.source {
            Source::Fresh(rng) => {
                let n: usize = shape.iter().product();
                let values: Vec<f64> = match init {
                    Init::Zeros => vec![0.0; n],
                    Init::Ones => vec![1.0; n],
                    Init::Kaiming { fan_in } => {
                        let bound = (6.0 / fan_in.max(1) as f64).sqrt();
                        (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
                    }
                    Init::Uniform(bound) if bound > 0.0 => (0..n).map(|_| rng.gen_range(-bound..bound)).collect(),
                    Init::Uniform(_) => vec![0.0; n],
                };
                Tensor::from_vec(values, shape, &Device::Cpu)?.to_dtype(self.dtype)?
            }
            Source::Loaded(map) => {
                let t = map
                    .get(&full)
                    .ok_or_else(|| Error::Corrupt(format!("missing parameter {full}")))?;
                if t.dims() != shape {
                    return Err(Error::Shape(format!(
                        "parameter {full}: stored {:?}, expected {:?}",
                        t.dims(),
                        shape
                    )));
                }
                t.to_dtype(self.dtype)?.detach()
            }
        };
        let t = if self.trainable {
            let var = Var::from_tensor(&t)?;
            let t = var.as_tensor().clone();
            self.vars.push(var);
            t
        } else {
            t
        };
        self.params.push((full, t.clone()));
        Ok(t)
    }

    pub fn finish(self) -> Params {
        Params {
            named: self.params,
            vars: self.vars,
            dtype: self.dtype,
        }
    }
}

/// The parameters of one network, in construction order.
#[derive(Clone)]
pub struct Params {
    named: Vec<(String, Tensor)>,
    vars: Vec<Var>,
    dtype: DType,
}

impl Params {
    pub fn named(&self) -> &[(String, Tensor)] {
        &self.named
    }

    /// Trainable handles; empty for frozen networks.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn is_trainable(&self) -> bool {
        !self.vars.is_empty()
    }

    pub fn count(&self) -> usize {
        self.named.iter().map(|(_, t)| t.elem_count()).sum()
    }

    /// Detached snapshot of the current values.
    pub fn snapshot(&self) -> Result<Vec<(String, Tensor)>> {
        self.named
            .iter()
            .map(|(n, t)| Ok((n.clone(), t.detach().copy()?)))
            .collect()
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn checksum(&self) -> Result<String> {
        let mut hasher = Sha256::new();
        for (name, t) in &self.named {
            hasher.update(name.as_bytes());
            for d in t.dims() {
                hasher.update((*d as u64).to_le_bytes());
            }
            for v in t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()? {
                hasher.update(v.to_le_bytes());
            }
        }
        Ok(hasher.finalize().iter().map(|b| format!("{b:02x}")).collect())
    }

    pub fn all_finite(&self) -> Result<bool> {
        for (_, t) in &self.named {
            let v = t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
            if !v.iter().all(|x| x.is_finite()) {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

/// 2-D convolution with square kernel.
#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(pb: &mut ParamBuilder, name: &str, cin: usize, cout: usize, k: usize, stride: usize, padding: usize) -> Result<Self> {
        Self::with_init(pb, name, cin, cout, k, stride, padding, Init::Kaiming { fan_in: cin * k * k })
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with_init(
        pb: &mut ParamBuilder,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        padding: usize,
        init: Init,
    ) -> Result<Self> {
        pb.push(name);
        let weight = pb.get("weight", &[cout, cin, k, k], init)?;
        let bias = pb.get("bias", &[cout], Init::Zeros)?;
        pb.pop();
        Ok(Conv2d {
            weight,
            bias,
            stride,
            padding,
        })
    }

    /// Lowered to an explicit patch matrix and one matrix product, so the
    /// backward pass is a scatter and GEMMs.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let (o, _, k, _) = self.weight.dims4()?;
        let (p, s) = (self.padding, self.stride);
        if h + 2 * p < k || w + 2 * p < k {
            return Err(Error::Shape(format!("conv input {:?} smaller than {k}x{k} kernel", x.dims())));
        }
        let (ho, wo) = ((h + 2 * p - k) / s + 1, (w + 2 * p - k) / s + 1);
        let cols = crate::kernels::im2col(x, k, s, p)?;
        let y = self.weight.reshape((o, c * k * k))?.broadcast_matmul(&cols)?;
        let y = y.reshape((b, o, ho, wo))?;
        Ok(y.broadcast_add(&self.bias.reshape((1, o, 1, 1))?)?)
    }
}

/// Group normalization over (C/G, H, W) per sample, with per-channel affine.
/// Statistics never mix samples, so outputs do not depend on batch makeup.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    gamma: Tensor,
    beta: Tensor,
    groups: usize,
    eps: f64,
}

impl GroupNorm {
    pub fn new(pb: &mut ParamBuilder, name: &str, channels: usize, groups: usize) -> Result<Self> {
        if groups == 0 || channels % groups != 0 {
            return Err(Error::Config(format!("{channels} channels cannot form {groups} groups")));
        }
        pb.push(name);
        let gamma = pb.get("gamma", &[channels], Init::Ones)?;
        let beta = pb.get("beta", &[channels], Init::Zeros)?;
        pb.pop();
        Ok(GroupNorm {
            gamma,
            beta,
            groups,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        crate::kernels::group_norm(x, &self.gamma, &self.beta, self.groups, self.eps)
    }

    /// Same computation in plain tensor ops.
    #[cfg(test)]
    fn forward_reference(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let g = x.reshape((b, self.groups, (c / self.groups) * h * w))?;
        let centered = g.broadcast_sub(&g.mean_keepdim(2)?)?;
        let var = centered.sqr()?.mean_keepdim(2)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?.reshape((b, c, h, w))?;
        let shape = (1, c, 1, 1);
        Ok(normed
            .broadcast_mul(&self.gamma.reshape(shape)?)?
            .broadcast_add(&self.beta.reshape(shape)?)?)
    }
}

/// Stride-2, kernel-2 transposed convolution (exact 2× upsampling).
#[derive(Debug, Clone)]
pub struct Upsample2x {
    weight: Tensor,
    bias: Tensor,
}

impl Upsample2x {
    pub fn new(pb: &mut ParamBuilder, name: &str, cin: usize, cout: usize) -> Result<Self> {
        pb.push(name);
        let weight = pb.get("weight", &[cin, cout, 2, 2], Init::Kaiming { fan_in: cin })?;
        let bias = pb.get("bias", &[cout], Init::Zeros)?;
        pb.pop();
        Ok(Upsample2x { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let o = self.weight.dim(1)?;
        // every input pixel writes its own 2x2 output block
        let wm = self.weight.reshape((c, o * 4))?.t()?;
        let y = wm.broadcast_matmul(&x.reshape((b, c, h * w))?)?;
        let y = y
            .reshape((b, o, 2, 2, h, w))?
            .permute((0, 1, 4, 2, 5, 3))?
            .reshape((b, o, 2 * h, 2 * w))?;
        Ok(y.broadcast_add(&self.bias.reshape((1, o, 1, 1))?)?)
    }
}

/// Depthwise cross-correlation: every channel of `kernel` (B, C, h, w) slides
/// over the matching channel of `search` (B, C, H, W), giving
/// (B, C, H - h + 1, W - w + 1).
pub fn depthwise_xcorr(search: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    let (b, c, hs, ws) = search.dims4()?;
    let (bk, ck, hk, wk) = kernel.dims4()?;
    if b != bk || c != ck || hk > hs || wk > ws {
        return Err(Error::Shape(format!(
            "xcorr of search {:?} with kernel {:?}",
            search.dims(),
            kernel.dims()
        )));
    }
    let (ho, wo) = (hs - hk + 1, ws - wk + 1);
    let mut acc: Option<Tensor> = None;
    for u in 0..hk {
        let rows = search.narrow(2, u, ho)?;
        for v in 0..wk {
            let window = rows.narrow(3, v, wo)?;
            let weight = kernel.narrow(2, u, 1)?.narrow(3, v, 1)?;
            let term = window.broadcast_mul(&weight)?;
            acc = Some(match acc {
                None => term,
                Some(a) => (a + term)?,
            });
        }
    }
    Ok(acc.expect("kernel has at least one tap"))
}

/// Deterministic 64-bit seed derivation for sub-streams.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
