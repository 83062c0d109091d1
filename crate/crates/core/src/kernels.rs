//! Hand-written CPU kernels for the two layers that dominate defense cost.
//! candle's generic conv backward and broadcast-heavy normalization graphs
//! are an order of magnitude slower at these sizes.

use candle_core::{CpuStorage, CustomOp1, CustomOp3, DType, Layout, Shape, Tensor, WithDType};

use crate::error::Result;

fn contiguous<'a, T: WithDType>(s: &'a CpuStorage, l: &Layout) -> candle_core::Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((start, end)) => Ok(&s.as_slice::<T>()?[start..end]),
        None => candle_core::bail!("kernel input must be contiguous"),
    }
}

macro_rules! dispatch {
    ($s:expr, $f:ident($($arg:expr),*)) => {
        match $s {
            CpuStorage::F32(_) => $f::<f32>($($arg),*),
            CpuStorage::F64(_) => $f::<f64>($($arg),*),
            _ => candle_core::bail!("kernels support f32 and f64 only"),
        }
    };
}

#[derive(Debug, Clone, Copy)]
struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    fn out(&self) -> (usize, usize) {
        ((self.h + 2 * self.pad - self.k) / self.stride + 1, (self.w + 2 * self.pad - self.k) / self.stride + 1)
    }

    /// Calls `f(col_offset, src_offset, len)` for every run of in-bounds taps
    /// of one sample. Column rows are ordered (c, u, v) to match an
    /// (O, C, k, k) weight; `len` taps start at the offsets, the source
    /// advancing by `stride` per tap.
    fn for_each_run(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (ho, wo) = self.out();
        let (s, p) = (self.stride, self.pad);
        for c in 0..self.c {
            for u in 0..self.k {
                for v in 0..self.k {
                    let row = ((c * self.k + u) * self.k + v) * ho * wo;
                    // output columns whose input column v + ox·s − p is inside [0, w)
                    let ox0 = p.saturating_sub(v).div_ceil(s);
                    let ox1 = ((self.w + p).saturating_sub(v)).div_ceil(s).min(wo);
                    if ox0 >= ox1 {
                        continue;
                    }
                    for oy in 0..ho {
                        let y = oy * s + u;
                        if y < p || y - p >= self.h {
                            continue;
                        }
                        let src = (c * self.h + y - p) * self.w + ox0 * s + v - p;
                        f(row + oy * wo + ox0, src, ox1 - ox0);
                    }
                }
            }
        }
    }
}

struct Im2Col(Geometry);

fn im2col_fwd<T: WithDType>(g: Geometry, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
    let src = contiguous::<T>(s, l)?;
    let b = l.dims()[0];
    let (ho, wo) = g.out();
    let (rows, n) = (g.c * g.k * g.k, ho * wo);
    let plane = g.c * g.h * g.w;
    let mut out = vec![T::zero(); b * rows * n];
    for i in 0..b {
        let (src, dst) = (&src[i * plane..(i + 1) * plane], &mut out[i * rows * n..(i + 1) * rows * n]);
        g.for_each_run(|at, from, len| {
            if g.stride == 1 {
                dst[at..at + len].copy_from_slice(&src[from..from + len]);
            } else {
                for j in 0..len {
                    dst[at + j] = src[from + j * g.stride];
                }
            }
        });
    }
    Ok((T::to_cpu_storage_owned(out), Shape::from((b, rows, n))))
}

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        dispatch!(s, im2col_fwd(self.0, s, l))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&Col2Im(self.0))?))
    }
}

/// Adjoint of [`Im2Col`]: scatters column gradients back onto the image.
struct Col2Im(Geometry);

fn col2im_fwd<T: WithDType>(g: Geometry, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
    let src = contiguous::<T>(s, l)?;
    let b = l.dims()[0];
    let (ho, wo) = g.out();
    let (rows, n) = (g.c * g.k * g.k, ho * wo);
    let plane = g.c * g.h * g.w;
    let mut out = vec![T::zero(); b * plane];
    for i in 0..b {
        let (src, dst) = (&src[i * rows * n..(i + 1) * rows * n], &mut out[i * plane..(i + 1) * plane]);
        g.for_each_run(|at, from, len| {
            if g.stride == 1 {
                for (d, v) in dst[from..from + len].iter_mut().zip(&src[at..at + len]) {
                    *d += *v;
                }
            } else {
                for j in 0..len {
                    dst[from + j * g.stride] += src[at + j];
                }
            }
        });
    }
    Ok((T::to_cpu_storage_owned(out), Shape::from((b, g.c, g.h, g.w))))
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        dispatch!(s, col2im_fwd(self.0, s, l))
    }
}

/// (B, C, H, W) -> (B, C·k·k, Ho·Wo) patch matrix with zero padding.
pub(crate) fn im2col(x: &Tensor, k: usize, stride: usize, pad: usize) -> Result<Tensor> {
    let (_, c, h, w) = x.dims4()?;
    let g = Geometry { c, h, w, k, stride, pad };
    Ok(x.contiguous()?.apply_op1(Im2Col(g))?)
}

struct GroupNormOp {
    groups: usize,
    eps: f64,
}

/// Per-(sample, group) mean and inverse standard deviation.
fn group_stats(x: &[f64], count: usize, span: usize, eps: f64) -> Vec<(f64, f64)> {
    (0..count)
        .map(|i| {
            let v = &x[i * span..(i + 1) * span];
            let mean = v.iter().sum::<f64>() / span as f64;
            let var = v.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / span as f64;
            (mean, 1.0 / (var + eps).sqrt())
        })
        .collect()
}

fn group_norm_fwd<T: WithDType>(
    op: &GroupNormOp,
    s1: &CpuStorage,
    l1: &Layout,
    s2: &CpuStorage,
    l2: &Layout,
    s3: &CpuStorage,
    l3: &Layout,
) -> candle_core::Result<(CpuStorage, Shape)> {
    let x: Vec<f64> = contiguous::<T>(s1, l1)?.iter().map(|v| v.to_f64()).collect();
    let gamma = contiguous::<T>(s2, l2)?;
    let beta = contiguous::<T>(s3, l3)?;
    let dims = l1.dims();
    let (b, c) = (dims[0], dims[1]);
    let hw: usize = dims[2..].iter().product();
    let span = c / op.groups * hw;
    let stats = group_stats(&x, b * op.groups, span, op.eps);
    let out: Vec<T> = x
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let (mean, inv) = stats[i / span];
            let ch = (i / hw) % c;
            T::from_f64((v - mean) * inv * gamma[ch].to_f64() + beta[ch].to_f64())
        })
        .collect();
    Ok((T::to_cpu_storage_owned(out), l1.shape().clone()))
}

impl CustomOp3 for GroupNormOp {
    fn name(&self) -> &'static str {
        "group-norm"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        dispatch!(s1, group_norm_fwd(self, s1, l1, s2, l2, s3, l3))
    }

    fn bwd(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        _beta: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let (b, c, h, w) = x.dims4()?;
        let hw = h * w;
        let span = c / self.groups * hw;
        let flat = |t: &Tensor| t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>();
        let (xs, dy, g) = (flat(x)?, flat(grad)?, flat(gamma)?);
        let stats = group_stats(&xs, b * self.groups, span, self.eps);
        let xhat: Vec<f64> = xs
            .iter()
            .enumerate()
            .map(|(i, v)| (v - stats[i / span].0) * stats[i / span].1)
            .collect();
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        for i in 0..xs.len() {
            let ch = (i / hw) % c;
            dgamma[ch] += dy[i] * xhat[i];
            dbeta[ch] += dy[i];
        }
        let mut dx = vec![0.0; xs.len()];
        for (gi, &(_, inv)) in stats.iter().enumerate() {
            let range = gi * span..(gi + 1) * span;
            let dxhat = |i: usize| dy[i] * g[(i / hw) % c];
            let (mut sum, mut dot) = (0.0, 0.0);
            for i in range.clone() {
                sum += dxhat(i);
                dot += dxhat(i) * xhat[i];
            }
            let n = span as f64;
            for i in range {
                dx[i] = inv / n * (n * dxhat(i) - sum - xhat[i] * dot);
            }
        }
        let dt = x.dtype();
        let dev = x.device();
        Ok((
            Some(Tensor::from_vec(dx, (b, c, h, w), dev)?.to_dtype(dt)?),
            Some(Tensor::from_vec(dgamma, c, dev)?.to_dtype(gamma.dtype())?),
            Some(Tensor::from_vec(dbeta, c, dev)?.to_dtype(gamma.dtype())?),
        ))
    }
}

/// Group normalization of (B, C, H, W) with per-channel affine parameters;
/// statistics are accumulated in f64.
pub(crate) fn group_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, groups: usize, eps: f64) -> Result<Tensor> {
    let dt = x.dtype();
    let (gamma, beta) = (gamma.to_dtype(dt)?.contiguous()?, beta.to_dtype(dt)?.contiguous()?);
    Ok(x.contiguous()?.apply_op3(&gamma, &beta, GroupNormOp { groups, eps })?)
}
