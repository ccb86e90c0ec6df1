//! Parameter storage and the handful of layers the models are built from.
//!
//! Every trainable array lives in a [`ParamStore`] under a dotted name. Names
//! are kept in a `BTreeMap` so iteration order (and therefore checkpoint
//! layout and optimizer order) is stable across runs.

use std::collections::BTreeMap;

use candle_core::{CpuStorage, CustomOp1, DType, Device, Layout, Shape, Tensor, Var, WithDType};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// He-normal with the given fan-in.
    KaimingNormal { fan_in: usize },
    Normal { std: f64 },
    Zeros,
    Ones,
}

#[derive(Debug)]
pub struct ParamStore {
    dtype: DType,
    device: Device,
    vars: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self {
            dtype,
            device: Device::Cpu,
            vars: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn scope(&mut self, prefix: &str) -> Scope<'_> {
        Scope {
            store: self,
            prefix: prefix.to_string(),
        }
    }

    /// Registers a new parameter. Names must be unique.
    pub fn var(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Var> {
        if self.vars.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal { std } => (0..n)
                .map(|_| std * self.rng.sample::<f64, _>(StandardNormal))
                .collect(),
            Init::KaimingNormal { fan_in } => {
                let std = (2.0 / fan_in.max(1) as f64).sqrt();
                (0..n)
                    .map(|_| std * self.rng.sample::<f64, _>(StandardNormal))
                    .collect()
            }
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        self.vars.insert(name.to_string(), var.clone());
        Ok(var)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    /// All variables whose name starts with `prefix`, in name order.
    pub fn vars_with_prefix(&self, prefix: &str) -> Vec<Var> {
        self.vars
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.clone())
            .collect()
    }

    pub fn all_vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    /// Flat f32 snapshot of every parameter, keyed by name.
    pub fn snapshot(&self) -> Result<BTreeMap<String, (Vec<usize>, Vec<f32>)>> {
        let mut out = BTreeMap::new();
        for (name, var) in &self.vars {
            let t = var.as_tensor();
            let data = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
            out.insert(name.clone(), (t.dims().to_vec(), data));
        }
        Ok(out)
    }

    /// Overwrites parameters from a snapshot. Every parameter must be present
    /// with a matching shape; extra entries are rejected.
    pub fn load_snapshot(&self, snap: &BTreeMap<String, (Vec<usize>, Vec<f32>)>) -> Result<()> {
        for name in snap.keys() {
            if !self.vars.contains_key(name) {
                return Err(Error::Checkpoint(format!("unexpected parameter `{name}`")));
            }
        }
        let mut staged = Vec::with_capacity(self.vars.len());
        for (name, var) in &self.vars {
            let (shape, data) = snap
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
            if shape.as_slice() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch for `{name}`: file {:?}, model {:?}",
                    shape,
                    var.dims()
                )));
            }
            let t = Tensor::from_vec(data.clone(), shape.as_slice(), &self.device)?
                .to_dtype(self.dtype)?;
            staged.push((var, t));
        }
        for (var, t) in staged {
            var.set(&t)?;
        }
        Ok(())
    }
}

pub struct Scope<'a> {
    store: &'a mut ParamStore,
    prefix: String,
}

impl Scope<'_> {
    pub fn var(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Var> {
        let full = format!("{}.{}", self.prefix, name);
        self.store.var(&full, shape, init)
    }

    pub fn sub(&mut self, name: &str) -> Scope<'_> {
        Scope {
            prefix: format!("{}.{}", self.prefix, name),
            store: self.store,
        }
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn device(&self) -> Device {
        self.store.device.clone()
    }
}

#[derive(Clone, Copy)]
struct Im2Col {
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
}

#[derive(Clone, Copy)]
struct ConvGeom {
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
}

impl Im2Col {
    fn geom(&self, dims: &[usize]) -> candle_core::Result<ConvGeom> {
        let &[b, c, h, w] = dims else {
            candle_core::bail!("im2col expects a rank-4 input, got {dims:?}")
        };
        if h + 2 * self.pad < self.kh || w + 2 * self.pad < self.kw {
            candle_core::bail!("kernel larger than padded input {dims:?}")
        }
        Ok(ConvGeom {
            b,
            c,
            h,
            w,
            ho: (h + 2 * self.pad - self.kh) / self.stride + 1,
            wo: (w + 2 * self.pad - self.kw) / self.stride + 1,
        })
    }

    /// Output columns `[lo, hi)` whose tap `kx` lands inside the input row.
    #[inline]
    fn valid_cols(&self, g: &ConvGeom, kx: usize) -> (usize, usize) {
        let lo = if self.pad > kx { (self.pad - kx).div_ceil(self.stride) } else { 0 };
        let hi = if g.w + self.pad > kx { ((g.w - 1 + self.pad - kx) / self.stride + 1).min(g.wo) } else { 0 };
        (lo, hi.max(lo))
    }

    /// Visits every in-bounds `(column offset, plane offset, run length)`;
    /// runs are contiguous in both buffers when the stride is 1.
    fn for_each_run(&self, g: &ConvGeom, mut f: impl FnMut(usize, usize, usize)) {
        let (kk, hw) = (self.kh * self.kw, g.ho * g.wo);
        for c in 0..g.b * g.c {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * kk + ky * self.kw + kx) * hw;
                    let (lo, hi) = self.valid_cols(g, kx);
                    if lo >= hi {
                        continue;
                    }
                    for oy in 0..g.ho {
                        let Some(y) = (oy * self.stride + ky).checked_sub(self.pad) else { continue };
                        if y >= g.h {
                            continue;
                        }
                        let x0 = lo * self.stride + kx - self.pad;
                        f(row + oy * g.wo + lo, c * g.h * g.w + y * g.w + x0, hi - lo);
                    }
                }
            }
        }
    }

    /// `(B, C, H, W)` to `(B, C*kh*kw, Ho*Wo)`, rows ordered `(c, ky, kx)`.
    fn unfold<T: WithDType>(&self, x: &[T], g: &ConvGeom) -> Vec<T> {
        let mut out = vec![T::from_f64(0.0); g.b * g.c * self.kh * self.kw * g.ho * g.wo];
        let s = self.stride;
        self.for_each_run(g, |dst, src, n| {
            if s == 1 {
                out[dst..dst + n].copy_from_slice(&x[src..src + n]);
            } else {
                for i in 0..n {
                    out[dst + i] = x[src + i * s];
                }
            }
        });
        out
    }

    /// Adjoint of [`Self::unfold`]: scatter-adds columns back into planes.
    fn fold<T: WithDType>(&self, cols: &[T], g: &ConvGeom) -> Vec<T> {
        let mut out = vec![T::from_f64(0.0); g.b * g.c * g.h * g.w];
        let s = self.stride;
        self.for_each_run(g, |dst, src, n| {
            for i in 0..n {
                out[src + i * s] += cols[dst + i];
            }
        });
        out
    }
}

fn contiguous_slice<'a, T>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => candle_core::bail!("im2col input must be contiguous"),
    }
}

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.geom(l.dims())?;
        let shape = Shape::from((g.b, g.c * self.kh * self.kw, g.ho * g.wo));
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(self.unfold(contiguous_slice(v, l)?, &g)),
            CpuStorage::F64(v) => CpuStorage::F64(self.unfold(contiguous_slice(v, l)?, &g)),
            _ => candle_core::bail!("im2col supports f32 and f64"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let g = self.geom(arg.dims())?;
        let grad = grad_res.contiguous()?;
        let folded = match grad.dtype() {
            DType::F32 => Tensor::from_vec(self.fold(&grad.flatten_all()?.to_vec1::<f32>()?, &g), arg.shape(), arg.device())?,
            DType::F64 => Tensor::from_vec(self.fold(&grad.flatten_all()?.to_vec1::<f64>()?, &g), arg.shape(), arg.device())?,
            dt => candle_core::bail!("im2col backward does not support {dt:?}"),
        };
        Ok(Some(folded))
    }
}

/// Zero-padded 2-D cross-correlation of `x` `(B, C, H, W)` with `w`
/// `(Co, C, kh, kw)`: patch extraction followed by one matrix product. On
/// CPU this is several times faster than the direct kernels, forward and
/// backward.
pub fn conv2d(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let (b, c, _, _) = x.dims4()?;
    let (co, ci, kh, kw) = w.dims4()?;
    if ci != c || stride == 0 {
        return Err(Error::Shape(format!("conv of {:?} with kernel {:?}", x.dims(), w.dims())));
    }
    let op = Im2Col { kh, kw, stride, pad };
    let g = op.geom(x.dims())?;
    let cols = x.contiguous()?.apply_op1(op)?;
    let wm = w.reshape((co, c * kh * kw))?;
    Ok(wm.broadcast_matmul(&cols)?.reshape((b, co, g.ho, g.wo))?)
}

/// 2-D convolution with bias, square kernel, "same"-style padding.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Var,
    pub bias: Var,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn new(
        scope: &mut Scope<'_>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<Self> {
        let mut s = scope.sub(name);
        let weight = s.var(
            "weight",
            &[c_out, c_in, kernel, kernel],
            Init::KaimingNormal {
                fan_in: c_in * kernel * kernel,
            },
        )?;
        let bias = s.var("bias", &[c_out], Init::Zeros)?;
        Ok(Self {
            weight,
            bias,
            stride,
            padding: kernel / 2,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = conv2d(x, self.weight.as_tensor(), self.stride, self.padding)?;
        let c = self.bias.dim(0)?;
        Ok(y.broadcast_add(&self.bias.as_tensor().reshape((1, c, 1, 1))?)?)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Var,
    pub bias: Var,
}

impl Linear {
    pub fn new(scope: &mut Scope<'_>, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        Self::with_init(scope, name, d_in, d_out, Init::KaimingNormal { fan_in: d_in })
    }

    /// Xavier-style scale, for layers not followed by a rectifier.
    pub fn new_plain(scope: &mut Scope<'_>, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        let std = (1.0 / d_in.max(1) as f64).sqrt();
        Self::with_init(scope, name, d_in, d_out, Init::Normal { std })
    }

    pub fn zeros(scope: &mut Scope<'_>, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        Self::with_init(scope, name, d_in, d_out, Init::Zeros)
    }

    fn with_init(
        scope: &mut Scope<'_>,
        name: &str,
        d_in: usize,
        d_out: usize,
        init: Init,
    ) -> Result<Self> {
        let mut s = scope.sub(name);
        let weight = s.var("weight", &[d_out, d_in], init)?;
        let bias = s.var("bias", &[d_out], Init::Zeros)?;
        Ok(Self { weight, bias })
    }

    /// Applies to the last dimension of `x`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.broadcast_matmul(&self.weight.as_tensor().t()?)?;
        Ok(y.broadcast_add(self.bias.as_tensor())?)
    }
}

/// Layer normalisation over the last dimension with learned affine.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Var,
    pub beta: Var,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(scope: &mut Scope<'_>, name: &str, dim: usize) -> Result<Self> {
        let mut s = scope.sub(name);
        Ok(Self {
            gamma: s.var("gamma", &[dim], Init::Ones)?,
            beta: s.var("beta", &[dim], Init::Zeros)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let last = x.rank() - 1;
        let mean = x.mean_keepdim(last)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(last)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed
            .broadcast_mul(self.gamma.as_tensor())?
            .broadcast_add(self.beta.as_tensor())?)
    }
}

/// Leaky rectifier `max(0, z) + slope * min(0, z)`.
pub fn leaky(z: &Tensor, slope: f64) -> Result<Tensor> {
    let pos = z.relu()?;
    if slope == 0.0 {
        return Ok(pos);
    }
    let neg = z.neg()?.relu()?;
    Ok((pos - (neg * slope)?)?)
}

/// Nearest-neighbour 2x upsampling of an NCHW tensor.
///
/// Built from a broadcast rather than `upsample_nearest2d`, whose backward
/// replaces the gradient already accumulated on its input instead of adding
/// to it. That loses gradient whenever the input has another consumer.
pub fn upsample2(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x
        .reshape((b, c, h, 1, w, 1))?
        .broadcast_as((b, c, h, 2, w, 2))?
        .reshape((b, c, 2 * h, 2 * w))?)
}

/// 2x average pooling of an NCHW tensor.
pub fn downsample2(x: &Tensor) -> Result<Tensor> {
    Ok(x.avg_pool2d(2)?)
}

/// Frozen (non-trainable) convolution used by the fixed feature networks.
#[derive(Debug, Clone)]
pub struct FrozenConv {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl FrozenConv {
    pub fn random(
        rng: &mut ChaCha8Rng,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        dtype: DType,
    ) -> Result<Self> {
        let n = c_out * c_in * kernel * kernel;
        let std = (2.0 / (c_in * kernel * kernel) as f64).sqrt();
        let w: Vec<f64> = (0..n)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let b: Vec<f64> = (0..c_out)
            .map(|_| 0.1 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Ok(Self {
            weight: Tensor::from_vec(w, (c_out, c_in, kernel, kernel), &Device::Cpu)?
                .to_dtype(dtype)?,
            bias: Tensor::from_vec(b, c_out, &Device::Cpu)?.to_dtype(dtype)?,
            stride,
            padding: kernel / 2,
        })
    }

    pub fn from_arrays(weight: Tensor, bias: Tensor, stride: usize) -> Result<Self> {
        let k = weight.dims4()?.3;
        Ok(Self {
            weight,
            bias,
            stride,
            padding: k / 2,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = if x.dtype() != self.weight.dtype() {
            x.to_dtype(self.weight.dtype())?
        } else {
            x.clone()
        };
        let y = conv2d(&x, &self.weight, self.stride, self.padding)?;
        let c = self.bias.dim(0)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?)
    }
}
