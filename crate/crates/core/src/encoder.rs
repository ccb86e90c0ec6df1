//! Image encoder producing the deepest feature `F` with the per-level maps
//! `phi`, and the per-channel feature enhancer.

use candle_core::{DType, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::media_io::image::check_encodable_size;
use crate::nn::{leaky, Conv2d, Init, Scope};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub depth: usize,
    pub base_width: usize,
    /// Normalise with one mean/std over all channels instead of per channel.
    pub scalar_norm: bool,
    pub epsilon: f64,
    pub slope: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            base_width: 16,
            scalar_norm: false,
            epsilon: 1e-5,
            slope: 0.2,
        }
    }
}

impl EncoderConfig {
    pub fn widths(&self) -> Vec<usize> {
        (0..self.depth).map(|i| self.base_width << i).collect()
    }
}

/// `phi[i]` has spatial size `H / 2^(i+1)`; `f` is the deepest map.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub f: Tensor,
    pub phi: Vec<Tensor>,
}

impl FeaturePyramid {
    pub fn depth(&self) -> usize {
        self.phi.len()
    }
}

#[derive(Debug, Clone)]
struct EncoderLevel {
    down: Conv2d,
    refine: Conv2d,
}

#[derive(Debug, Clone)]
pub struct ImageEncoder {
    levels: Vec<EncoderLevel>,
    cfg: EncoderConfig,
}

impl ImageEncoder {
    pub fn new(scope: &mut Scope<'_>, cfg: &EncoderConfig) -> Result<Self> {
        if cfg.depth == 0 || cfg.base_width == 0 {
            return Err(Error::Config("encoder depth and width must be positive".into()));
        }
        let mut levels = Vec::with_capacity(cfg.depth);
        let mut c_in = 3;
        for (i, c) in cfg.widths().into_iter().enumerate() {
            let mut s = scope.sub(&format!("level{i}"));
            levels.push(EncoderLevel {
                down: Conv2d::new(&mut s, "down", c_in, c, 3, 2)?,
                refine: Conv2d::new(&mut s, "refine", c, c, 3, 1)?,
            });
            c_in = c;
        }
        Ok(Self {
            levels,
            cfg: cfg.clone(),
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    /// Encodes a `(B, 3, H, W)` batch.
    pub fn encode(&self, images: &Tensor) -> Result<FeaturePyramid> {
        let (_, c, h, w) = images.dims4()?;
        if c != 3 {
            return Err(Error::Shape(format!("expected 3 input channels, got {c}")));
        }
        check_encodable_size(h, w, self.cfg.depth)?;
        let mut x = images.clone();
        let mut phi = Vec::with_capacity(self.levels.len());
        for level in &self.levels {
            x = leaky(&level.down.forward(&x)?, self.cfg.slope)?;
            x = leaky(&level.refine.forward(&x)?, self.cfg.slope)?;
            phi.push(x.clone());
        }
        Ok(FeaturePyramid { f: x, phi })
    }
}

/// Scale/bias of the enhancer for one feature level.
#[derive(Debug, Clone)]
pub struct EnhancerParams {
    pub gamma: Var,
    pub beta: Var,
    pub epsilon: f64,
}

impl EnhancerParams {
    pub fn new(scope: &mut Scope<'_>, channels: usize, epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0) {
            return Err(Error::Config("enhancer epsilon must be positive".into()));
        }
        Ok(Self {
            gamma: scope.var("gamma", &[channels], Init::Ones)?,
            beta: scope.var("beta", &[channels], Init::Zeros)?,
            epsilon,
        })
    }

    pub fn from_values(gamma: &[f64], beta: &[f64], epsilon: f64, dtype: DType) -> Result<Self> {
        if gamma.len() != beta.len() {
            return Err(Error::Shape("gamma and beta lengths differ".into()));
        }
        let dev = candle_core::Device::Cpu;
        let g = Tensor::from_vec(gamma.to_vec(), gamma.len(), &dev)?.to_dtype(dtype)?;
        let b = Tensor::from_vec(beta.to_vec(), beta.len(), &dev)?.to_dtype(dtype)?;
        Ok(Self {
            gamma: Var::from_tensor(&g)?,
            beta: Var::from_tensor(&b)?,
            epsilon,
        })
    }
}

/// `F' = (F - mean) / sqrt(var + eps) * gamma + beta`, statistics per sample
/// and per channel over spatial positions (or over channels and positions
/// when `scalar` is set). Variance is the population variance.
pub fn enhance_features(f: &Tensor, params: &EnhancerParams, scalar: bool) -> Result<Tensor> {
    let (b, c, h, w) = f.dims4()?;
    if params.gamma.dim(0)? != c || params.beta.dim(0)? != c {
        return Err(Error::Shape(format!(
            "enhancer has {} channels, features have {c}",
            params.gamma.dim(0)?
        )));
    }
    let flat = if scalar {
        f.reshape((b, 1, c * h * w))?
    } else {
        f.reshape((b, c, h * w))?
    };
    let mean = flat.mean_keepdim(2)?;
    let centered = flat.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(2)?;
    let normed = centered
        .broadcast_div(&(var + params.epsilon)?.sqrt()?)?
        .reshape((b, c, h, w))?;
    let gamma = params.gamma.as_tensor().reshape((1, c, 1, 1))?;
    let beta = params.beta.as_tensor().reshape((1, c, 1, 1))?;
    Ok(normed.broadcast_mul(&gamma)?.broadcast_add(&beta)?)
}
