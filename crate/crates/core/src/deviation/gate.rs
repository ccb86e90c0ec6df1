//! Deviation maps, the tunable rectifier and the gated decoder.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use candle_core::{DType, Tensor};

use crate::error::{Error, Result};
use crate::nn::{upsample2, Conv2d, Scope};

/// `max(0, z) + c * min(0, z)`.
pub fn activation(z: &Tensor, c_lambda: f64) -> Result<Tensor> {
    if c_lambda == 1.0 {
        return Ok(z.clone());
    }
    let pos = z.relu()?;
    if c_lambda == 0.0 {
        return Ok(pos);
    }
    let neg = z.neg()?.relu()?;
    Ok((pos - (neg * c_lambda)?)?)
}

/// Pre-activation bound that keeps `sigmoid` strictly inside `(0, 1)` in the
/// working precision.
fn logit_bound(dtype: DType) -> f64 {
    match dtype {
        DType::F64 => 30.0,
        _ => 15.0,
    }
}

/// Learned 1x1 projection `(w, b)` of one decoder scale.
#[derive(Debug, Clone)]
pub struct DeviationHead {
    pub proj: Conv2d,
}

impl DeviationHead {
    pub fn new(scope: &mut Scope<'_>, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            proj: Conv2d::new(scope, name, channels, channels, 1, 1)?,
        })
    }
}

/// Counts deviation evaluations so ablations can prove the path is unused.
#[derive(Debug, Clone, Default)]
pub struct CallCounter(Arc<AtomicUsize>);

impl CallCounter {
    pub fn bump(&self) {
        self.0.fetch_add(1, Ordering::Relaxed);
    }

    pub fn get(&self) -> usize {
        self.0.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.0.store(0, Ordering::Relaxed);
    }
}

/// `delta = L * sigmoid(w * x + b)` with the 1x1 projection applied to the
/// warped features `x`. The pre-activation is clamped so that
/// `0 < delta < L` holds exactly in floating point.
pub fn compute_deviation(warped: &Tensor, head: &DeviationHead, l: f64, counter: Option<&CallCounter>) -> Result<Tensor> {
    if !(l > 0.0) || !l.is_finite() {
        return Err(Error::Config(format!("deviation scale L must be positive, got {l}")));
    }
    if let Some(c) = counter {
        c.bump();
    }
    let pre = head.proj.forward(warped)?;
    scaled_sigmoid(&pre, l)
}

/// `L * sigmoid(x)` with the strict-bounds clamp.
pub fn scaled_sigmoid(pre: &Tensor, l: f64) -> Result<Tensor> {
    let bound = logit_bound(pre.dtype());
    let s = candle_nn::ops::sigmoid(&pre.clamp(-bound, bound)?)?;
    Ok((s * l)?)
}

/// Per-scale blend weight for the gated decoder.
#[derive(Debug, Clone)]
pub enum Gate {
    Deviation(Tensor),
    /// Constant weight on the skip path (1 means skip only).
    Constant(f64),
}

/// One upsampling step `U_s`: nearest 2x, 3x3 conv, rectifier.
#[derive(Debug, Clone)]
pub struct UpBlock {
    pub conv: Conv2d,
}

impl UpBlock {
    pub fn new(scope: &mut Scope<'_>, name: &str, c_in: usize, c_out: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(scope, name, c_in, c_out, 3, 1)?,
        })
    }

    pub fn forward(&self, z: &Tensor, c_lambda: f64) -> Result<Tensor> {
        activation(&self.conv.forward(&upsample2(z)?)?, c_lambda)
    }
}

/// `z = gate * skip + (1 - gate) * up`.
pub fn blend(skip: &Tensor, up: &Tensor, gate: &Gate) -> Result<Tensor> {
    if skip.dims() != up.dims() {
        return Err(Error::Shape(format!(
            "skip {:?} and decoded {:?} differ",
            skip.dims(),
            up.dims()
        )));
    }
    match gate {
        Gate::Constant(g) if *g == 1.0 => Ok(skip.clone()),
        Gate::Constant(g) if *g == 0.0 => Ok(up.clone()),
        Gate::Constant(g) => Ok(((skip * *g)? + (up * (1.0 - *g))?)?),
        Gate::Deviation(d) => {
            let one_minus = d.affine(-1.0, 1.0)?;
            Ok((skip.mul(d)? + up.mul(&one_minus)?)?)
        }
    }
}

/// Runs the decoder from the coarsest warped map to the finest.
///
/// `skips[s]` is the warped feature at scale `s` (0 = finest) and `gates[s]`
/// its blend weight; the coarsest skip seeds the state and has no gate, so
/// `gates.len() == skips.len() - 1`. `ups[s]` maps the state at scale
/// `s + 1` to scale `s`.
pub fn gated_decode(skips: &[Tensor], gates: &[Gate], ups: &[UpBlock], c_lambda: f64) -> Result<Tensor> {
    let n = skips.len();
    if n == 0 || gates.len() + 1 != n || ups.len() + 1 != n {
        return Err(Error::Shape(format!(
            "{n} skips, {} gates, {} up blocks",
            gates.len(),
            ups.len()
        )));
    }
    let mut z = skips[n - 1].clone();
    for s in (0..n - 1).rev() {
        let up = ups[s].forward(&z, c_lambda)?;
        z = blend(&skips[s], &up, &gates[s])?;
    }
    Ok(z)
}
