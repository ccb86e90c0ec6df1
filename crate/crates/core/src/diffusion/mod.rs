//! Latent motion diffusion: schedules, the conditional denoiser, the
//! motion losses, deterministic sampling and autoregressive rollout.

pub mod denoiser;
pub mod schedule;

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub use denoiser::{Condition, Denoiser, DenoiserConfig, PREV_FRAMES, STAGE2_PREFIX};
pub use schedule::{q_sample, q_sample_batch, q_sample_with, DiffusionSchedule, ScheduleKind};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MotionLossWeights {
    pub vel: f64,
    pub acc: f64,
}

impl Default for MotionLossWeights {
    fn default() -> Self {
        Self { vel: 1.0, acc: 1.0 }
    }
}

/// Components of the motion loss; `total = mf + vel * l_vel + acc * l_acc`.
#[derive(Debug, Clone)]
pub struct MotionLoss {
    pub mf: Tensor,
    pub vel: Tensor,
    pub acc: Tensor,
    pub total: Tensor,
}

/// First temporal difference along axis 1 of `(B, M, K)`.
fn diff(x: &Tensor) -> Result<Tensor> {
    let m = x.dim(1)?;
    Ok((x.narrow(1, 1, m - 1)? - x.narrow(1, 0, m - 1)?)?)
}

/// Mean squared error on positions, velocities and accelerations.
pub fn diffusion_loss(pred: &Tensor, target: &Tensor, w: &MotionLossWeights) -> Result<MotionLoss> {
    if pred.dims() != target.dims() {
        return Err(Error::Shape(format!("prediction {:?} vs target {:?}", pred.dims(), target.dims())));
    }
    let (_, m, _) = pred.dims3()?;
    if m < 3 {
        return Err(Error::Shape(format!("window of {m} frames has no acceleration")));
    }
    let mf = (pred - target)?.sqr()?.mean_all()?;
    let (vp, vt) = (diff(pred)?, diff(target)?);
    let vel = (&vp - &vt)?.sqr()?.mean_all()?;
    let acc = (diff(&vp)? - diff(&vt)?)?.sqr()?.mean_all()?;
    let total = ((&mf + (&vel * w.vel)?)? + (&acc * w.acc)?)?;
    Ok(MotionLoss { mf, vel, acc, total })
}

/// Per-dimension standardisation of motion and audio features, fitted on
/// the training set and stored with the stage-2 checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mf_mean: Vec<f64>,
    pub mf_std: Vec<f64>,
    pub audio_mean: Vec<f64>,
    pub audio_std: Vec<f64>,
}

fn column_stats(rows: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>)> {
    let first = rows.first().ok_or_else(|| Error::Invalid("no rows to fit".into()))?;
    let d = first.len();
    let n = rows.len() as f64;
    let mut mean = vec![0.0; d];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v / n;
        }
    }
    let mut var = vec![0.0; d];
    for r in rows {
        for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
            *s += (v - m).powi(2) / n;
        }
    }
    // Floor keeps constant dimensions finite after scaling.
    let std = var.into_iter().map(|v| v.sqrt().max(1e-3)).collect();
    Ok((mean, std))
}

impl Normalizer {
    pub fn fit(mf_rows: &[Vec<f64>], audio_rows: &[Vec<f64>]) -> Result<Self> {
        let (mf_mean, mf_std) = column_stats(mf_rows)?;
        let (audio_mean, audio_std) = column_stats(audio_rows)?;
        Ok(Self {
            mf_mean,
            mf_std,
            audio_mean,
            audio_std,
        })
    }

    pub fn identity(k: usize, a: usize) -> Self {
        Self {
            mf_mean: vec![0.0; k],
            mf_std: vec![1.0; k],
            audio_mean: vec![0.0; a],
            audio_std: vec![1.0; a],
        }
    }

    fn affine(x: &Tensor, mean: &[f64], std: &[f64], forward: bool) -> Result<Tensor> {
        let d = *x.dims().last().unwrap_or(&0);
        if d != mean.len() {
            return Err(Error::Shape(format!("feature dim {d}, normaliser has {}", mean.len())));
        }
        let m = Tensor::from_vec(mean.to_vec(), d, x.device())?.to_dtype(x.dtype())?;
        let s = Tensor::from_vec(std.to_vec(), d, x.device())?.to_dtype(x.dtype())?;
        Ok(if forward {
            x.broadcast_sub(&m)?.broadcast_div(&s)?
        } else {
            x.broadcast_mul(&s)?.broadcast_add(&m)?
        })
    }

    pub fn norm_mf(&self, x: &Tensor) -> Result<Tensor> {
        Self::affine(x, &self.mf_mean, &self.mf_std, true)
    }

    pub fn denorm_mf(&self, x: &Tensor) -> Result<Tensor> {
        Self::affine(x, &self.mf_mean, &self.mf_std, false)
    }

    pub fn norm_audio(&self, x: &Tensor) -> Result<Tensor> {
        Self::affine(x, &self.audio_mean, &self.audio_std, true)
    }
}

/// Standard normal tensor drawn from `rng`.
pub fn gaussian(rng: &mut ChaCha8Rng, shape: &[usize], dtype: DType) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Ok(Tensor::from_vec(v, shape, &Device::Cpu)?.to_dtype(dtype)?)
}

/// Deterministic strided sampler (DDIM with zero stochasticity): start from
/// seeded noise, predict `x0`, re-noise to the next level along the
/// predicted direction, and return the final clean prediction.
pub fn sample(net: &Denoiser, cond: &Condition, schedule: &DiffusionSchedule, steps: usize, seed: u64) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_with_rng(net, cond, schedule, steps, &mut rng)
}

fn sample_with_rng(net: &Denoiser, cond: &Condition, schedule: &DiffusionSchedule, steps: usize, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let cfg = net.config();
    let b = cond.source_mf.dim(0)?;
    let dtype = cond.source_mf.dtype();
    let mut x = gaussian(rng, &[b, cfg.window, cfg.k], dtype)?;
    let ts = schedule.sampling_steps(steps);
    let mut x0 = x.clone();
    for (i, &t) in ts.iter().enumerate() {
        x0 = net.predict_clean(&x, &vec![t; b], cond)?;
        let Some(&t_next) = ts.get(i + 1) else { break };
        let a = schedule.alpha_bar(t)?;
        let a_next = schedule.alpha_bar(t_next)?;
        let eps = ((&x - (&x0 * a.sqrt())?)? / (1.0 - a).sqrt())?;
        x = ((&x0 * a_next.sqrt())? + (eps * (1.0 - a_next).sqrt())?)?;
    }
    Ok(x0)
}

/// Generates a motion sequence `(T, K)` for per-frame audio `(T, A)` window
/// by window. Window `n` is conditioned on the last four frames of window
/// `n - 1`; the first window uses the source feature repeated four times.
/// The final window is padded by repeating the last audio row and trimmed.
pub fn rollout(net: &Denoiser, audio: &Tensor, source_mf: &Tensor, schedule: &DiffusionSchedule, steps: usize, seed: u64) -> Result<Tensor> {
    let cfg = net.config();
    let (t_frames, a) = audio.dims2()?;
    let m = cfg.window;
    if t_frames < m {
        return Err(Error::Invalid(format!("{t_frames} audio frames is shorter than one window of {m}")));
    }
    if a != cfg.audio_dim || source_mf.dims() != [cfg.k] {
        return Err(Error::Shape("audio or source feature size does not match the denoiser".into()));
    }
    let windows = t_frames.div_ceil(m);
    let padded_len = windows * m;
    let audio = if padded_len > t_frames {
        let last = audio.narrow(0, t_frames - 1, 1)?.repeat((padded_len - t_frames, 1))?;
        Tensor::cat(&[audio.clone(), last], 0)?
    } else {
        audio.clone()
    };
    let source = source_mf.unsqueeze(0)?;
    let mut prev4 = source.unsqueeze(1)?.repeat((1, PREV_FRAMES, 1))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(windows);
    for w in 0..windows {
        let cond = Condition {
            audio: audio.narrow(0, w * m, m)?.unsqueeze(0)?,
            prev4: prev4.clone(),
            source_mf: source.clone(),
        };
        let seq = sample_with_rng(net, &cond, schedule, steps, &mut rng)?;
        prev4 = if m >= PREV_FRAMES {
            seq.narrow(1, m - PREV_FRAMES, PREV_FRAMES)?
        } else {
            Tensor::cat(&[prev4.narrow(1, m, PREV_FRAMES - m)?, seq.clone()], 1)?
        };
        out.push(seq.squeeze(0)?);
    }
    Ok(Tensor::cat(&out, 0)?.narrow(0, 0, t_frames)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(v: &[f64]) -> Tensor {
        Tensor::from_vec(v.to_vec(), (1, v.len(), 1), &Device::Cpu).unwrap()
    }

    fn s(t: &Tensor) -> f64 {
        t.to_scalar::<f64>().unwrap()
    }

    #[test]
    fn hand_computed_motion_loss() {
        let l = diffusion_loss(&seq(&[0.0, 2.0, 4.0]), &seq(&[0.0, 1.0, 2.0]), &MotionLossWeights::default()).unwrap();
        assert!((s(&l.mf) - 5.0 / 3.0).abs() < 1e-9);
        assert!((s(&l.vel) - 1.0).abs() < 1e-9);
        assert!(s(&l.acc).abs() < 1e-9);
    }

    #[test]
    fn constant_offset_only_hits_position_term() {
        let l = diffusion_loss(&seq(&[1.5, 0.5, 2.5, 3.5]), &seq(&[1.0, 0.0, 2.0, 3.0]), &MotionLossWeights::default()).unwrap();
        assert!((s(&l.mf) - 0.25).abs() < 1e-12);
        assert_eq!(s(&l.vel), 0.0);
        assert_eq!(s(&l.acc), 0.0);
    }

    #[test]
    fn short_window_rejected() {
        assert!(diffusion_loss(&seq(&[0.0, 1.0]), &seq(&[0.0, 1.0]), &MotionLossWeights::default()).is_err());
    }

    #[test]
    fn normalizer_roundtrip() {
        let rows = vec![vec![1.0, 10.0], vec![3.0, 10.0], vec![5.0, 10.0]];
        let n = Normalizer::fit(&rows, &rows).unwrap();
        let x = Tensor::from_vec(vec![3.0f64, 10.0], 2, &Device::Cpu).unwrap();
        let z = n.norm_mf(&x).unwrap();
        assert_eq!(z.to_vec1::<f64>().unwrap(), vec![0.0, 0.0]);
        let back = n.denorm_mf(&z).unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(back, vec![3.0, 10.0]);
    }
}
