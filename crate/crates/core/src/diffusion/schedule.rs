//! Noise schedules and forward noising.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    #[default]
    Cosine,
    Linear,
}

/// Cumulative signal levels `alpha_bar[t - 1]` for `t = 1..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    alpha_bar: Vec<f64>,
    kind: ScheduleKind,
}

const COSINE_OFFSET: f64 = 0.008;
const MAX_BETA: f64 = 0.999;

impl DiffusionSchedule {
    pub fn new(steps: usize, kind: ScheduleKind) -> Result<Self> {
        if steps < 2 {
            return Err(Error::Config(format!("diffusion needs at least 2 steps, got {steps}")));
        }
        let betas: Vec<f64> = match kind {
            ScheduleKind::Cosine => {
                let f = |t: usize| {
                    let x = (t as f64 / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
                    (x * std::f64::consts::FRAC_PI_2).cos().powi(2)
                };
                (1..=steps).map(|t| (1.0 - f(t) / f(t - 1)).min(MAX_BETA)).collect()
            }
            ScheduleKind::Linear => {
                let scale = 1000.0 / steps as f64;
                let (lo, hi) = (scale * 1e-4, (scale * 0.02).min(MAX_BETA));
                (0..steps)
                    .map(|i| lo + (hi - lo) * i as f64 / (steps - 1) as f64)
                    .collect()
            }
        };
        let mut alpha_bar = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for b in betas {
            acc *= 1.0 - b;
            alpha_bar.push(acc);
        }
        if alpha_bar.windows(2).any(|w| !(w[1] < w[0])) || alpha_bar.iter().any(|a| !(*a > 0.0)) {
            return Err(Error::Numerical("schedule is not strictly decreasing and positive".into()));
        }
        Ok(Self { alpha_bar, kind })
    }

    pub fn steps(&self) -> usize {
        self.alpha_bar.len()
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// `alpha_bar_t` for `1 <= t <= T`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        if t == 0 || t > self.alpha_bar.len() {
            return Err(Error::OutOfRange {
                index: t,
                len: self.alpha_bar.len(),
            });
        }
        Ok(self.alpha_bar[t - 1])
    }

    pub fn table(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// Evenly spaced descending timesteps from `T` to `1`.
    pub fn sampling_steps(&self, n: usize) -> Vec<usize> {
        let n = n.clamp(1, self.steps());
        let t = self.steps();
        let mut v: Vec<usize> = (0..n)
            .map(|i| {
                let frac = if n > 1 { i as f64 / (n - 1) as f64 } else { 0.0 };
                (t as f64 - frac * (t - 1) as f64).round() as usize
            })
            .collect();
        v.dedup();
        v
    }
}

/// `x_t = sqrt(a) x0 + sqrt(1 - a) eps` with an explicit level `a`.
pub fn q_sample_with(x0: &Tensor, eps: &Tensor, alpha_bar: f64) -> Result<Tensor> {
    if x0.dims() != eps.dims() {
        return Err(Error::Shape(format!("x0 {:?} vs eps {:?}", x0.dims(), eps.dims())));
    }
    if !(0.0..=1.0).contains(&alpha_bar) {
        return Err(Error::Invalid(format!("alpha_bar {alpha_bar} outside [0, 1]")));
    }
    if alpha_bar == 1.0 {
        return Ok(x0.clone());
    }
    if alpha_bar == 0.0 {
        return Ok(eps.clone());
    }
    Ok(((x0 * alpha_bar.sqrt())? + (eps * (1.0 - alpha_bar).sqrt())?)?)
}

/// Forward noising at timestep `t` of `schedule`.
pub fn q_sample(x0: &Tensor, t: usize, eps: &Tensor, schedule: &DiffusionSchedule) -> Result<Tensor> {
    q_sample_with(x0, eps, schedule.alpha_bar(t)?)
}

/// Per-sample forward noising: `ts[b]` is the timestep of batch row `b`.
pub fn q_sample_batch(x0: &Tensor, ts: &[usize], eps: &Tensor, schedule: &DiffusionSchedule) -> Result<Tensor> {
    let b = x0.dim(0)?;
    if ts.len() != b || x0.dims() != eps.dims() {
        return Err(Error::Shape("timesteps/noise do not match batch".into()));
    }
    let mut sa = Vec::with_capacity(b);
    let mut sn = Vec::with_capacity(b);
    for &t in ts {
        let a = schedule.alpha_bar(t)?;
        sa.push(a.sqrt());
        sn.push((1.0 - a).sqrt());
    }
    let mut shape = vec![b];
    shape.extend(std::iter::repeat_n(1, x0.rank() - 1));
    let sa = Tensor::from_vec(sa, shape.as_slice(), x0.device())?.to_dtype(x0.dtype())?;
    let sn = Tensor::from_vec(sn, shape.as_slice(), x0.device())?.to_dtype(x0.dtype())?;
    Ok((x0.broadcast_mul(&sa)? + eps.broadcast_mul(&sn)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_first_level_close_to_one() {
        let s = DiffusionSchedule::new(1000, ScheduleKind::Cosine).unwrap();
        assert!(s.alpha_bar(1).unwrap() > 0.999);
        assert!(s.alpha_bar(1000).unwrap() < 1e-3);
    }

    #[test]
    fn minimal_schedule_is_valid() {
        for kind in [ScheduleKind::Cosine, ScheduleKind::Linear] {
            let s = DiffusionSchedule::new(2, kind).unwrap();
            assert!(s.alpha_bar(2).unwrap() < s.alpha_bar(1).unwrap());
        }
        assert!(DiffusionSchedule::new(1, ScheduleKind::Cosine).is_err());
    }

    #[test]
    fn timestep_bounds_checked() {
        let s = DiffusionSchedule::new(10, ScheduleKind::Cosine).unwrap();
        assert!(s.alpha_bar(0).is_err() && s.alpha_bar(11).is_err());
    }

    #[test]
    fn sampling_steps_descend_to_one() {
        let s = DiffusionSchedule::new(50, ScheduleKind::Cosine).unwrap();
        let v = s.sampling_steps(10);
        assert_eq!(v.first(), Some(&50));
        assert_eq!(v.last(), Some(&1));
        assert!(v.windows(2).all(|w| w[1] < w[0]));
    }
}
