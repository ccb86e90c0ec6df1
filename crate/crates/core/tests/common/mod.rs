//! Shared oracles and fixtures for the integration tests and the acceptance
//! run. Each test target uses a different subset.
#![allow(dead_code)]

pub mod checks;

use candle_core::{DType, Device, Tensor, Var};
use devgest::deviation::StageOneConfig;
use devgest::encoder::EncoderConfig;
use devgest::nn::ParamStore;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Central-difference step for 64-bit checks.
pub const FD_STEP: f64 = 1e-6;

/// Gradients smaller than this are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy)]
pub struct GradReport {
    pub max_rel: f64,
    pub checked: usize,
}

impl GradReport {
    pub fn merge(self, other: GradReport) -> GradReport {
        GradReport {
            max_rel: self.max_rel.max(other.max_rel),
            checked: self.checked + other.checked,
        }
    }
}

pub fn normal(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

pub fn var(t: Tensor) -> Var {
    Var::from_tensor(&t).unwrap()
}

/// `sum(x * r)` for a fixed Gaussian `r`, so every output element
/// contributes with a distinct weight.
pub fn project(x: &Tensor, seed: u64) -> devgest::Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = normal(&mut rng, x.dims(), 1.0).to_dtype(x.dtype())?;
    Ok(x.mul(&r)?.sum_all()?)
}

fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

/// Compares the backprop gradient of the scalar `f` with respect to each of
/// `vars` against central differences. At most `per_var` randomly chosen
/// entries of each variable are probed.
pub fn grad_check(vars: &[Var], per_var: usize, seed: u64, f: impl Fn() -> devgest::Result<Tensor>) -> GradReport {
    let loss = f().unwrap();
    let grads = loss.backward().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_rel = 0f64;
    let mut checked = 0;
    for v in vars {
        let shape = v.shape().clone();
        let base: Vec<f64> = v.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let analytic: Vec<f64> = match grads.get(v.as_tensor()) {
            Some(g) => g.flatten_all().unwrap().to_vec1::<f64>().unwrap(),
            None => vec![0.0; base.len()],
        };
        let picks: Vec<usize> = if base.len() <= per_var {
            (0..base.len()).collect()
        } else {
            (0..per_var).map(|_| rng.random_range(0..base.len())).collect()
        };
        for i in picks {
            let probe = |delta: f64| {
                let mut p = base.clone();
                p[i] += delta;
                v.set(&Tensor::from_vec(p, &shape, &Device::Cpu).unwrap()).unwrap();
                scalar(&f().unwrap())
            };
            let numeric = (probe(FD_STEP) - probe(-FD_STEP)) / (2.0 * FD_STEP);
            let a = analytic[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            max_rel = max_rel.max(rel);
            checked += 1;
        }
        v.set(&Tensor::from_vec(base, &shape, &Device::Cpu).unwrap()).unwrap();
    }
    GradReport { max_rel, checked }
}

/// Stage-1 model small enough for exhaustive 64-bit checks.
pub fn tiny_stage_one(size: usize) -> StageOneConfig {
    StageOneConfig {
        height: size,
        width: size,
        encoder: EncoderConfig {
            depth: 2,
            base_width: 3,
            ..Default::default()
        },
        k: 5,
        regions: 2,
        pose_hidden: 6,
        lpe_base_width: 2,
        ..Default::default()
    }
}

/// Replaces every parameter by a Gaussian draw so that no path is
/// degenerate (the pose head, for one, starts at zero).
pub fn randomize(store: &ParamStore, seed: u64, scale: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, v) in store.iter() {
        let t = normal(&mut rng, v.dims(), scale).to_dtype(v.dtype()).unwrap();
        v.set(&t).unwrap();
    }
}
