//! Check bodies shared by the per-topic integration tests and the acceptance
//! run. Each returns measured values; callers decide how to report them.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use devgest::deviation::{
    activation, blend, compute_deviation, decode_flow, decode_global_flow, gated_decode, grid_sample, identity_grid,
    pixel_offset, AblationFlags, DeviationHead, Gate, LatentPoseEstimator, MaskPredictor, PoseTransform, RegionMasks,
    RegionTransforms, StageOneConfig, StageOneModel, UpBlock,
};
use devgest::diffusion::{diffusion_loss, gaussian, q_sample, q_sample_with, DiffusionSchedule, MotionLossWeights, ScheduleKind};
use devgest::encoder::{enhance_features, EncoderConfig, EnhancerParams, ImageEncoder};
use devgest::media_io::dataset::{load_clip, load_frames, Split};
use devgest::media_io::image::Image;
use devgest::media_io::synth::{generate_synthetic_dataset, SyntheticSpec};
use devgest::metrics::{diversity, frechet_distance, fgd, psnr, psnr_from_mse, ssim, GaussianStats};
use devgest::nn::{self, ParamStore};
use devgest::pipeline::{
    default_metric_nets, generate_video, load_checkpoint, report_with_model, save_checkpoint,
    stage_one_from_checkpoint, train_stage1, train_stage2, write_video, GenerateOptions, TrainConfig, TrainingData,
};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{grad_check, normal, project, randomize, tiny_stage_one, uniform, var, GradReport};

/// A measured quantity and the bound it must respect.
#[derive(Debug, Clone)]
pub struct Bound {
    pub name: &'static str,
    pub value: f64,
    pub limit: f64,
}

impl Bound {
    pub fn new(name: &'static str, value: f64, limit: f64) -> Self {
        Self { name, value, limit }
    }

    pub fn holds(&self) -> bool {
        self.value <= self.limit
    }
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    (a - b)
        .unwrap()
        .abs()
        .unwrap()
        .flatten_all()
        .unwrap()
        .to_dtype(DType::F64)
        .unwrap()
        .max(0)
        .unwrap()
        .to_scalar::<f64>()
        .unwrap()
}

// ---------------------------------------------------------------------------
// Gradients

/// Central-difference comparison for every differentiable building block of
/// the encoder and the deviation model, plus the assembled model.
pub fn gradient_suite() -> Vec<(&'static str, GradReport)> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(100);

    for (name, stride) in [("conv stride 1", 1), ("conv stride 2", 2)] {
        let x = var(normal(&mut rng, &[2, 3, 9, 9], 1.0));
        let w = var(normal(&mut rng, &[4, 3, 3, 3], 0.5));
        let r = grad_check(&[x.clone(), w.clone()], 40, 1, || project(&nn::conv2d(x.as_tensor(), w.as_tensor(), stride, 1)?, 2));
        out.push((name, r));
    }

    let x = var(normal(&mut rng, &[2, 3, 5, 5], 1.0));
    out.push(("leaky rectifier", grad_check(&[x.clone()], 60, 3, || project(&nn::leaky(x.as_tensor(), 0.2)?, 4))));

    let x = var(normal(&mut rng, &[1, 2, 4, 6], 1.0));
    out.push((
        "nearest upsample",
        grad_check(&[x.clone()], 60, 5, || project(&nn::upsample2(x.as_tensor())?, 6)),
    ));
    // The input also feeds a second consumer, so the backward must
    // accumulate rather than overwrite.
    out.push((
        "nearest upsample with a shared input",
        grad_check(&[x.clone()], 60, 5, || {
            let up = project(&nn::upsample2(x.as_tensor())?, 6)?;
            Ok((up + project(&x.as_tensor().sqr()?, 7)?)?)
        }),
    ));
    out.push((
        "average downsample",
        grad_check(&[x.clone()], 60, 7, || project(&nn::downsample2(x.as_tensor())?, 8)),
    ));

    {
        let mut store = ParamStore::new(DType::F64, 9);
        let cfg = EncoderConfig {
            depth: 2,
            base_width: 3,
            ..Default::default()
        };
        let enc = ImageEncoder::new(&mut store.scope("enc"), &cfg).unwrap();
        randomize(&store, 10, 0.4);
        let x = var(uniform(&mut rng, &[1, 3, 16, 16], 0.0, 1.0));
        let mut vars = vec![x.clone()];
        vars.extend(store.all_vars());
        let r = grad_check(&vars, 12, 11, || {
            let p = enc.encode(x.as_tensor())?;
            let mut total = project(&p.phi[0], 12)?;
            for (i, phi) in p.phi.iter().enumerate().skip(1) {
                total = (total + project(phi, 12 + i as u64)?)?;
            }
            Ok(total)
        });
        out.push(("image encoder", r));
    }

    for (name, scalar) in [("enhancer per channel", false), ("enhancer scalar", true)] {
        let mut store = ParamStore::new(DType::F64, 13);
        let params = EnhancerParams::new(&mut store.scope("enh"), 3, 1e-5).unwrap();
        randomize(&store, 14, 1.0);
        let f = var(normal(&mut rng, &[2, 3, 4, 4], 2.0));
        let vars = [f.clone(), params.gamma.clone(), params.beta.clone()];
        let r = grad_check(&vars, 40, 15, || project(&enhance_features(f.as_tensor(), &params, scalar)?, 16));
        out.push((name, r));
    }

    {
        let feats = var(normal(&mut rng, &[2, 2, 6, 7], 1.0));
        let grid = var(uniform(&mut rng, &[2, 5, 4, 2], -1.1, 1.1));
        let r = grad_check(&[feats.clone(), grid.clone()], 60, 17, || {
            project(&grid_sample(feats.as_tensor(), grid.as_tensor())?, 18)
        });
        out.push(("bilinear warp", r));
    }

    {
        let theta = var(normal(&mut rng, &[2, 2], 0.5));
        let trans = var(normal(&mut rng, &[2, 2, 2], 0.2));
        let logits = var(normal(&mut rng, &[2, 3, 6, 6], 1.0));
        let vars = [theta.clone(), trans.clone(), logits.clone()];
        let r = grad_check(&vars, 40, 19, || {
            let rt = RegionTransforms {
                theta: theta.as_tensor().clone(),
                translation: trans.as_tensor().clone(),
            };
            let masks = RegionMasks {
                masks: candle_nn::ops::softmax(logits.as_tensor(), 1)?,
            };
            project(&decode_flow(&rt, &masks)?.grid, 20)
        });
        out.push(("region flow composition", r));
        let r = grad_check(&[theta.clone(), trans.clone()], 40, 21, || {
            let rt = RegionTransforms {
                theta: theta.as_tensor().clone(),
                translation: trans.as_tensor().clone(),
            };
            project(&decode_global_flow(&rt, 6, 5)?.grid, 22)
        });
        out.push(("global flow", r));
    }

    {
        let mut store = ParamStore::new(DType::F64, 23);
        let pose = PoseTransform::new(&mut store.scope("pose"), 5, 6, 2, 0.2).unwrap();
        randomize(&store, 24, 0.5);
        let mf = var(normal(&mut rng, &[3, 5], 1.0));
        let mut vars = vec![mf.clone()];
        vars.extend(store.all_vars());
        let r = grad_check(&vars, 20, 25, || {
            let rt = pose.forward(mf.as_tensor())?;
            Ok((project(&rt.theta, 26)? + project(&rt.translation, 27)?)?)
        });
        out.push(("pose transform", r));
    }

    {
        let mut store = ParamStore::new(DType::F64, 28);
        let mp = MaskPredictor::new(&mut store.scope("mask"), 3, 2, 0.2).unwrap();
        randomize(&store, 29, 0.5);
        let feats = var(normal(&mut rng, &[2, 3, 6, 6], 1.0));
        let mut vars = vec![feats.clone()];
        vars.extend(store.all_vars());
        let r = grad_check(&vars, 20, 30, || project(&mp.forward(feats.as_tensor())?.masks, 31));
        out.push(("mask predictor", r));
    }

    {
        let mut store = ParamStore::new(DType::F64, 32);
        let lpe = LatentPoseEstimator::new(&mut store.scope("lpe"), 16, 16, 2, 2, 5, 0.2).unwrap();
        randomize(&store, 33, 0.5);
        let img = var(uniform(&mut rng, &[1, 3, 16, 16], 0.0, 1.0));
        let mut vars = vec![img.clone()];
        vars.extend(store.all_vars());
        let r = grad_check(&vars, 20, 34, || project(&lpe.forward(img.as_tensor())?, 35));
        out.push(("latent pose estimator", r));
    }

    {
        let mut store = ParamStore::new(DType::F64, 36);
        let head = DeviationHead::new(&mut store.scope("dev"), "h", 3).unwrap();
        randomize(&store, 37, 0.7);
        let warped = var(normal(&mut rng, &[2, 3, 5, 5], 1.0));
        let mut vars = vec![warped.clone()];
        vars.extend(store.all_vars());
        let r = grad_check(&vars, 40, 38, || project(&compute_deviation(warped.as_tensor(), &head, 1.5, None)?, 39));
        out.push(("deviation map", r));
    }

    let z = var(normal(&mut rng, &[2, 3, 4, 4], 1.0));
    out.push((
        "tunable rectifier",
        grad_check(&[z.clone()], 60, 40, || project(&activation(z.as_tensor(), 0.2)?, 41)),
    ));

    {
        let skip = var(normal(&mut rng, &[1, 2, 4, 4], 1.0));
        let up = var(normal(&mut rng, &[1, 2, 4, 4], 1.0));
        let d = var(uniform(&mut rng, &[1, 2, 4, 4], 0.1, 0.9));
        let vars = [skip.clone(), up.clone(), d.clone()];
        let r = grad_check(&vars, 40, 42, || {
            project(&blend(skip.as_tensor(), up.as_tensor(), &Gate::Deviation(d.as_tensor().clone()))?, 43)
        });
        out.push(("deviation blend", r));
    }

    {
        let mut store = ParamStore::new(DType::F64, 44);
        let chans = [2usize, 3, 4];
        let ups: Vec<UpBlock> = {
            let mut s = store.scope("dec");
            (0..2)
                .map(|i| UpBlock::new(&mut s, &format!("up{i}"), chans[i + 1], chans[i]).unwrap())
                .collect()
        };
        randomize(&store, 45, 0.5);
        let skips: Vec<_> = (0..3).map(|s| var(normal(&mut rng, &[1, chans[s], 8 >> s, 8 >> s], 1.0))).collect();
        let gates: Vec<_> = (0..2)
            .map(|s| var(uniform(&mut rng, &[1, chans[s], 8 >> s, 8 >> s], 0.1, 0.9)))
            .collect();
        let mut vars: Vec<_> = skips.iter().chain(&gates).cloned().collect();
        vars.extend(store.all_vars());
        let r = grad_check(&vars, 12, 46, || {
            let sk: Vec<Tensor> = skips.iter().map(|v| v.as_tensor().clone()).collect();
            let g: Vec<Gate> = gates.iter().map(|v| Gate::Deviation(v.as_tensor().clone())).collect();
            project(&gated_decode(&sk, &g, &ups, 0.2)?, 47)
        });
        out.push(("gated decoder", r));
    }

    for (name, learn_l, flags) in [
        ("assembled model", false, AblationFlags::default()),
        ("assembled model, learned deviation scale", true, AblationFlags::default()),
        (
            "assembled model, global flow",
            false,
            AblationFlags {
                disable_motion_decoder: true,
                ..Default::default()
            },
        ),
    ] {
        let cfg = StageOneConfig {
            learn_l,
            ablation: flags,
            ..tiny_stage_one(16)
        };
        let mut store = ParamStore::new(DType::F64, 48);
        let model = StageOneModel::new(&mut store, &cfg).unwrap();
        randomize(&store, 49, 0.3);
        let src = var(uniform(&mut rng, &[2, 3, 16, 16], 0.0, 1.0));
        let drv = var(uniform(&mut rng, &[2, 3, 16, 16], 0.0, 1.0));
        let mut vars = vec![src.clone(), drv.clone()];
        vars.extend(store.all_vars());
        let r = grad_check(&vars, 4, 50, || project(&model.forward_pair(src.as_tensor(), drv.as_tensor())?, 51));
        out.push((name, r));
    }
    out
}

// ---------------------------------------------------------------------------
// Closed forms of the animation model

pub fn stage_one_closed_forms() -> Vec<Bound> {
    let mut out = Vec::new();
    let dev = Device::Cpu;
    let mut rng = ChaCha8Rng::seed_from_u64(200);

    // Constant channel: zero numerator, so the output is beta for any gamma.
    let base = normal(&mut rng, &[2, 3, 25], 1.0);
    let constant = Tensor::full(0.7f64, (2, 1, 25), &dev).unwrap();
    let feats = Tensor::cat(&[base.narrow(1, 0, 1).unwrap(), constant, base.narrow(1, 2, 1).unwrap()], 1)
        .unwrap()
        .reshape((2, 3, 5, 5))
        .unwrap();
    let params = EnhancerParams::from_values(&[2.5, -1.3, 0.4], &[0.1, -0.2, 0.3], 1e-5, DType::F64).unwrap();
    let out_c = enhance_features(&feats, &params, false).unwrap().narrow(1, 1, 1).unwrap();
    let beta = Tensor::full(-0.2f64, out_c.dims(), &dev).unwrap();
    out.push(Bound::new("enhancer on a constant channel returns beta", max_abs_diff(&out_c, &beta), 1e-12));

    let mut worst = 0f64;
    for l in [0.25, 1.0, 3.0] {
        let zero = Tensor::zeros((1, 2, 3, 3), DType::F64, &dev).unwrap();
        let mut store = ParamStore::new(DType::F64, 1);
        let head = DeviationHead::new(&mut store.scope("d"), "h", 2).unwrap();
        for (_, v) in store.iter() {
            v.set(&v.zeros_like().unwrap()).unwrap();
        }
        let d = compute_deviation(&zero, &head, l, None).unwrap();
        worst = worst.max(max_abs_diff(&d, &Tensor::full(l / 2.0, d.dims(), &dev).unwrap()));
    }
    out.push(Bound::new("deviation at zero pre-activation equals L/2", worst, 0.0));

    let z = normal(&mut rng, &[2, 3, 4, 4], 1.0);
    out.push(Bound::new(
        "rectifier with c = 0 is ReLU",
        max_abs_diff(&activation(&z, 0.0).unwrap(), &z.relu().unwrap()),
        0.0,
    ));
    out.push(Bound::new(
        "rectifier with c = 1 is the identity",
        max_abs_diff(&activation(&z, 1.0).unwrap(), &z),
        0.0,
    ));

    let mut worst = 0f64;
    for dtype in [DType::F32, DType::F64] {
        let f = uniform(&mut rng, &[2, 4, 9, 7], -2.0, 2.0).to_dtype(dtype).unwrap();
        let g = identity_grid(2, 9, 7, dtype).unwrap();
        worst = worst.max(max_abs_diff(&grid_sample(&f, &g).unwrap(), &f));
    }
    out.push(Bound::new("identity flow passes features through", worst, 1e-6));

    let mut store = ParamStore::new(DType::F32, 3);
    let model = StageOneModel::new(&mut store, &StageOneConfig::default()).unwrap();
    randomize(&store, 4, 0.05);
    let img = uniform(&mut rng, &[2, 3, 64, 64], 0.0, 1.0).to_dtype(DType::F32).unwrap();
    let enc = model.encode_source(&img).unwrap();
    let trace = model.reconstruct_traced(&enc, &enc.mf).unwrap();
    let worst = trace
        .flows
        .iter()
        .map(|f| devgest::deviation::flow::distance_from_identity(f).unwrap())
        .fold(0f64, f64::max);
    out.push(Bound::new("self-driven model flow is the identity", worst, 1e-6));
    out
}

// ---------------------------------------------------------------------------
// Warp oracle

/// Integer translations of impulse maps, compared with a direct index shift
/// on every pixel whose source lies inside the frame. Returns the number of
/// pixels compared and the largest deviation.
pub fn warp_impulse_oracle(cases: usize, seed: u64) -> (usize, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut compared = 0;
    let mut worst = 0f64;
    for _ in 0..cases {
        let (h, w, c) = (rng.random_range(4..=16), rng.random_range(4..=16), rng.random_range(1..=3));
        let dx: i64 = rng.random_range(-3..=3);
        let dy: i64 = rng.random_range(-3..=3);
        let mut feat = vec![0f64; c * h * w];
        for _ in 0..rng.random_range(1..=4) {
            let i = rng.random_range(0..feat.len());
            feat[i] = rng.random_range(0.5..2.0);
        }
        let f = Tensor::from_vec(feat.clone(), (1, c, h, w), &Device::Cpu).unwrap();
        let (ox, oy) = (pixel_offset(dx as f64, w), pixel_offset(dy as f64, h));
        let shift = Tensor::from_vec(vec![ox, oy], (1, 1, 1, 2), &Device::Cpu).unwrap();
        let grid = identity_grid(1, h, w, DType::F64).unwrap().broadcast_add(&shift).unwrap();
        let out = grid_sample(&f, &grid).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for ch in 0..c {
            for y in 0..h as i64 {
                for x in 0..w as i64 {
                    let (sy, sx) = (y + dy, x + dx);
                    if sy < 0 || sx < 0 || sy >= h as i64 || sx >= w as i64 {
                        continue;
                    }
                    let got = out[(ch * h + y as usize) * w + x as usize];
                    let want = feat[(ch * h + sy as usize) * w + sx as usize];
                    worst = worst.max((got - want).abs());
                    compared += 1;
                }
            }
        }
    }
    (compared, worst)
}

// ---------------------------------------------------------------------------
// Diffusion algebra

pub fn diffusion_algebra() -> Vec<Bound> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(300);
    let x0 = normal(&mut rng, &[3, 8, 5], 1.0);
    let eps = normal(&mut rng, &[3, 8, 5], 1.0);
    out.push(Bound::new("alpha_bar = 1 returns x0", max_abs_diff(&q_sample_with(&x0, &eps, 1.0).unwrap(), &x0), 0.0));
    out.push(Bound::new("alpha_bar = 0 returns eps", max_abs_diff(&q_sample_with(&x0, &eps, 0.0).unwrap(), &eps), 0.0));

    let schedule = DiffusionSchedule::new(1000, ScheduleKind::Cosine).unwrap();
    let n = 100_000;
    let x0 = Tensor::full(0.8f64, (n,), &Device::Cpu).unwrap();
    let mut worst = 0f64;
    for t in [1, 10, 100, 500, 900, 1000] {
        let e = gaussian(&mut rng, &[n], DType::F64).unwrap();
        let xt = q_sample(&x0, t, &e, &schedule).unwrap().to_vec1::<f64>().unwrap();
        let mean = xt.iter().sum::<f64>() / n as f64;
        let var = xt.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let expect = 1.0 - schedule.alpha_bar(t).unwrap();
        worst = worst.max((var / expect - 1.0).abs());
    }
    out.push(Bound::new("Monte-Carlo variance relative error", worst, 0.05));

    let seq = |v: &[f64]| Tensor::from_vec(v.to_vec(), (1, v.len(), 1), &Device::Cpu).unwrap();
    let s = |t: &Tensor| t.to_scalar::<f64>().unwrap();
    let l = diffusion_loss(&seq(&[0.0, 2.0, 4.0]), &seq(&[0.0, 1.0, 2.0]), &MotionLossWeights::default()).unwrap();
    out.push(Bound::new("hand example position term 5/3", (s(&l.mf) - 5.0 / 3.0).abs(), 1e-9));
    out.push(Bound::new("hand example velocity term 1", (s(&l.vel) - 1.0).abs(), 1e-9));
    out.push(Bound::new("hand example acceleration term 0", s(&l.acc).abs(), 1e-9));
    out
}

// ---------------------------------------------------------------------------
// Metrics

pub fn metric_closed_forms() -> Vec<Bound> {
    let mut out = Vec::new();
    let d = 4;
    let m = DVector::from_vec(vec![3.0, 4.0, 0.0, 0.0]);
    let a = GaussianStats::new(m.clone(), DMatrix::identity(d, d)).unwrap();
    let b = GaussianStats::new(DVector::zeros(d), DMatrix::identity(d, d)).unwrap();
    let exact = frechet_distance(&a, &b).unwrap();
    out.push(Bound::new("Frechet distance, analytic statistics", (exact - 25.0).abs(), 1e-9));

    let mut rng = ChaCha8Rng::seed_from_u64(400);
    let draw = |rng: &mut ChaCha8Rng, shift: &[f64]| -> Vec<Vec<f64>> {
        let t = normal(rng, &[10_000, d], 1.0).to_vec2::<f64>().unwrap();
        t.into_iter().map(|r| r.iter().zip(shift).map(|(x, s)| x + s).collect()).collect()
    };
    let real = draw(&mut rng, &[3.0, 4.0, 0.0, 0.0]);
    let gen = draw(&mut rng, &[0.0; 4]);
    let sampled = fgd(&real, &gen).unwrap();
    out.push(Bound::new("Frechet distance from 10^4 samples, relative error", (sampled / 25.0 - 1.0).abs(), 0.02));

    let px: Vec<f32> = (0..3 * 24 * 24).map(|_| rng.random_range(0.0..1.0)).collect();
    let img = Image::new(24, 24, px).unwrap();
    out.push(Bound::new("SSIM of an image with itself", (ssim(&img, &img).unwrap() - 1.0).abs(), 1e-12));
    out.push(Bound::new(
        "PSNR at peak 255 and MSE 1",
        (psnr_from_mse(1.0, 255.0).unwrap() - 48.1308).abs(),
        1e-3,
    ));
    let grey = Image::filled(8, 8, [0.5; 3]).unwrap();
    let off = Image::filled(8, 8, [0.6; 3]).unwrap();
    out.push(Bound::new("PSNR of a uniform 0.1 error", (psnr(&grey, &off, 1.0).unwrap() - 20.0).abs(), 1e-4));
    let div = diversity(&[vec![0.0], vec![1.0], vec![2.0]]).unwrap();
    out.push(Bound::new("diversity of 0, 1, 2", (div - 4.0 / 3.0).abs(), 0.0));
    out
}

// ---------------------------------------------------------------------------
// Ablation contract

pub struct AblationFinding {
    pub name: &'static str,
    pub holds: bool,
    pub detail: String,
}

fn grad_norm(grads: &candle_core::backprop::GradStore, vars: &[candle_core::Var]) -> f64 {
    vars.iter()
        .filter_map(|v| grads.get(v.as_tensor()))
        .map(|g| g.to_dtype(DType::F64).unwrap().abs().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap())
        .sum()
}

/// Gradient mass reaching the parameters under `prefix`, and deviation
/// calls, for one training-style forward of a model with `flags`.
fn pathway_usage(flags: AblationFlags, prefix: &str) -> (f64, usize) {
    let cfg = StageOneConfig {
        ablation: flags,
        ..tiny_stage_one(16)
    };
    let mut store = ParamStore::new(DType::F64, 60);
    let model = StageOneModel::new(&mut store, &cfg).unwrap();
    randomize(&store, 61, 0.3);
    let mut rng = ChaCha8Rng::seed_from_u64(62);
    let src = uniform(&mut rng, &[2, 3, 16, 16], 0.0, 1.0);
    let drv = uniform(&mut rng, &[2, 3, 16, 16], 0.0, 1.0);
    model.deviation_calls().reset();
    let loss = project(&model.forward_pair(&src, &drv).unwrap(), 63).unwrap();
    let grads = loss.backward().unwrap();
    (grad_norm(&grads, &store.vars_with_prefix(prefix)).abs(), model.deviation_calls().get())
}

pub fn ablation_contract() -> Vec<AblationFinding> {
    let mut out = Vec::new();
    let full = AblationFlags::default();

    let enh = "stage1.enhancer.";
    let (on, _) = pathway_usage(full, enh);
    let (off, _) = pathway_usage(AblationFlags { disable_enhancer: true, ..full }, enh);
    out.push(AblationFinding {
        name: "disable_enhancer: enhancer parameters get zero gradient",
        holds: off == 0.0 && on > 0.0,
        detail: format!("gradient mass {off} (enabled: {on:.3e})"),
    });

    let dev = "stage1.deviation.";
    let (on, calls_on) = pathway_usage(full, dev);
    let (off, calls_off) = pathway_usage(AblationFlags { disable_deviation: true, ..full }, dev);
    out.push(AblationFinding {
        name: "disable_deviation: deviation never evaluated, heads get zero gradient",
        holds: calls_off == 0 && off == 0.0 && calls_on > 0 && on > 0.0,
        detail: format!("{calls_off} calls, gradient mass {off} (enabled: {calls_on} calls, {on:.3e})"),
    });

    let mask = "stage1.mask.";
    let (on, _) = pathway_usage(full, mask);
    let (off, _) = pathway_usage(AblationFlags { disable_motion_decoder: true, ..full }, mask);
    out.push(AblationFinding {
        name: "disable_motion_decoder: region masks get zero gradient",
        holds: off == 0.0 && on > 0.0,
        detail: format!("gradient mass {off} (enabled: {on:.3e})"),
    });

    // All flags off against a model built from the plain default config.
    let mut rng = ChaCha8Rng::seed_from_u64(64);
    let src = uniform(&mut rng, &[2, 3, 64, 64], 0.0, 1.0).to_dtype(DType::F32).unwrap();
    let drv = uniform(&mut rng, &[2, 3, 64, 64], 0.0, 1.0).to_dtype(DType::F32).unwrap();
    let build = |cfg: &StageOneConfig| {
        let mut store = ParamStore::new(DType::F32, 65);
        let m = StageOneModel::new(&mut store, cfg).unwrap();
        randomize(&store, 66, 0.05);
        m.forward_pair(&src, &drv).unwrap()
    };
    let flagged = StageOneConfig {
        ablation: AblationFlags::from_names(&["none"]).unwrap(),
        ..StageOneConfig::default()
    };
    let diff = max_abs_diff(&build(&StageOneConfig::default()), &build(&flagged));
    out.push(AblationFinding {
        name: "all flags off is output-identical to the default model",
        holds: diff == 0.0,
        detail: format!("max abs difference {diff}"),
    });
    out
}

// ---------------------------------------------------------------------------
// End-to-end pipeline

/// Small-budget settings for runs whose point is plumbing, not quality.
pub fn smoke_config(seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig {
        seed,
        ..TrainConfig::default()
    };
    cfg.stage1.steps = 3;
    cfg.stage1.batch = 2;
    cfg.stage2.steps = 3;
    cfg.stage2.batch = 4;
    cfg.stage2.sample_steps = 4;
    cfg
}

/// synth-data, both training stages, generation from clip 0's audio and
/// first frame, and evaluation against clip 0. Returns every file written
/// under `root`, keyed by relative path.
pub fn run_pipeline(root: &Path, seed: u64) -> BTreeMap<String, Vec<u8>> {
    let spec = SyntheticSpec {
        seed,
        ..SyntheticSpec::default()
    };
    let manifest = generate_synthetic_dataset(&root.join("data"), &spec).unwrap();
    let cfg = smoke_config(seed);
    let data = TrainingData::load(&manifest, Split::Train, &cfg.audio).unwrap();
    let s1 = train_stage1(&data, &cfg, None).unwrap();
    s1.history.save_csv(&root.join("stage1_loss.csv")).unwrap();
    save_checkpoint(&s1.checkpoint, &root.join("stage1.ckpt")).unwrap();
    let s1 = load_checkpoint(&root.join("stage1.ckpt")).unwrap();
    let s2 = train_stage2(&data, &s1, &cfg, None).unwrap();
    s2.history.save_csv(&root.join("stage2_loss.csv")).unwrap();
    save_checkpoint(&s2.checkpoint, &root.join("stage2.ckpt")).unwrap();
    let s2 = load_checkpoint(&root.join("stage2.ckpt")).unwrap();

    let rec = &manifest.clips[0];
    let source = load_frames(&manifest.root.join(&rec.frames_dir)).unwrap().remove(0);
    let opts = GenerateOptions {
        seed,
        ..GenerateOptions::default()
    };
    let video = generate_video(&manifest.root.join(&rec.audio), &source, &s1, &s2, &opts).unwrap();
    write_video(&video, &root.join("gen"), true).unwrap();

    let (real, _) = load_clip(&manifest, 0, &cfg.audio).unwrap();
    let (_, model) = stage_one_from_checkpoint(&s1).unwrap();
    let nets = default_metric_nets(11, 13).unwrap();
    let report = report_with_model(&model, &[real], &[video], &nets, "proxy:lpe", &cfg).unwrap();
    report.save(&root.join("report.json")).unwrap();

    let mut files = BTreeMap::new();
    collect(root, root, &mut files);
    files
}

fn collect(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
    let mut entries: Vec<_> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    entries.sort();
    for p in entries {
        if p.is_dir() {
            collect(root, &p, out);
        } else {
            let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
            out.insert(rel, std::fs::read(&p).unwrap());
        }
    }
}

/// Paths whose bytes differ between two runs (or exist in only one).
pub fn differing_files(a: &BTreeMap<String, Vec<u8>>, b: &BTreeMap<String, Vec<u8>>) -> Vec<String> {
    let keys: std::collections::BTreeSet<&String> = a.keys().chain(b.keys()).collect();
    keys.into_iter().filter(|k| a.get(*k) != b.get(*k)).cloned().collect()
}
