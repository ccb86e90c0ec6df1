//! Reconstruction and evaluation helpers shared by the CLI and the
//! acceptance checks.

use candle_core::{DType, Tensor};
use serde::Serialize;

use super::train::extract_motion;
use crate::deviation::{StageOneConfig, StageOneModel};
use crate::error::{Error, Result};
use crate::losses::PerceptualNet;
use crate::nn::ParamStore;
use crate::media_io::image::{batch_to_images, images_to_batch, Image, VideoClip};
use crate::metrics::{evaluate_report, psnr_from_mse, EvalInputs, MetricNets, MetricReport, VideoFeatureNet};

const BATCH: usize = 8;

/// Animates frame `source` of `frames` with the motion of every frame of the
/// clip. With `source == i` for each frame this is self-reconstruction; a
/// fixed source gives cross-frame animation.
pub fn animate_clip(model: &StageOneModel, frames: &[Image], source: usize) -> Result<Vec<Image>> {
    let src_img = frames.get(source).ok_or(Error::OutOfRange {
        index: source,
        len: frames.len(),
    })?;
    let src = src_img.to_tensor(DType::F32)?;
    let mut out = Vec::with_capacity(frames.len());
    for chunk in frames.chunks(BATCH) {
        let refs: Vec<&Image> = chunk.iter().collect();
        let drv = images_to_batch(&refs, DType::F32)?;
        let enc = model.encode_source(&src.repeat((chunk.len(), 1, 1, 1))?)?;
        let mf = model.estimate_motion(&drv)?;
        out.extend(batch_to_images(&model.reconstruct(&enc, &mf)?)?);
    }
    Ok(out)
}

/// Reconstructs each frame from itself.
pub fn self_reconstruct(model: &StageOneModel, frames: &[Image]) -> Result<Vec<Image>> {
    let mut out = Vec::with_capacity(frames.len());
    for chunk in frames.chunks(BATCH) {
        let refs: Vec<&Image> = chunk.iter().collect();
        let x = images_to_batch(&refs, DType::F32)?;
        out.extend(batch_to_images(&model.forward_pair(&x, &x)?)?);
    }
    Ok(out)
}

/// PSNR over all pixels of paired frame lists (pooled squared error).
pub fn pooled_psnr(real: &[Image], fake: &[Image]) -> Result<f64> {
    if real.len() != fake.len() || real.is_empty() {
        return Err(Error::Invalid("need equal nonempty frame lists".into()));
    }
    let mut sse = 0.0;
    let mut n = 0usize;
    for (a, b) in real.iter().zip(fake) {
        let (s, c) = crate::metrics::quality::squared_error(a, b)?;
        sse += s;
        n += c;
    }
    psnr_from_mse(sse / n as f64, 1.0)
}

/// Per-frame motion features of a frame list as `f64` rows.
pub fn motion_rows(model: &StageOneModel, frames: &[Image]) -> Result<Vec<Vec<f64>>> {
    let refs: Vec<&Image> = frames.iter().collect();
    let t: Tensor = extract_motion(model, &images_to_batch(&refs, DType::F32)?)?;
    Ok(t.to_dtype(DType::F64)?.to_vec2::<f64>()?)
}

/// Default proxy nets for reports.
pub fn default_metric_nets(perceptual_seed: u64, video_seed: u64) -> Result<MetricNets> {
    Ok(MetricNets {
        perceptual: PerceptualNet::random(perceptual_seed, DType::F32)?,
        video: VideoFeatureNet::random(video_seed)?,
    })
}

/// Untrained model at the default configuration and size `height x width`,
/// used as a seed-frozen motion featurizer when no checkpoint is given.
pub fn frozen_motion_model(height: usize, width: usize, seed: u64) -> Result<StageOneModel> {
    let cfg = StageOneConfig {
        height,
        width,
        ..StageOneConfig::default()
    };
    let mut store = ParamStore::new(DType::F32, seed);
    StageOneModel::new(&mut store, &cfg)
}

/// Full report for paired real and generated clips, with motion features
/// taken from `model`'s pose estimator.
pub fn report_with_model<C: Serialize>(
    model: &StageOneModel,
    real: &[VideoClip],
    generated: &[VideoClip],
    nets: &MetricNets,
    motion_provenance: &str,
    config: &C,
) -> Result<MetricReport> {
    let mut real_motion = Vec::new();
    let mut gen_motion = Vec::new();
    for (r, g) in real.iter().zip(generated) {
        real_motion.extend(motion_rows(model, &r.frames)?);
        gen_motion.extend(motion_rows(model, &g.frames)?);
    }
    let inputs = EvalInputs {
        real,
        generated,
        real_motion: &real_motion,
        generated_motion: &gen_motion,
        motion_provenance,
        peak: 1.0,
    };
    evaluate_report(&inputs, nets, config)
}
