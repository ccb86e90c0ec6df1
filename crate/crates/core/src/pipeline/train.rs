//! Two-stage training loops.

use std::fmt::Write as _;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{Checkpoint, RngState};
use super::config::TrainConfig;
use crate::deviation::model::STAGE1_PREFIX;
use crate::deviation::{StageOneConfig, StageOneModel};
use crate::diffusion::{
    diffusion_loss, gaussian, q_sample_batch, Condition, Denoiser, DiffusionSchedule, Normalizer, PREV_FRAMES,
    STAGE2_PREFIX,
};
use crate::error::{Error, Result};
use crate::losses::{
    adversarial_losses, generator_objective, perceptual_global, perceptual_local, LocalBoxes, LossParts,
    PatchDiscriminator, PerceptualNet, DISC_PREFIX,
};
use crate::media_io::audio::AudioFeatureConfig;
use crate::media_io::dataset::{load_clip, DatasetManifest, Split};
use crate::media_io::image::{images_to_batch, FrameBoxes, Image};
use crate::nn::ParamStore;

/// One clip held in memory for training.
#[derive(Debug, Clone)]
pub struct ClipData {
    pub id: String,
    /// `(N, 3, H, W)` frames in `[0, 1]`.
    pub frames: Tensor,
    pub boxes: Option<Vec<FrameBoxes>>,
    /// One averaged audio feature row per frame.
    pub audio: Vec<Vec<f32>>,
    pub fps: f64,
}

impl ClipData {
    pub fn len(&self) -> usize {
        self.audio.len()
    }

    pub fn is_empty(&self) -> bool {
        self.audio.is_empty()
    }

    pub fn frame(&self, i: usize) -> Result<Tensor> {
        Ok(self.frames.narrow(0, i, 1)?)
    }
}

#[derive(Debug, Clone)]
pub struct TrainingData {
    pub clips: Vec<ClipData>,
    pub height: usize,
    pub width: usize,
}

impl TrainingData {
    /// Loads every clip of `split` into memory.
    pub fn load(manifest: &DatasetManifest, split: Split, audio_cfg: &AudioFeatureConfig) -> Result<Self> {
        let idx = manifest.indices(split);
        if idx.is_empty() {
            return Err(Error::Invalid(format!("dataset has no {split:?} clips")));
        }
        let mut clips = Vec::with_capacity(idx.len());
        for i in idx {
            let (clip, feats) = load_clip(manifest, i, audio_cfg)?;
            let refs: Vec<&Image> = clip.frames.iter().collect();
            clips.push(ClipData {
                id: manifest.clips[i].id.clone(),
                frames: images_to_batch(&refs, DType::F32)?,
                audio: feats.per_frame(clip.len(), clip.fps),
                boxes: clip.region_boxes,
                fps: clip.fps,
            });
        }
        Ok(Self {
            clips,
            height: manifest.height,
            width: manifest.width,
        })
    }

    fn check_model_size(&self, cfg: &StageOneConfig) -> Result<()> {
        if self.height != cfg.height || self.width != cfg.width {
            return Err(Error::Config(format!(
                "data is {}x{}, model expects {}x{}",
                self.height, self.width, cfg.height, cfg.width
            )));
        }
        Ok(())
    }
}

/// Long-format loss log, one row per `(step, loss)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossHistory {
    pub rows: Vec<(u64, String, f64)>,
}

impl LossHistory {
    pub fn push(&mut self, step: u64, name: &str, value: f64) {
        self.rows.push((step, name.to_string(), value));
    }

    /// Values of one loss in step order.
    pub fn series(&self, name: &str) -> Vec<f64> {
        self.rows.iter().filter(|r| r.1 == name).map(|r| r.2).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss_name,value\n");
        for (step, name, v) in &self.rows {
            // `{:?}` keeps the shortest round-trip representation.
            let _ = writeln!(s, "{step},{name},{v:?}");
        }
        s
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

pub struct TrainRun {
    pub checkpoint: Checkpoint,
    pub history: LossHistory,
}

/// Called after every optimizer step with the step number (1-based) and the
/// history so far.
pub type Progress<'a> = &'a mut dyn FnMut(u64, &LossHistory);

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn adam(vars: Vec<candle_core::Var>, lr: f64) -> Result<AdamW> {
    Ok(AdamW::new(
        vars,
        ParamsAdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        },
    )?)
}

/// Independent stream for data sampling so parameter init and sampling do
/// not share state.
fn sampling_rng(seed: u64, stage: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stage);
    rng
}

fn rng_state(seed: u64, rng: &ChaCha8Rng) -> RngState {
    RngState {
        seed,
        word_pos: rng.get_word_pos(),
    }
}

/// Builds the stage-1 model (and critic) and loads a stage-1 checkpoint.
pub fn stage_one_from_checkpoint(ckpt: &Checkpoint) -> Result<(ParamStore, StageOneModel)> {
    ckpt.expect_stage(1)?;
    let mut store = ParamStore::new(DType::F32, ckpt.config.seed);
    let model = StageOneModel::new(&mut store, &ckpt.config.model)?;
    store.load_snapshot(&ckpt.subset(&format!("{STAGE1_PREFIX}.")))?;
    Ok((store, model))
}

/// Self-supervised stage-1 training: each step samples `batch` clips and a
/// uniform (source, driving) frame pair in each, takes a generator step on
/// the perceptual and adversarial losses, then a critic step.
pub fn train_stage1(data: &TrainingData, cfg: &TrainConfig, mut progress: Option<Progress<'_>>) -> Result<TrainRun> {
    cfg.validate()?;
    data.check_model_size(&cfg.model)?;
    if let Some(c) = data.clips.iter().find(|c| c.len() < 2) {
        return Err(Error::Invalid(format!("clip `{}` has {} frames; need at least 2", c.id, c.len())));
    }
    let opts = &cfg.stage1;
    let w = &opts.weights;
    let mut store = ParamStore::new(DType::F32, cfg.seed);
    let model = StageOneModel::new(&mut store, &cfg.model)?;
    let disc = PatchDiscriminator::new(&mut store.scope(DISC_PREFIX), opts.disc_width)?;
    let net = PerceptualNet::random(opts.perceptual_seed, DType::F32)?;
    let mut gen_opt = adam(store.vars_with_prefix(&format!("{STAGE1_PREFIX}.")), opts.lr)?;
    let mut disc_opt = adam(store.vars_with_prefix(&format!("{DISC_PREFIX}.")), opts.lr)?;
    let adversarial = w.adversarial_enabled();

    let mut rng = sampling_rng(cfg.seed, 1);
    let mut history = LossHistory::default();
    for step in 1..=opts.steps as u64 {
        let mut src = Vec::with_capacity(opts.batch);
        let mut drv = Vec::with_capacity(opts.batch);
        let mut boxes = Vec::with_capacity(opts.batch);
        for _ in 0..opts.batch {
            let clip = &data.clips[rng.random_range(0..data.clips.len())];
            let i = rng.random_range(0..clip.len());
            let j = rng.random_range(0..clip.len());
            src.push(clip.frame(i)?);
            drv.push(clip.frame(j)?);
            if let Some(b) = &clip.boxes {
                boxes.push(LocalBoxes {
                    hands: b[j].hands.clone(),
                    face: b[j].face,
                });
            }
        }
        let src = Tensor::cat(&src, 0)?;
        let drv = Tensor::cat(&drv, 0)?;
        let fake = model.forward_pair(&src, &drv)?;

        let per_glo = perceptual_global(&fake, &drv, &net, w.levels)?;
        let zero = Tensor::zeros((), DType::F32, &Device::Cpu)?;
        // Clips without region boxes contribute no local term.
        let (hand, face) = if boxes.len() == opts.batch {
            perceptual_local(&drv, &fake, &boxes, &net, opts.crop)?
        } else {
            (zero.clone(), zero.clone())
        };
        let adv = if adversarial {
            Some(adversarial_losses(&disc, &drv, &fake, opts.gan)?)
        } else {
            None
        };
        let gen_loss = generator_objective(&per_glo, &hand, &face, adv.as_ref().map(|a| &a.0), w)?;
        gen_opt.backward_step(&gen_loss)?;
        if let Some((_, discr)) = &adv {
            disc_opt.backward_step(&(discr * w.discr)?)?;
        }

        let parts = LossParts {
            per_glo: scalar(&per_glo)?,
            hand: scalar(&hand)?,
            face: scalar(&face)?,
            gan: adv.as_ref().map(|a| scalar(&a.0)).transpose()?.unwrap_or(0.0),
            discr: adv.as_ref().map(|a| scalar(&a.1)).transpose()?.unwrap_or(0.0),
        };
        for (name, v) in [
            ("per_glo", parts.per_glo),
            ("hand", parts.hand),
            ("face", parts.face),
            ("per", w.perceptual(&parts)),
            ("gan", parts.gan),
            ("discr", parts.discr),
            ("total", w.total(&parts)),
        ] {
            if !v.is_finite() {
                return Err(Error::Numerical(format!("stage-1 loss {name} is {v} at step {step}")));
            }
            history.push(step, name, v);
        }
        if let Some(p) = progress.as_mut() {
            p(step, &history);
        }
    }
    let extra = serde_json::json!({
        "perceptual": net.provenance().as_str(),
        "ablation": cfg.model.ablation.label(),
    });
    let checkpoint = Checkpoint::from_store(
        &store,
        &[&format!("{STAGE1_PREFIX}."), &format!("{DISC_PREFIX}.")],
        1,
        opts.steps as u64,
        rng_state(cfg.seed, &rng),
        cfg,
        extra,
    )?;
    Ok(TrainRun { checkpoint, history })
}

/// Motion features `(N, K)` of a frame stack, computed in chunks.
pub fn extract_motion(model: &StageOneModel, frames: &Tensor) -> Result<Tensor> {
    const CHUNK: usize = 16;
    let n = frames.dim(0)?;
    let mut parts = Vec::with_capacity(n.div_ceil(CHUNK));
    let mut at = 0;
    while at < n {
        let len = CHUNK.min(n - at);
        parts.push(model.estimate_motion(&frames.narrow(0, at, len)?)?.detach());
        at += len;
    }
    Ok(Tensor::cat(&parts, 0)?)
}

fn rows_f64(t: &Tensor) -> Result<Vec<Vec<f64>>> {
    Ok(t.to_dtype(DType::F64)?.to_vec2::<f64>()?)
}

/// Per-clip stage-2 training tensors, already normalised.
struct MotionClip {
    /// `(N, K)`
    mf: Tensor,
    /// `(N, A)`
    audio: Tensor,
}

/// Stage-2 metadata stored in the checkpoint's `extra` field.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Stage2Extra {
    pub normalizer: Normalizer,
    pub stage1_step: u64,
}

impl Stage2Extra {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.expect_stage(2)?;
        serde_json::from_value(ckpt.extra.clone())
            .map_err(|e| Error::Checkpoint(format!("stage-2 metadata: {e}")))
    }
}

/// Builds the denoiser and loads a stage-2 checkpoint.
pub fn denoiser_from_checkpoint(ckpt: &Checkpoint) -> Result<(ParamStore, Denoiser, Stage2Extra)> {
    let extra = Stage2Extra::from_checkpoint(ckpt)?;
    let cfg = &ckpt.config;
    let mut store = ParamStore::new(DType::F32, cfg.seed);
    let net = Denoiser::new(&mut store, &cfg.stage2.denoiser(cfg.model.k, cfg.audio.bands))?;
    store.load_snapshot(&ckpt.subset(&format!("{STAGE2_PREFIX}.")))?;
    Ok((store, net, extra))
}

/// Gathers rows `start..start + len` of each `(clip, start)` pair into a
/// `(B, len, D)` batch.
fn gather(tensors: &[&Tensor], picks: &[(usize, usize)], len: usize) -> Result<Tensor> {
    let rows: Vec<Tensor> = picks
        .iter()
        .map(|&(c, s)| tensors[c].narrow(0, s, len))
        .collect::<std::result::Result<_, _>>()?;
    Ok(Tensor::stack(&rows, 0)?)
}

/// Stage-2 training: the stage-1 checkpoint is frozen and only used to
/// extract motion features; the denoiser learns to recover clean windows
/// from noised ones given audio, the four preceding frames and the source
/// frame's feature.
pub fn train_stage2(data: &TrainingData, stage1: &Checkpoint, cfg: &TrainConfig, mut progress: Option<Progress<'_>>) -> Result<TrainRun> {
    stage1.expect_stage(1)?;
    // The motion space is defined by the stage-1 model.
    let mut cfg = cfg.clone();
    cfg.model = stage1.config.model.clone();
    cfg.validate()?;
    data.check_model_size(&cfg.model)?;
    let opts = &cfg.stage2;
    let m = opts.window;
    if let Some(c) = data.clips.iter().find(|c| c.len() < m + PREV_FRAMES) {
        return Err(Error::Invalid(format!(
            "clip `{}` has {} frames; stage 2 needs at least {}",
            c.id,
            c.len(),
            m + PREV_FRAMES
        )));
    }
    if let Some(c) = data.clips.iter().find(|c| c.audio.first().map(Vec::len) != Some(cfg.audio.bands)) {
        return Err(Error::Config(format!("clip `{}` audio features do not have {} bands", c.id, cfg.audio.bands)));
    }
    let (_, s1) = stage_one_from_checkpoint(stage1)?;

    let mut raw_mf = Vec::with_capacity(data.clips.len());
    let mut all_mf = Vec::new();
    let mut all_audio = Vec::new();
    for c in &data.clips {
        let mf = rows_f64(&extract_motion(&s1, &c.frames)?)?;
        all_mf.extend(mf.iter().cloned());
        all_audio.extend(c.audio.iter().map(|r| r.iter().map(|&v| v as f64).collect::<Vec<_>>()));
        raw_mf.push(mf);
    }
    let normalizer = Normalizer::fit(&all_mf, &all_audio)?;
    let mut clips = Vec::with_capacity(data.clips.len());
    for (c, mf) in data.clips.iter().zip(&raw_mf) {
        let n = c.len();
        let mf = Tensor::from_vec(mf.concat(), (n, cfg.model.k), &Device::Cpu)?.to_dtype(DType::F32)?;
        let audio = Tensor::from_vec(c.audio.concat(), (n, cfg.audio.bands), &Device::Cpu)?;
        clips.push(MotionClip {
            mf: normalizer.norm_mf(&mf)?,
            audio: normalizer.norm_audio(&audio)?,
        });
    }

    let windows: Vec<(usize, usize)> = if opts.single_window {
        vec![(0, PREV_FRAMES)]
    } else {
        clips
            .iter()
            .enumerate()
            .flat_map(|(ci, c)| {
                let n = c.mf.dim(0).unwrap_or(0);
                (PREV_FRAMES..=n - m).map(move |s| (ci, s))
            })
            .collect()
    };

    let mut store = ParamStore::new(DType::F32, cfg.seed);
    let net = Denoiser::new(&mut store, &opts.denoiser(cfg.model.k, cfg.audio.bands))?;
    let schedule = DiffusionSchedule::new(opts.diffusion_steps, opts.schedule)?;
    let mut optim = adam(store.vars_with_prefix(&format!("{STAGE2_PREFIX}.")), opts.lr)?;
    let mfs: Vec<&Tensor> = clips.iter().map(|c| &c.mf).collect();
    let auds: Vec<&Tensor> = clips.iter().map(|c| &c.audio).collect();

    let mut rng = sampling_rng(cfg.seed, 2);
    let mut history = LossHistory::default();
    for step in 1..=opts.steps as u64 {
        let picks: Vec<(usize, usize)> = (0..opts.batch).map(|_| windows[rng.random_range(0..windows.len())]).collect();
        let x0 = gather(&mfs, &picks, m)?;
        let audio = gather(&auds, &picks, m)?;
        let source_mf = gather(&mfs, &picks.iter().map(|&(c, _)| (c, 0)).collect::<Vec<_>>(), 1)?.squeeze(1)?;
        let prev_picks: Vec<(usize, usize)> = picks.iter().map(|&(c, s)| (c, s - PREV_FRAMES)).collect();
        let mut prev4 = gather(&mfs, &prev_picks, PREV_FRAMES)?;
        if opts.self_condition_prob > 0.0 {
            prev4 = self_condition(&net, &schedule, &mfs, &auds, &picks, prev4, &mut rng, opts.self_condition_prob)?;
        }
        let ts: Vec<usize> = (0..opts.batch).map(|_| rng.random_range(1..=schedule.steps())).collect();
        let eps = gaussian(&mut rng, x0.dims(), DType::F32)?;
        let x_t = q_sample_batch(&x0, &ts, &eps, &schedule)?;
        let cond = Condition { audio, prev4, source_mf };
        let pred = net.predict_clean(&x_t, &ts, &cond)?;
        let loss = diffusion_loss(&pred, &x0, &opts.loss)?;
        optim.backward_step(&loss.total)?;
        for (name, t) in [("mf", &loss.mf), ("vel", &loss.vel), ("acc", &loss.acc), ("total", &loss.total)] {
            let v = scalar(t)?;
            if !v.is_finite() {
                return Err(Error::Numerical(format!("stage-2 loss {name} is {v} at step {step}")));
            }
            history.push(step, name, v);
        }
        if let Some(p) = progress.as_mut() {
            p(step, &history);
        }
    }
    let extra = serde_json::to_value(Stage2Extra {
        normalizer,
        stage1_step: stage1.step,
    })?;
    let checkpoint = Checkpoint::from_store(
        &store,
        &[&format!("{STAGE2_PREFIX}.")],
        2,
        opts.steps as u64,
        rng_state(cfg.seed, &rng),
        &cfg,
        extra,
    )?;
    Ok(TrainRun { checkpoint, history })
}

/// With probability `p` per sample, replaces the teacher `prev4` by the
/// last four frames of the model's own estimate of the preceding window
/// (one denoising call from a random noise level). Samples whose preceding
/// window would start before frame 4 keep the teacher features.
#[allow(clippy::too_many_arguments)]
fn self_condition(
    net: &Denoiser,
    schedule: &DiffusionSchedule,
    mfs: &[&Tensor],
    auds: &[&Tensor],
    picks: &[(usize, usize)],
    prev4: Tensor,
    rng: &mut ChaCha8Rng,
    p: f64,
) -> Result<Tensor> {
    let m = net.config().window;
    let chosen: Vec<usize> = (0..picks.len())
        .filter(|&i| rng.random::<f64>() < p && picks[i].1 >= m + PREV_FRAMES)
        .collect();
    if chosen.is_empty() {
        return Ok(prev4);
    }
    let before: Vec<(usize, usize)> = chosen.iter().map(|&i| (picks[i].0, picks[i].1 - m)).collect();
    let x0 = gather(mfs, &before, m)?;
    let cond = Condition {
        audio: gather(auds, &before, m)?,
        prev4: gather(mfs, &before.iter().map(|&(c, s)| (c, s - PREV_FRAMES)).collect::<Vec<_>>(), PREV_FRAMES)?,
        source_mf: gather(mfs, &before.iter().map(|&(c, _)| (c, 0)).collect::<Vec<_>>(), 1)?.squeeze(1)?,
    };
    let ts: Vec<usize> = chosen.iter().map(|_| rng.random_range(1..=schedule.steps())).collect();
    let eps = gaussian(rng, x0.dims(), DType::F32)?;
    let est = net
        .predict_clean(&q_sample_batch(&x0, &ts, &eps, schedule)?, &ts, &cond)?
        .detach()
        .narrow(1, m - PREV_FRAMES, PREV_FRAMES)?;
    let mut rows: Vec<Tensor> = (0..picks.len()).map(|i| prev4.get(i)).collect::<std::result::Result<_, _>>()?;
    for (k, &i) in chosen.iter().enumerate() {
        rows[i] = est.get(k)?;
    }
    Ok(Tensor::stack(&rows, 0)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn history_csv_format() {
        let mut h = LossHistory::default();
        h.push(1, "per", 0.5);
        h.push(1, "gan", 0.25);
        h.push(2, "per", 0.125);
        assert_eq!(h.to_csv(), "step,loss_name,value\n1,per,0.5\n1,gan,0.25\n2,per,0.125\n");
        assert_eq!(h.series("per"), vec![0.5, 0.125]);
    }

    #[test]
    fn sampling_streams_differ() {
        let mut a = sampling_rng(3, 1);
        let mut b = sampling_rng(3, 2);
        assert_ne!(a.random::<u64>(), b.random::<u64>());
    }
}
