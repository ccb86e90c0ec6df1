//! Inference: speech audio and a source image to a video.

use std::fmt::Write as _;
use std::path::Path;

use candle_core::{DType, Device, Tensor};

use super::checkpoint::Checkpoint;
use super::train::{denoiser_from_checkpoint, stage_one_from_checkpoint};
use crate::diffusion::{rollout, DiffusionSchedule};
use crate::error::{Error, Result};
use crate::media_io::audio::{extract_audio_features, Waveform};
use crate::media_io::dataset::save_frames;
use crate::media_io::image::{batch_to_images, Image, VideoClip};

const RENDER_BATCH: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct GenerateOptions {
    pub seed: u64,
    pub fps: f64,
    /// Denoising iterations; the stage-2 config value when `None`.
    pub sample_steps: Option<usize>,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            fps: 16.0,
            sample_steps: None,
        }
    }
}

/// Number of frames for `duration` seconds at `fps`.
pub fn frame_count(duration: f64, fps: f64) -> usize {
    // Guard against `2.0 * 16.0 = 31.999...`-style rounding.
    (duration * fps + 1e-9).floor() as usize
}

/// Fails unless the two checkpoints describe the same motion space.
pub fn check_compatible(stage1: &Checkpoint, stage2: &Checkpoint) -> Result<()> {
    stage1.expect_stage(1)?;
    stage2.expect_stage(2)?;
    let (k1, k2) = (stage1.config.model.k, stage2.config.model.k);
    if k1 != k2 {
        return Err(Error::Incompatible(format!(
            "stage-1 motion features have K = {k1}, stage-2 model expects K = {k2}"
        )));
    }
    Ok(())
}

/// Generates one frame per `1 / fps` seconds of `wave`, animating `source`
/// with motion sampled from the stage-2 model.
pub fn generate_from_wave(
    wave: &Waveform,
    source: &Image,
    stage1: &Checkpoint,
    stage2: &Checkpoint,
    opts: &GenerateOptions,
) -> Result<VideoClip> {
    check_compatible(stage1, stage2)?;
    if !(opts.fps > 0.0) {
        return Err(Error::Invalid(format!("fps must be positive, got {}", opts.fps)));
    }
    let n = frame_count(wave.duration_seconds(), opts.fps);
    if n == 0 {
        return Err(Error::Invalid("audio shorter than one video frame".into()));
    }
    let (_, s1) = stage_one_from_checkpoint(stage1)?;
    let (_, net, extra) = denoiser_from_checkpoint(stage2)?;
    let cfg2 = &stage2.config;
    let window = net.config().window;

    let feats = extract_audio_features(wave, &cfg2.audio)?;
    let mut rows = feats.per_frame(n, opts.fps);
    // Short clips are padded to one window and trimmed afterwards.
    while rows.len() < window {
        rows.push(rows[rows.len() - 1].clone());
    }
    let padded = rows.len();
    let audio = Tensor::from_vec(rows.concat(), (padded, cfg2.audio.bands), &Device::Cpu)?;
    let audio = extra.normalizer.norm_audio(&audio)?;

    let src = source.to_tensor(DType::F32)?;
    let src_mf = extra.normalizer.norm_mf(&s1.estimate_motion(&src)?)?.squeeze(0)?;
    let schedule = DiffusionSchedule::new(cfg2.stage2.diffusion_steps, cfg2.stage2.schedule)?;
    let steps = opts.sample_steps.unwrap_or(cfg2.stage2.sample_steps);
    let motion = rollout(&net, &audio, &src_mf, &schedule, steps, opts.seed)?.narrow(0, 0, n)?;
    let motion = extra.normalizer.denorm_mf(&motion)?;

    let mut frames = Vec::with_capacity(n);
    let mut at = 0;
    while at < n {
        let len = RENDER_BATCH.min(n - at);
        let enc = s1.encode_source(&src.repeat((len, 1, 1, 1))?)?;
        let out = s1.reconstruct(&enc, &motion.narrow(0, at, len)?)?;
        frames.extend(batch_to_images(&out)?);
        at += len;
    }
    VideoClip::new(frames, opts.fps, None)
}

/// [`generate_from_wave`] with the audio read from a WAV file.
pub fn generate_video(
    audio_path: &Path,
    source: &Image,
    stage1: &Checkpoint,
    stage2: &Checkpoint,
    opts: &GenerateOptions,
) -> Result<VideoClip> {
    check_compatible(stage1, stage2)?;
    let wave = Waveform::read_wav(audio_path)?;
    generate_from_wave(&wave, source, stage1, stage2, opts)
}

/// Writes `frames/NNNNNN.png` under `dir`, plus `video.y4m` when asked.
pub fn write_video(clip: &VideoClip, dir: &Path, container: bool) -> Result<()> {
    save_frames(&dir.join("frames"), &clip.frames)?;
    if container {
        let path = dir.join("video.y4m");
        std::fs::write(&path, encode_y4m(clip)?).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

fn fps_ratio(fps: f64) -> (u64, u64) {
    let den = 1000u64;
    let num = (fps * den as f64).round() as u64;
    let g = gcd(num, den);
    (num / g, den / g)
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a.max(1)
    } else {
        gcd(b, a % b)
    }
}

/// Uncompressed YUV4MPEG2 stream, 4:4:4, full-range BT.601.
pub fn encode_y4m(clip: &VideoClip) -> Result<Vec<u8>> {
    let first = clip
        .frames
        .first()
        .ok_or_else(|| Error::Invalid("cannot encode an empty clip".into()))?;
    let (h, w) = (first.height(), first.width());
    let (num, den) = fps_ratio(clip.fps);
    let mut header = String::new();
    let _ = writeln!(header, "YUV4MPEG2 W{w} H{h} F{num}:{den} Ip A1:1 C444");
    let mut out = header.into_bytes();
    let q = |v: f64| (v.round().clamp(0.0, 255.0)) as u8;
    for f in &clip.frames {
        out.extend_from_slice(b"FRAME\n");
        let mut planes = [Vec::with_capacity(h * w), Vec::with_capacity(h * w), Vec::with_capacity(h * w)];
        for px in f.pixels().chunks_exact(3) {
            let (r, g, b) = (px[0] as f64 * 255.0, px[1] as f64 * 255.0, px[2] as f64 * 255.0);
            planes[0].push(q(0.299 * r + 0.587 * g + 0.114 * b));
            planes[1].push(q(128.0 - 0.168736 * r - 0.331264 * g + 0.5 * b));
            planes[2].push(q(128.0 + 0.5 * r - 0.418688 * g - 0.081312 * b));
        }
        for p in planes {
            out.extend(p);
        }
    }
    Ok(out)
}
