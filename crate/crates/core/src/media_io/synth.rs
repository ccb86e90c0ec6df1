//! Deterministic synthetic "speaker" clips.
//!
//! Each clip is an articulated 2-D figure: torso ellipse, head disc with a
//! mouth bar, two limb capsules ending in hand discs. The audio track is a
//! harmonic carrier under a slow amplitude envelope. Per video frame the mouth
//! aperture follows the frame's RMS energy and both limb angles follow a
//! one-pole low-pass of that energy, so motion is a learnable function of the
//! audio.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::audio::{quantize_i16, Waveform};
use super::dataset::{save_frames, write_boxes, ClipRecord, DatasetManifest, Split, MANIFEST_VERSION};
use super::image::{check_encodable_size, BoxRect, FrameBoxes, Image};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub clips: usize,
    pub width: usize,
    pub height: usize,
    pub seconds: f64,
    pub fps: f64,
    pub sample_rate: u32,
    pub seed: u64,
    /// The last `holdout_clips` clips are tagged `test`.
    pub holdout_clips: usize,
    /// Encoder depth the frames must be divisible for.
    pub depth: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            clips: 4,
            width: 64,
            height: 64,
            seconds: 2.0,
            fps: 16.0,
            sample_rate: 16000,
            seed: 7,
            holdout_clips: 0,
            depth: 4,
        }
    }
}

impl SyntheticSpec {
    pub fn frames_per_clip(&self) -> usize {
        (self.seconds * self.fps).floor() as usize
    }

    pub fn validate(&self) -> Result<()> {
        check_encodable_size(self.height, self.width, self.depth)
            .map_err(|e| Error::Config(e.to_string()))?;
        if self.clips == 0 || self.holdout_clips >= self.clips {
            return Err(Error::Config("need at least one training clip".into()));
        }
        if !(self.seconds > 0.0 && self.fps > 0.0) || self.sample_rate == 0 {
            return Err(Error::Config("duration, fps and sample rate must be positive".into()));
        }
        if self.frames_per_clip() < 2 {
            return Err(Error::Config("clips need at least two frames".into()));
        }
        Ok(())
    }
}

/// Generator-side ground truth for one frame, in pixel coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameTruth {
    pub envelope: f64,
    pub mouth_aperture: f64,
    pub left_angle: f64,
    pub right_angle: f64,
    pub left_hand: [f64; 2],
    pub right_hand: [f64; 2],
    pub head: [f64; 2],
    pub mouth: [f64; 2],
}

#[derive(Debug, Clone, Copy)]
struct Palette {
    background: [f32; 3],
    torso: [f32; 3],
    skin: [f32; 3],
    left_limb: [f32; 3],
    right_limb: [f32; 3],
    mouth: [f32; 3],
}

/// Static per-clip appearance.
#[derive(Debug, Clone, Copy)]
struct Figure {
    dx: f64,
    palette: Palette,
}

const HEAD_R: f64 = 0.12;
const LIMB_LEN: f64 = 0.26;
const LIMB_R: f64 = 0.04;
const HAND_R: f64 = 0.05;
const REST_ANGLE: f64 = 0.4;
const LEFT_GAIN: f64 = 1.6;
const RIGHT_GAIN: f64 = 1.2;
const LOWPASS: f64 = 0.5;
const SUPERSAMPLE: usize = 3;

/// Pose of one frame in normalised `[0,1]` image coordinates.
#[derive(Debug, Clone, Copy)]
struct Pose {
    head: (f64, f64),
    mouth: (f64, f64),
    mouth_h: f64,
    l_shoulder: (f64, f64),
    r_shoulder: (f64, f64),
    l_hand: (f64, f64),
    r_hand: (f64, f64),
    torso: (f64, f64),
}

fn pose(fig: &Figure, envelope: f64, smoothed: f64, aperture: f64) -> (Pose, f64, f64) {
    let cx = 0.5 + fig.dx;
    let head = (cx, 0.30 - 0.02 * envelope);
    let la = REST_ANGLE + LEFT_GAIN * smoothed;
    let ra = REST_ANGLE + RIGHT_GAIN * smoothed;
    let ls = (cx - 0.15, 0.55);
    let rs = (cx + 0.15, 0.55);
    let p = Pose {
        head,
        mouth: (head.0, head.1 + 0.055),
        mouth_h: 0.012 + 0.05 * aperture,
        l_shoulder: ls,
        r_shoulder: rs,
        l_hand: (ls.0 - LIMB_LEN * la.sin(), ls.1 + LIMB_LEN * la.cos()),
        r_hand: (rs.0 + LIMB_LEN * ra.sin(), rs.1 + LIMB_LEN * ra.cos()),
        torso: (cx, 0.78),
    };
    (p, la, ra)
}

fn seg_dist2(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (vx, vy) = (b.0 - a.0, b.1 - a.1);
    let (wx, wy) = (p.0 - a.0, p.1 - a.1);
    let t = ((wx * vx + wy * vy) / (vx * vx + vy * vy)).clamp(0.0, 1.0);
    let (dx, dy) = (wx - t * vx, wy - t * vy);
    dx * dx + dy * dy
}

fn shade(fig: &Figure, p: &Pose, u: f64, v: f64) -> [f32; 3] {
    let pal = &fig.palette;
    let d2 = |c: (f64, f64)| (u - c.0).powi(2) + (v - c.1).powi(2);
    if (u - p.mouth.0).abs() < 0.05 && (v - p.mouth.1).abs() < p.mouth_h / 2.0 {
        return pal.mouth;
    }
    if d2(p.head) < HEAD_R * HEAD_R {
        return pal.skin;
    }
    if d2(p.l_hand) < HAND_R * HAND_R || d2(p.r_hand) < HAND_R * HAND_R {
        return pal.skin;
    }
    if seg_dist2((u, v), p.l_shoulder, p.l_hand) < LIMB_R * LIMB_R {
        return pal.left_limb;
    }
    if seg_dist2((u, v), p.r_shoulder, p.r_hand) < LIMB_R * LIMB_R {
        return pal.right_limb;
    }
    let (ex, ey) = ((u - p.torso.0) / 0.2, (v - p.torso.1) / 0.27);
    if ex * ex + ey * ey < 1.0 {
        return pal.torso;
    }
    pal.background
}

fn render(fig: &Figure, p: &Pose, width: usize, height: usize) -> Result<Image> {
    let mut px = Vec::with_capacity(width * height * 3);
    let n = (SUPERSAMPLE * SUPERSAMPLE) as f32;
    for y in 0..height {
        for x in 0..width {
            let mut acc = [0f32; 3];
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let u = (x as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64) / width as f64;
                    let v = (y as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64) / height as f64;
                    let c = shade(fig, p, u, v);
                    for k in 0..3 {
                        acc[k] += c[k];
                    }
                }
            }
            px.extend(acc.iter().map(|a| a / n));
        }
    }
    Image::from_clamped(height, width, px)
}

fn jitter(rng: &mut ChaCha8Rng, base: [f32; 3], amount: f32) -> [f32; 3] {
    base.map(|c| (c + amount * (rng.random::<f32>() - 0.5)).clamp(0.0, 1.0))
}

/// Slow amplitude envelope in `[0, 1]` from a few random low-frequency
/// sinusoids.
fn envelope_fn(rng: &mut ChaCha8Rng) -> impl Fn(f64) -> f64 {
    let comps: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                0.3 + rng.random::<f64>(),
                0.4 + 1.4 * rng.random::<f64>(),
                std::f64::consts::TAU * rng.random::<f64>(),
            )
        })
        .collect();
    let total: f64 = comps.iter().map(|c| c.0).sum();
    move |t: f64| {
        let s: f64 = comps
            .iter()
            .map(|(a, f, ph)| a * (std::f64::consts::TAU * f * t + ph).sin())
            .sum();
        (0.5 + 0.5 * s / total).clamp(0.0, 1.0)
    }
}

/// Frame-window RMS of a waveform: frame `i` covers `[i/fps, (i+1)/fps)`.
pub fn frame_rms(samples: &[f32], sample_rate: u32, fps: f64, n_frames: usize) -> Vec<f64> {
    (0..n_frames)
        .map(|i| {
            let a = ((i as f64 / fps) * sample_rate as f64).round() as usize;
            let b = (((i + 1) as f64 / fps) * sample_rate as f64).round() as usize;
            let b = b.min(samples.len());
            if a >= b {
                return 0.0;
            }
            let ss: f64 = samples[a..b].iter().map(|&s| (s as f64).powi(2)).sum();
            (ss / (b - a) as f64).sqrt()
        })
        .collect()
}

pub struct SynthClip {
    pub frames: Vec<Image>,
    pub boxes: Vec<FrameBoxes>,
    pub truth: Vec<FrameTruth>,
    pub wave: Waveform,
}

/// Renders one clip. Pure function of `(spec, clip_index)`.
pub fn synth_clip(spec: &SyntheticSpec, clip_index: usize) -> Result<SynthClip> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ (0x9E37_79B9_7F4A_7C15u64.wrapping_mul(clip_index as u64 + 1)));
    let fig = Figure {
        dx: 0.08 * (rng.random::<f64>() - 0.5),
        palette: Palette {
            background: jitter(&mut rng, [0.88, 0.88, 0.82], 0.08),
            torso: jitter(&mut rng, [0.20, 0.30, 0.60], 0.15),
            skin: jitter(&mut rng, [0.95, 0.76, 0.62], 0.05),
            left_limb: jitter(&mut rng, [0.80, 0.20, 0.20], 0.10),
            right_limb: jitter(&mut rng, [0.20, 0.65, 0.30], 0.10),
            mouth: [0.35, 0.08, 0.10],
        },
    };
    let env = envelope_fn(&mut rng);
    let f0 = 110.0 + 110.0 * rng.random::<f64>();
    let sr = spec.sample_rate as f64;
    let n_samples = (spec.seconds * sr).round() as usize;
    let carrier = |t: f64| {
        let w = std::f64::consts::TAU * f0 * t;
        (w.sin() + 0.5 * (2.0 * w).sin() + 0.25 * (3.0 * w).sin()) / 1.75
    };
    let samples: Vec<f32> = (0..n_samples)
        .map(|i| {
            let t = i as f64 / sr;
            let noise: f64 = rng.sample(StandardNormal);
            (0.6 * env(t) * carrier(t) + 0.002 * noise) as f32
        })
        .collect();
    // Reference RMS of a full-envelope carrier, used to normalise energy.
    let ref_rms = {
        let n = sr as usize;
        let ss: f64 = (0..n).map(|i| (0.6 * carrier(i as f64 / sr)).powi(2)).sum();
        (ss / n as f64).sqrt()
    };
    let n_frames = spec.frames_per_clip();
    let rms = frame_rms(&samples, spec.sample_rate, spec.fps, n_frames);
    let (w, h) = (spec.width, spec.height);
    let to_px = |p: (f64, f64)| [p.0 * w as f64, p.1 * h as f64];
    let hand_box = (0.16 * w as f64).round().max(16.0) as u32;
    let face_box = ((2.0 * HEAD_R + 0.06) * w as f64).ceil().max(16.0) as u32;

    let mut frames = Vec::with_capacity(n_frames);
    let mut boxes = Vec::with_capacity(n_frames);
    let mut truth = Vec::with_capacity(n_frames);
    let mut smoothed = 0.0;
    for (i, r) in rms.iter().enumerate() {
        let e = (r / ref_rms).clamp(0.0, 1.0);
        smoothed = if i == 0 { e } else { smoothed + LOWPASS * (e - smoothed) };
        let (p, la, ra) = pose(&fig, e, smoothed, e);
        frames.push(render(&fig, &p, w, h)?);
        let (lh, rh, hd, mo) = (to_px(p.l_hand), to_px(p.r_hand), to_px(p.head), to_px(p.mouth));
        boxes.push(FrameBoxes {
            hands: vec![
                BoxRect::centered(lh[0], lh[1], hand_box, w, h),
                BoxRect::centered(rh[0], rh[1], hand_box, w, h),
            ],
            face: BoxRect::centered(hd[0], hd[1], face_box, w, h),
            lip: Some(BoxRect::centered(mo[0], mo[1], 16, w, h)),
        });
        truth.push(FrameTruth {
            envelope: e,
            mouth_aperture: e,
            left_angle: la,
            right_angle: ra,
            left_hand: lh,
            right_hand: rh,
            head: hd,
            mouth: mo,
        });
    }
    Ok(SynthClip {
        frames,
        boxes,
        truth,
        wave: Waveform {
            samples,
            sample_rate: spec.sample_rate,
        },
    })
}

/// Writes a synthetic dataset under `root` and returns its manifest. Output
/// is byte-identical for identical `spec`.
pub fn generate_synthetic_dataset(root: &Path, spec: &SyntheticSpec) -> Result<DatasetManifest> {
    spec.validate()?;
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut records = Vec::with_capacity(spec.clips);
    for c in 0..spec.clips {
        let id = format!("{c:04}");
        let dir = root.join("clips").join(&id);
        let frames_dir = dir.join("frames");
        if frames_dir.exists() {
            fs::remove_dir_all(&frames_dir).map_err(|e| Error::io(&frames_dir, e))?;
        }
        let clip = synth_clip(spec, c)?;
        save_frames(&frames_dir, &clip.frames)?;
        clip.wave.write_wav(&dir.join("audio.wav"))?;
        write_boxes(&dir.join("boxes.json"), &clip.boxes)?;
        let truth_path = dir.join("truth.json");
        fs::write(&truth_path, serde_json::to_string(&clip.truth)? + "\n")
            .map_err(|e| Error::io(&truth_path, e))?;
        let split = if c + spec.holdout_clips >= spec.clips {
            Split::Test
        } else {
            Split::Train
        };
        records.push(ClipRecord {
            id: id.clone(),
            frames_dir: format!("clips/{id}/frames"),
            audio: format!("clips/{id}/audio.wav"),
            split,
            boxes: Some(format!("clips/{id}/boxes.json")),
            num_frames: clip.frames.len(),
        });
    }
    let manifest = DatasetManifest {
        format_version: MANIFEST_VERSION,
        seed: spec.seed,
        width: spec.width,
        height: spec.height,
        fps: spec.fps,
        sample_rate: spec.sample_rate,
        clips: records,
        root: root.to_path_buf(),
    };
    manifest.save()?;
    Ok(manifest)
}

pub fn read_truth(path: &Path) -> Result<Vec<FrameTruth>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// 16-bit round trip of a waveform, as a reader of the WAV would see it.
pub fn quantized(samples: &[f32]) -> Vec<f32> {
    samples
        .iter()
        .map(|&s| quantize_i16(s) as f32 / 32768.0)
        .collect()
}
