//! Waveform IO and log-mel / MFCC feature extraction.

use std::path::Path;

use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    LogMel,
    Mfcc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AudioFeatureConfig {
    pub bands: usize,
    pub hop_seconds: f64,
    pub window_seconds: f64,
    pub kind: FeatureKind,
    /// Energies below this are clamped before the log.
    pub log_floor: f64,
}

impl Default for AudioFeatureConfig {
    fn default() -> Self {
        Self {
            bands: 26,
            hop_seconds: 0.01,
            window_seconds: 0.025,
            kind: FeatureKind::LogMel,
            log_floor: 1e-10,
        }
    }
}

/// `rows x bands` feature matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioFeatures {
    pub features: Vec<f32>,
    pub rows: usize,
    pub bands: usize,
    pub hop_seconds: f64,
}

impl AudioFeatures {
    pub fn row(&self, i: usize) -> &[f32] {
        &self.features[i * self.bands..(i + 1) * self.bands]
    }

    pub fn duration_seconds(&self) -> f64 {
        self.rows as f64 * self.hop_seconds
    }

    /// Feature rows covered by video frame `frame` at `fps`: starting at
    /// `floor(frame * hop_ratio)` where `hop_ratio = (1/fps) / hop`. Always
    /// non-empty and in bounds.
    pub fn frame_rows(&self, frame: usize, fps: f64) -> std::ops::Range<usize> {
        let ratio = 1.0 / (fps * self.hop_seconds);
        let last = self.rows.saturating_sub(1);
        let start = ((frame as f64 * ratio).floor() as usize).min(last);
        let end = (((frame + 1) as f64 * ratio).floor() as usize)
            .max(start + 1)
            .min(self.rows);
        start..end.max(start + 1)
    }

    /// One averaged feature vector per video frame.
    pub fn per_frame(&self, n_frames: usize, fps: f64) -> Vec<Vec<f32>> {
        (0..n_frames)
            .map(|i| {
                let r = self.frame_rows(i, fps);
                let n = r.len() as f32;
                let mut acc = vec![0f32; self.bands];
                for row in r {
                    for (a, v) in acc.iter_mut().zip(self.row(row)) {
                        *a += v;
                    }
                }
                acc.iter_mut().for_each(|a| *a /= n);
                acc
            })
            .collect()
    }
}

/// Mono waveform in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn read_wav(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let mut reader = hound::WavReader::open(path)
            .map_err(|e| Error::Audio(format!("{}: {e}", path.display())))?;
        let spec = reader.spec();
        let ch = spec.channels.max(1) as usize;
        let raw: Vec<f32> = match spec.sample_format {
            hound::SampleFormat::Int => {
                let scale = (1i64 << (spec.bits_per_sample - 1)) as f32;
                reader
                    .samples::<i32>()
                    .map(|s| s.map(|v| v as f32 / scale))
                    .collect::<std::result::Result<_, _>>()
            }
            hound::SampleFormat::Float => reader.samples::<f32>().collect(),
        }
        .map_err(|e| Error::Audio(format!("{}: {e}", path.display())))?;
        let samples = raw
            .chunks(ch)
            .map(|c| c.iter().sum::<f32>() / c.len() as f32)
            .collect();
        Ok(Self {
            samples,
            sample_rate: spec.sample_rate,
        })
    }

    /// Writes 16-bit mono PCM.
    pub fn write_wav(&self, path: &Path) -> Result<()> {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: self.sample_rate,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(path, spec)
            .map_err(|e| Error::Audio(format!("{}: {e}", path.display())))?;
        for &s in &self.samples {
            w.write_sample(quantize_i16(s))
                .map_err(|e| Error::Audio(e.to_string()))?;
        }
        w.finalize().map_err(|e| Error::Audio(e.to_string()))
    }
}

pub fn quantize_i16(s: f32) -> i16 {
    (s.clamp(-1.0, 1.0) * 32767.0).round() as i16
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular mel filterbank, `bands x (n_fft/2 + 1)`. Also returns the band
/// centre frequencies in Hz.
pub fn mel_filterbank(bands: usize, n_fft: usize, sample_rate: u32) -> (Vec<Vec<f64>>, Vec<f64>) {
    let n_bins = n_fft / 2 + 1;
    let fmax = sample_rate as f64 / 2.0;
    let (mlo, mhi) = (hz_to_mel(0.0), hz_to_mel(fmax));
    let edges: Vec<f64> = (0..bands + 2)
        .map(|i| mel_to_hz(mlo + (mhi - mlo) * i as f64 / (bands + 1) as f64))
        .collect();
    let bin_hz = |k: usize| k as f64 * sample_rate as f64 / n_fft as f64;
    let filters = (0..bands)
        .map(|b| {
            let (lo, c, hi) = (edges[b], edges[b + 1], edges[b + 2]);
            (0..n_bins)
                .map(|k| {
                    let f = bin_hz(k);
                    if f <= lo || f >= hi {
                        0.0
                    } else if f <= c {
                        (f - lo) / (c - lo)
                    } else {
                        (hi - f) / (hi - c)
                    }
                })
                .collect()
        })
        .collect();
    (filters, edges[1..=bands].to_vec())
}

/// Log-mel (or MFCC) features. Frame `t` is a Hann window centred on sample
/// `t * hop`, zero-padded at the edges; there are `len / hop` frames.
pub fn extract_audio_features(wave: &Waveform, cfg: &AudioFeatureConfig) -> Result<AudioFeatures> {
    if wave.sample_rate == 0 {
        return Err(Error::Audio("sample rate must be positive".into()));
    }
    if cfg.bands == 0 || !(cfg.hop_seconds > 0.0) || !(cfg.window_seconds > 0.0) {
        return Err(Error::Config("invalid audio feature config".into()));
    }
    let sr = wave.sample_rate as f64;
    let hop = (cfg.hop_seconds * sr).round().max(1.0) as usize;
    let win = (cfg.window_seconds * sr).round().max(1.0) as usize;
    if wave.samples.len() < hop {
        return Err(Error::Audio(format!(
            "waveform of {} samples is shorter than one hop ({hop})",
            wave.samples.len()
        )));
    }
    let n_fft = win.next_power_of_two();
    let rows = wave.samples.len() / hop;
    let (filters, _) = mel_filterbank(cfg.bands, n_fft, wave.sample_rate);
    let hann: Vec<f64> = (0..win)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / win as f64).cos())
        .collect();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n_fft);
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    let mut features = Vec::with_capacity(rows * cfg.bands);
    let floor_log = cfg.log_floor.ln();
    for t in 0..rows {
        let centre = (t * hop) as isize;
        let start = centre - (win / 2) as isize;
        buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
        for (i, w) in hann.iter().enumerate() {
            let idx = start + i as isize;
            if idx >= 0 && (idx as usize) < wave.samples.len() {
                buf[i].re = wave.samples[idx as usize] as f64 * w;
            }
        }
        fft.process(&mut buf);
        let power: Vec<f64> = buf[..n_fft / 2 + 1]
            .iter()
            .map(|c| c.norm_sqr() / n_fft as f64)
            .collect();
        let logmel: Vec<f64> = filters
            .iter()
            .map(|f| {
                let e: f64 = f.iter().zip(&power).map(|(a, b)| a * b).sum();
                if e > cfg.log_floor {
                    e.ln()
                } else {
                    floor_log
                }
            })
            .collect();
        match cfg.kind {
            FeatureKind::LogMel => features.extend(logmel.iter().map(|&v| v as f32)),
            FeatureKind::Mfcc => features.extend(dct2_ortho(&logmel).iter().map(|&v| v as f32)),
        }
    }
    Ok(AudioFeatures {
        features,
        rows,
        bands: cfg.bands,
        hop_seconds: hop as f64 / sr,
    })
}

fn dct2_ortho(x: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    (0..x.len())
        .map(|k| {
            let s: f64 = x
                .iter()
                .enumerate()
                .map(|(i, v)| v * (std::f64::consts::PI * k as f64 * (i as f64 + 0.5) / n).cos())
                .sum();
            let norm = if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
            s * norm
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(freq: f64, seconds: f64, sr: u32) -> Waveform {
        let n = (seconds * sr as f64) as usize;
        Waveform {
            samples: (0..n)
                .map(|i| (0.5 * (2.0 * std::f64::consts::PI * freq * i as f64 / sr as f64).sin()) as f32)
                .collect(),
            sample_rate: sr,
        }
    }

    #[test]
    fn silence_is_log_floor_everywhere() {
        let w = Waveform {
            samples: vec![0.0; 8000],
            sample_rate: 16000,
        };
        let cfg = AudioFeatureConfig::default();
        let f = extract_audio_features(&w, &cfg).unwrap();
        let floor = cfg.log_floor.ln() as f32;
        assert!(f.features.iter().all(|&v| v == floor));
    }

    #[test]
    fn two_seconds_at_ten_ms_hop_is_200_rows() {
        let f = extract_audio_features(&tone(440.0, 2.0, 16000), &AudioFeatureConfig::default()).unwrap();
        assert_eq!(f.rows, 200);
        assert_eq!(f.bands, 26);
    }

    #[test]
    fn pure_tone_peaks_in_the_band_containing_it() {
        let cfg = AudioFeatureConfig::default();
        let f = extract_audio_features(&tone(440.0, 1.0, 16000), &cfg).unwrap();
        // Oracle: the band whose triangle, evaluated at exactly 440 Hz, is largest.
        let (mlo, mhi) = (hz_to_mel(0.0), hz_to_mel(8000.0));
        let edges: Vec<f64> = (0..cfg.bands + 2)
            .map(|i| mel_to_hz(mlo + (mhi - mlo) * i as f64 / (cfg.bands + 1) as f64))
            .collect();
        let weight = |b: usize| {
            let (lo, c, hi) = (edges[b], edges[b + 1], edges[b + 2]);
            if 440.0 <= lo || 440.0 >= hi {
                0.0
            } else if 440.0 <= c {
                (440.0 - lo) / (c - lo)
            } else {
                (hi - 440.0) / (hi - c)
            }
        };
        let expected = (0..cfg.bands)
            .max_by(|&a, &b| weight(a).total_cmp(&weight(b)))
            .unwrap();
        for r in 0..f.rows {
            let row = f.row(r);
            let arg = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            assert_eq!(arg, expected, "row {r}");
        }
    }

    #[test]
    fn too_short_waveform_errors() {
        let w = Waveform {
            samples: vec![0.0; 100],
            sample_rate: 16000,
        };
        assert!(extract_audio_features(&w, &AudioFeatureConfig::default()).is_err());
    }

    #[test]
    fn frame_rows_cover_all_rows_without_overflow() {
        let f = AudioFeatures {
            features: vec![0.0; 200 * 2],
            rows: 200,
            bands: 2,
            hop_seconds: 0.01,
        };
        let mut covered = vec![false; 200];
        for i in 0..32 {
            let r = f.frame_rows(i, 16.0);
            assert!(r.end <= 200 && !r.is_empty());
            r.for_each(|k| covered[k] = true);
        }
        assert!(covered.iter().all(|&c| c));
    }

    #[test]
    fn mfcc_of_silence_is_constant_rows() {
        let w = Waveform {
            samples: vec![0.0; 1600],
            sample_rate: 16000,
        };
        let cfg = AudioFeatureConfig {
            kind: FeatureKind::Mfcc,
            ..Default::default()
        };
        let f = extract_audio_features(&w, &cfg).unwrap();
        for r in 1..f.rows {
            assert_eq!(f.row(r), f.row(0));
        }
    }
}
