//! On-disk dataset layout:
//!
//! ```text
//! <root>/manifest.json
//! <root>/clips/<id>/frames/%05d.png
//! <root>/clips/<id>/audio.wav
//! <root>/clips/<id>/boxes.json      (optional)
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::audio::{extract_audio_features, AudioFeatureConfig, AudioFeatures, Waveform};
use super::image::{FrameBoxes, Image, VideoClip};
use crate::error::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipRecord {
    pub id: String,
    /// Paths are relative to the dataset root.
    pub frames_dir: String,
    pub audio: String,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boxes: Option<String>,
    pub num_frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub fps: f64,
    pub sample_rate: u32,
    pub clips: Vec<ClipRecord>,
    #[serde(skip)]
    pub root: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BoxesFile {
    frames: Vec<FrameBoxes>,
}

impl DatasetManifest {
    pub fn manifest_path(root: &Path) -> PathBuf {
        root.join("manifest.json")
    }

    /// Reads and validates a manifest: version supported, every referenced
    /// path present, split tags unique per clip id.
    pub fn load(root: &Path) -> Result<Self> {
        let path = Self::manifest_path(root);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut m: DatasetManifest = serde_json::from_str(&text)?;
        if m.format_version != MANIFEST_VERSION {
            return Err(Error::Invalid(format!(
                "unsupported manifest format_version {}",
                m.format_version
            )));
        }
        m.root = root.to_path_buf();
        let mut ids = std::collections::BTreeSet::new();
        for c in &m.clips {
            if !ids.insert(c.id.clone()) {
                return Err(Error::Invalid(format!("duplicate clip id `{}`", c.id)));
            }
            for rel in [Some(&c.frames_dir), Some(&c.audio), c.boxes.as_ref()]
                .into_iter()
                .flatten()
            {
                let p = root.join(rel);
                if !p.exists() {
                    return Err(Error::MissingFile(p));
                }
            }
        }
        Ok(m)
    }

    pub fn save(&self) -> Result<()> {
        let path = Self::manifest_path(&self.root);
        let text = serde_json::to_string_pretty(self)? + "\n";
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.clips.len())
            .filter(|&i| self.clips[i].split == split)
            .collect()
    }

    pub fn clip_dir(&self, index: usize) -> PathBuf {
        self.root.join("clips").join(&self.clips[index].id)
    }
}

/// Sorted list of PNG frames inside `dir`.
pub fn list_frames(dir: &Path) -> Result<Vec<PathBuf>> {
    let rd = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut frames: Vec<PathBuf> = rd
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    frames.sort();
    Ok(frames)
}

pub fn load_frames(dir: &Path) -> Result<Vec<Image>> {
    let paths = list_frames(dir)?;
    let frames = paths
        .iter()
        .map(|p| Image::load_png(p))
        .collect::<Result<Vec<_>>>()?;
    if let Some(f) = frames.first() {
        if frames
            .iter()
            .any(|g| g.height() != f.height() || g.width() != f.width())
        {
            return Err(Error::Shape(format!("mismatched frame sizes in {}", dir.display())));
        }
    }
    Ok(frames)
}

pub fn save_frames(dir: &Path, frames: &[Image]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, f) in frames.iter().enumerate() {
        f.save_png(&dir.join(format!("{i:05}.png")))?;
    }
    Ok(())
}

pub fn read_boxes(path: &Path) -> Result<Vec<FrameBoxes>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let f: BoxesFile = serde_json::from_str(&text)?;
    Ok(f.frames)
}

pub fn write_boxes(path: &Path, frames: &[FrameBoxes]) -> Result<()> {
    let text = serde_json::to_string(&BoxesFile {
        frames: frames.to_vec(),
    })? + "\n";
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Loads clip `index`: frames normalised to `[0, 1]`, boxes if the record has
/// them, and audio features with `audio_cfg`.
pub fn load_clip(
    manifest: &DatasetManifest,
    index: usize,
    audio_cfg: &AudioFeatureConfig,
) -> Result<(VideoClip, AudioFeatures)> {
    let rec = manifest.clips.get(index).ok_or(Error::OutOfRange {
        index,
        len: manifest.clips.len(),
    })?;
    let frames = load_frames(&manifest.root.join(&rec.frames_dir))?;
    if frames.is_empty() {
        return Err(Error::Invalid(format!("clip `{}` has no frames", rec.id)));
    }
    let boxes = match &rec.boxes {
        Some(b) => Some(read_boxes(&manifest.root.join(b))?),
        None => None,
    };
    let clip = VideoClip::new(frames, manifest.fps, boxes)?;
    let wave = Waveform::read_wav(&manifest.root.join(&rec.audio))?;
    let feats = extract_audio_features(&wave, audio_cfg)?;
    Ok((clip, feats))
}
