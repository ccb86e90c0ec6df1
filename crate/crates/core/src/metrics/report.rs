//! Region-wise and set-level evaluation report.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use super::frechet::{diversity, fgd};
use super::quality::{lpips_proxy, psnr_from_mse, squared_error, ssim};
use super::video::VideoFeatureNet;
use crate::error::{Error, Result};
use crate::losses::PerceptualNet;
use crate::media_io::image::{BoxRect, Image, VideoClip};

pub const REPORT_VERSION: u32 = 1;
pub const REGIONS: [&str; 3] = ["hand", "lip", "full"];

/// Finite numbers as JSON numbers; infinities as the strings `"inf"` and
/// `"-inf"`.
pub mod inf_sentinel {
    use super::*;

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
        if v.is_infinite() {
            s.serialize_str(if *v > 0.0 { "inf" } else { "-inf" })
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Num {
            F(f64),
            S(String),
        }
        match Num::deserialize(d)? {
            Num::F(v) => Ok(v),
            Num::S(s) if s == "inf" => Ok(f64::INFINITY),
            Num::S(s) if s == "-inf" => Ok(f64::NEG_INFINITY),
            Num::S(s) => Err(serde::de::Error::custom(format!("unexpected number string `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionMetrics {
    #[serde(with = "inf_sentinel")]
    pub psnr: f64,
    pub ssim: f64,
    pub lpips: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SetMetrics {
    pub fgd: f64,
    pub div: f64,
    pub fvd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricReport {
    pub version: u32,
    pub provenance: BTreeMap<String, String>,
    pub regions: BTreeMap<String, RegionMetrics>,
    pub set_metrics: SetMetrics,
    pub config_hash: String,
}

impl MetricReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let r: Self = serde_json::from_str(&text)?;
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != REPORT_VERSION {
            return Err(Error::Invalid(format!("unsupported report version {}", self.version)));
        }
        let keys: Vec<&str> = self.regions.keys().map(String::as_str).collect();
        let mut want = REGIONS.to_vec();
        want.sort();
        if keys != want {
            return Err(Error::Invalid(format!("report regions {keys:?}")));
        }
        Ok(())
    }
}

/// Hex SHA-256 of a canonical JSON rendering of `config`.
pub fn config_hash<T: Serialize>(config: &T) -> Result<String> {
    let v = serde_json::to_value(config)?;
    let text = serde_json::to_string(&v)?;
    let digest = Sha256::digest(text.as_bytes());
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

/// Frozen feature nets used by the proxy metrics.
#[derive(Debug, Clone)]
pub struct MetricNets {
    pub perceptual: PerceptualNet,
    pub video: VideoFeatureNet,
}

/// Inputs to [`evaluate_report`]. Clips are paired by index and must have
/// equal frame counts; boxes come from the real clips.
pub struct EvalInputs<'a> {
    pub real: &'a [VideoClip],
    pub generated: &'a [VideoClip],
    /// Per-frame motion features of all real and generated frames.
    pub real_motion: &'a [Vec<f64>],
    pub generated_motion: &'a [Vec<f64>],
    /// Provenance of the motion features, e.g. `"proxy:lpe"`.
    pub motion_provenance: &'a str,
    pub peak: f64,
}

#[derive(Default)]
struct RegionAccumulator {
    sse: f64,
    count: usize,
    ssim_sum: f64,
    lpips_sum: f64,
    pairs: usize,
}

impl RegionAccumulator {
    fn add(&mut self, a: &Image, b: &Image, net: &PerceptualNet) -> Result<()> {
        let (sse, n) = squared_error(a, b)?;
        self.sse += sse;
        self.count += n;
        self.ssim_sum += ssim(a, b)?;
        self.lpips_sum += lpips_proxy(a, b, net)?;
        self.pairs += 1;
        Ok(())
    }

    fn finish(&self, peak: f64) -> Result<RegionMetrics> {
        if self.pairs == 0 {
            return Err(Error::Invalid("no samples for region".into()));
        }
        Ok(RegionMetrics {
            psnr: psnr_from_mse(self.sse / self.count as f64, peak)?,
            ssim: self.ssim_sum / self.pairs as f64,
            lpips: self.lpips_sum / self.pairs as f64,
        })
    }
}

/// Full-reference metrics on hand crops, lip crops and whole frames, plus
/// the set metrics (Fréchet distance and diversity of motion features,
/// Fréchet distance of video features).
pub fn evaluate_report<C: Serialize>(inputs: &EvalInputs<'_>, nets: &MetricNets, config: &C) -> Result<MetricReport> {
    if inputs.real.len() != inputs.generated.len() || inputs.real.is_empty() {
        return Err(Error::Invalid(format!(
            "{} real and {} generated clips; need equal nonzero counts",
            inputs.real.len(),
            inputs.generated.len()
        )));
    }
    let mut acc: BTreeMap<&str, RegionAccumulator> = REGIONS.iter().map(|r| (*r, RegionAccumulator::default())).collect();
    let mut real_video = Vec::new();
    let mut gen_video = Vec::new();
    for (ci, (r, g)) in inputs.real.iter().zip(inputs.generated).enumerate() {
        if r.len() != g.len() {
            return Err(Error::Invalid(format!("clip {ci}: {} real vs {} generated frames", r.len(), g.len())));
        }
        let boxes = r
            .region_boxes
            .as_ref()
            .ok_or_else(|| Error::Invalid(format!("clip {ci} has no region boxes")))?;
        for (fi, (a, b)) in r.frames.iter().zip(&g.frames).enumerate() {
            let fb = &boxes[fi];
            for h in &fb.hands {
                add_crop(acc.get_mut("hand").expect("region"), a, b, h, &nets.perceptual)?;
            }
            add_crop(acc.get_mut("lip").expect("region"), a, b, &fb.lip_or_face_lower(), &nets.perceptual)?;
            acc.get_mut("full").expect("region").add(a, b, &nets.perceptual)?;
        }
        real_video.extend(nets.video.clip_features(&r.frames)?);
        gen_video.extend(nets.video.clip_features(&g.frames)?);
    }
    let mut regions = BTreeMap::new();
    for (name, a) in &acc {
        regions.insert(name.to_string(), a.finish(inputs.peak)?);
    }
    let set_metrics = SetMetrics {
        fgd: fgd(inputs.real_motion, inputs.generated_motion)?,
        div: diversity(inputs.generated_motion)?,
        fvd: fgd(&real_video, &gen_video)?,
    };
    let mut provenance = BTreeMap::new();
    provenance.insert("fgd".to_string(), inputs.motion_provenance.to_string());
    provenance.insert("div".to_string(), inputs.motion_provenance.to_string());
    provenance.insert("fvd".to_string(), format!("proxy:random-frozen-3d-conv:seed={}", nets.video.seed()));
    provenance.insert("lpips".to_string(), format!("proxy:{}", nets.perceptual.provenance().as_str()));
    Ok(MetricReport {
        version: REPORT_VERSION,
        provenance,
        regions,
        set_metrics,
        config_hash: config_hash(config)?,
    })
}

fn add_crop(acc: &mut RegionAccumulator, a: &Image, b: &Image, bx: &BoxRect, net: &PerceptualNet) -> Result<()> {
    acc.add(&a.crop(bx)?, &b.crop(bx)?, net)
}
