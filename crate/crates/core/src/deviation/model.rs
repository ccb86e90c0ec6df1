//! The stage-1 image animation model: source encoding, motion estimation,
//! flow, warping, deviation gating and decoding.

use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use super::flow::{decode_flow, decode_global_flow, FlowField, MaskPredictor, PoseTransform, RegionMasks, RegionTransforms};
use super::gate::{activation, compute_deviation, gated_decode, CallCounter, DeviationHead, Gate, UpBlock};
use super::warp::grid_sample;
use crate::encoder::{enhance_features, EncoderConfig, EnhancerParams, FeaturePyramid, ImageEncoder};
use crate::error::{Error, Result};
use crate::media_io::image::check_encodable_size;
use crate::nn::{leaky, upsample2, Conv2d, Init, Linear, ParamStore, Scope};

/// Table-3 style switches. All off reproduces the default model.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationFlags {
    #[serde(default)]
    pub disable_deviation: bool,
    #[serde(default)]
    pub disable_enhancer: bool,
    #[serde(default)]
    pub disable_motion_decoder: bool,
}

impl AblationFlags {
    /// Parses a flag name as used on the command line.
    pub fn set(&mut self, name: &str) -> Result<()> {
        match name {
            "disable_deviation" | "w/o-dev" => self.disable_deviation = true,
            "disable_enhancer" | "w/o-enhancer" => self.disable_enhancer = true,
            "disable_motion_decoder" | "w/o-mo-dec" => self.disable_motion_decoder = true,
            "none" | "" => {}
            other => return Err(Error::Config(format!("unknown ablation flag `{other}`"))),
        }
        Ok(())
    }

    pub fn from_names<S: AsRef<str>>(names: &[S]) -> Result<Self> {
        let mut f = Self::default();
        for n in names {
            f.set(n.as_ref())?;
        }
        Ok(f)
    }

    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.disable_deviation {
            parts.push("disable_deviation");
        }
        if self.disable_enhancer {
            parts.push("disable_enhancer");
        }
        if self.disable_motion_decoder {
            parts.push("disable_motion_decoder");
        }
        if parts.is_empty() {
            "full".to_string()
        } else {
            parts.join("+")
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageOneConfig {
    pub height: usize,
    pub width: usize,
    pub encoder: EncoderConfig,
    /// Motion feature length.
    pub k: usize,
    pub regions: usize,
    pub pose_hidden: usize,
    pub lpe_base_width: usize,
    pub c_lambda: f64,
    /// Upper bound of the deviation map.
    pub deviation_l: f64,
    /// Learn a multiplicative correction `exp(s)` to the deviation bound.
    pub learn_l: bool,
    /// Drive the flow with the difference between driving and source
    /// transforms instead of the driving transforms alone.
    pub relative_motion: bool,
    pub ablation: AblationFlags,
}

impl Default for StageOneConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            encoder: EncoderConfig::default(),
            k: 64,
            regions: 10,
            pose_hidden: 128,
            lpe_base_width: 8,
            c_lambda: 0.2,
            deviation_l: 1.0,
            learn_l: false,
            relative_motion: true,
            ablation: AblationFlags::default(),
        }
    }
}

impl StageOneConfig {
    pub fn validate(&self) -> Result<()> {
        check_encodable_size(self.height, self.width, self.encoder.depth)?;
        if self.k == 0 || self.regions == 0 || self.pose_hidden == 0 || self.lpe_base_width == 0 {
            return Err(Error::Config("model sizes must be positive".into()));
        }
        if !(self.deviation_l > 0.0) || !self.deviation_l.is_finite() {
            return Err(Error::Config("deviation_l must be positive".into()));
        }
        if !self.c_lambda.is_finite() {
            return Err(Error::Config("c_lambda must be finite".into()));
        }
        Ok(())
    }
}

/// Latent pose estimator: stride-2 conv stack, flatten, linear to `K`.
#[derive(Debug, Clone)]
pub struct LatentPoseEstimator {
    convs: Vec<Conv2d>,
    fc: Linear,
    slope: f64,
    k: usize,
}

impl LatentPoseEstimator {
    pub fn new(scope: &mut Scope<'_>, height: usize, width: usize, depth: usize, base: usize, k: usize, slope: f64) -> Result<Self> {
        check_encodable_size(height, width, depth)?;
        let mut convs = Vec::with_capacity(depth);
        let mut c_in = 3;
        for i in 0..depth {
            let c = base << i;
            convs.push(Conv2d::new(scope, &format!("conv{i}"), c_in, c, 3, 2)?);
            c_in = c;
        }
        let cells = (height >> depth) * (width >> depth);
        let fc = Linear::new_plain(scope, "fc", c_in * cells, k)?;
        Ok(Self { convs, fc, slope, k })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// `(B, 3, H, W)` to `(B, K)`.
    pub fn forward(&self, images: &Tensor) -> Result<Tensor> {
        let b = images.dim(0)?;
        let mut x = images.clone();
        for c in &self.convs {
            x = leaky(&c.forward(&x)?, self.slope)?;
        }
        self.fc.forward(&x.reshape((b, ()))?)
    }
}

/// Everything about the source image that does not depend on the driving
/// motion; computed once per source when animating many frames.
#[derive(Debug, Clone)]
pub struct SourceEncoding {
    pub pyramid: FeaturePyramid,
    /// Full-resolution lifted source image.
    pub lifted: Tensor,
    /// Enhanced deepest feature `F'` (or `F` when the enhancer is disabled).
    pub enhanced: Tensor,
    pub masks: RegionMasks,
    pub mf: Tensor,
    pub transforms: RegionTransforms,
}

/// Intermediate values of one reconstruction, for tests and diagnostics.
#[derive(Debug, Clone)]
pub struct ReconstructTrace {
    pub output: Tensor,
    /// Flow per decoder scale, finest first.
    pub flows: Vec<FlowField>,
    /// Deviation maps per gated scale, finest first (empty when disabled).
    pub deviations: Vec<Tensor>,
    pub transforms: RegionTransforms,
}

#[derive(Debug, Clone)]
pub struct StageOneModel {
    cfg: StageOneConfig,
    encoder: ImageEncoder,
    enhancer: EnhancerParams,
    lpe: LatentPoseEstimator,
    pose: PoseTransform,
    masks: MaskPredictor,
    lift: Conv2d,
    deviation: Vec<DeviationHead>,
    log_l: Option<Var>,
    ups: Vec<UpBlock>,
    head1: Conv2d,
    head2: Conv2d,
    counter: CallCounter,
}

pub const STAGE1_PREFIX: &str = "stage1";

impl StageOneModel {
    /// Registers every stage-1 parameter under `stage1.*`.
    pub fn new(store: &mut ParamStore, cfg: &StageOneConfig) -> Result<Self> {
        cfg.validate()?;
        let widths = cfg.encoder.widths();
        let depth = cfg.encoder.depth;
        let slope = cfg.encoder.slope;
        let mut root = store.scope(STAGE1_PREFIX);
        let encoder = ImageEncoder::new(&mut root.sub("encoder"), &cfg.encoder)?;
        let enhancer = EnhancerParams::new(&mut root.sub("enhancer"), widths[depth - 1], cfg.encoder.epsilon)?;
        let lpe = LatentPoseEstimator::new(
            &mut root.sub("lpe"),
            cfg.height,
            cfg.width,
            depth,
            cfg.lpe_base_width,
            cfg.k,
            slope,
        )?;
        let pose = PoseTransform::new(&mut root.sub("pose"), cfg.k, cfg.pose_hidden, cfg.regions, slope)?;
        let masks = MaskPredictor::new(&mut root.sub("mask"), widths[0], cfg.regions, slope)?;
        // Decoder scale s has channels chans[s]; scale 0 is full resolution.
        let chans = Self::scale_channels(&cfg.encoder);
        let mut dec = root.sub("decoder");
        let lift = Conv2d::new(&mut dec, "lift", 3, chans[0], 3, 1)?;
        let mut ups = Vec::with_capacity(depth);
        for s in 0..depth {
            ups.push(UpBlock::new(&mut dec, &format!("up{s}"), chans[s + 1], chans[s])?);
        }
        let head1 = Conv2d::new(&mut dec, "head1", chans[0], chans[0], 3, 1)?;
        let head2 = Conv2d::new(&mut dec, "head2", chans[0], 3, 3, 1)?;
        drop(dec);
        let mut dev = root.sub("deviation");
        let mut deviation = Vec::with_capacity(depth);
        for (s, &c) in chans.iter().take(depth).enumerate() {
            deviation.push(DeviationHead::new(&mut dev, &format!("scale{s}"), c)?);
        }
        let log_l = if cfg.learn_l {
            Some(dev.var("log_l", &[1], Init::Zeros)?)
        } else {
            None
        };
        Ok(Self {
            cfg: cfg.clone(),
            encoder,
            enhancer,
            lpe,
            pose,
            masks,
            lift,
            deviation,
            log_l,
            ups,
            head1,
            head2,
            counter: CallCounter::default(),
        })
    }

    fn scale_channels(enc: &EncoderConfig) -> Vec<usize> {
        let mut c = vec![enc.base_width];
        c.extend(enc.widths());
        c
    }

    pub fn config(&self) -> &StageOneConfig {
        &self.cfg
    }

    /// Number of deviation-map evaluations since construction or reset.
    pub fn deviation_calls(&self) -> &CallCounter {
        &self.counter
    }

    pub fn lpe(&self) -> &LatentPoseEstimator {
        &self.lpe
    }

    pub fn encoder(&self) -> &ImageEncoder {
        &self.encoder
    }

    pub fn enhancer(&self) -> &EnhancerParams {
        &self.enhancer
    }

    pub fn pose(&self) -> &PoseTransform {
        &self.pose
    }

    /// Motion feature `(B, K)` of a `(B, 3, H, W)` batch.
    pub fn estimate_motion(&self, images: &Tensor) -> Result<Tensor> {
        self.check_images(images)?;
        self.lpe.forward(images)
    }

    fn check_images(&self, images: &Tensor) -> Result<()> {
        let (_, c, h, w) = images.dims4()?;
        if c != 3 || h != self.cfg.height || w != self.cfg.width {
            return Err(Error::Shape(format!(
                "model expects (B, 3, {}, {}), got {:?}",
                self.cfg.height,
                self.cfg.width,
                images.dims()
            )));
        }
        Ok(())
    }

    pub fn encode_source(&self, source: &Tensor) -> Result<SourceEncoding> {
        self.check_images(source)?;
        let pyramid = self.encoder.encode(source)?;
        let enhanced = if self.cfg.ablation.disable_enhancer {
            pyramid.f.clone()
        } else {
            enhance_features(&pyramid.f, &self.enhancer, self.cfg.encoder.scalar_norm)?
        };
        let lifted = activation(&self.lift.forward(source)?, self.cfg.c_lambda)?;
        let masks = self.masks.forward(&pyramid.phi[0])?;
        let mf = self.lpe.forward(source)?;
        let transforms = self.pose.forward(&mf)?;
        Ok(SourceEncoding {
            pyramid,
            lifted,
            enhanced,
            masks,
            mf,
            transforms,
        })
    }

    /// Transforms that drive the flow for a given driving motion feature.
    pub fn driving_transforms(&self, src: &SourceEncoding, mf_drive: &Tensor) -> Result<RegionTransforms> {
        let drive = self.pose.forward(mf_drive)?;
        if self.cfg.relative_motion {
            drive.relative_to(&src.transforms)
        } else {
            Ok(drive)
        }
    }

    fn flows(&self, src: &SourceEncoding, rt: &RegionTransforms) -> Result<Vec<FlowField>> {
        let depth = self.cfg.encoder.depth;
        let mut flows = Vec::with_capacity(depth + 1);
        for s in 0..=depth {
            let (h, w) = (self.cfg.height >> s, self.cfg.width >> s);
            let flow = if self.cfg.ablation.disable_motion_decoder {
                decode_global_flow(rt, h, w)?
            } else {
                let m = if s == 0 {
                    RegionMasks {
                        masks: upsample2(&src.masks.masks)?,
                    }
                } else {
                    src.masks.downsampled(s - 1)?
                };
                decode_flow(rt, &m)?
            };
            flows.push(flow);
        }
        Ok(flows)
    }

    fn deviation_bound(&self) -> Result<Option<Tensor>> {
        match &self.log_l {
            Some(v) => Ok(Some((v.as_tensor().exp()? * self.cfg.deviation_l)?)),
            None => Ok(None),
        }
    }

    /// Full trace of a reconstruction of the source under `mf_drive`.
    pub fn reconstruct_traced(&self, src: &SourceEncoding, mf_drive: &Tensor) -> Result<ReconstructTrace> {
        let depth = self.cfg.encoder.depth;
        let b = src.lifted.dim(0)?;
        if mf_drive.dims() != [b, self.cfg.k] {
            return Err(Error::Shape(format!(
                "driving motion {:?}, expected ({b}, {})",
                mf_drive.dims(),
                self.cfg.k
            )));
        }
        let rt = self.driving_transforms(src, mf_drive)?;
        let flows = self.flows(src, &rt)?;
        let mut skips = Vec::with_capacity(depth + 1);
        skips.push(grid_sample(&src.lifted, &flows[0].grid)?);
        for s in 1..depth {
            skips.push(grid_sample(&src.pyramid.phi[s - 1], &flows[s].grid)?);
        }
        skips.push(grid_sample(&src.enhanced, &flows[depth].grid)?);

        let mut gates = Vec::with_capacity(depth);
        let mut deviations = Vec::new();
        if self.cfg.ablation.disable_deviation {
            gates.resize(depth, Gate::Constant(1.0));
        } else {
            let bound = self.deviation_bound()?;
            for s in 0..depth {
                let d = match &bound {
                    None => compute_deviation(&skips[s], &self.deviation[s], self.cfg.deviation_l, Some(&self.counter))?,
                    Some(l) => {
                        let unit = compute_deviation(&skips[s], &self.deviation[s], 1.0, Some(&self.counter))?;
                        unit.broadcast_mul(l)?
                    }
                };
                deviations.push(d.clone());
                gates.push(Gate::Deviation(d));
            }
        }
        let z = gated_decode(&skips, &gates, &self.ups, self.cfg.c_lambda)?;
        let h = activation(&self.head1.forward(&z)?, self.cfg.c_lambda)?;
        let output = candle_nn::ops::sigmoid(&self.head2.forward(&h)?)?;
        Ok(ReconstructTrace {
            output,
            flows,
            deviations,
            transforms: rt,
        })
    }

    /// Reconstructed driving image `(B, 3, H, W)` with values in `[0, 1]`.
    pub fn reconstruct(&self, src: &SourceEncoding, mf_drive: &Tensor) -> Result<Tensor> {
        Ok(self.reconstruct_traced(src, mf_drive)?.output)
    }

    /// Self-supervised training forward: animate `source` with the motion of
    /// `driving`.
    pub fn forward_pair(&self, source: &Tensor, driving: &Tensor) -> Result<Tensor> {
        let src = self.encode_source(source)?;
        let mf = self.estimate_motion(driving)?;
        self.reconstruct(&src, &mf)
    }
}
