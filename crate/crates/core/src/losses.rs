//! Stage-1 objective: multi-resolution perceptual loss, hand/face local
//! losses, patch-discriminator adversarial losses and their weighted sum.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::deviation::warp::grid_sample;
use crate::error::{Error, Result};
use crate::media_io::image::BoxRect;
use crate::nn::{downsample2, leaky, Conv2d, FrozenConv, Scope};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    RandomFrozen,
    PretrainedExternal,
}

impl Provenance {
    pub fn as_str(&self) -> &'static str {
        match self {
            Provenance::RandomFrozen => "random-frozen",
            Provenance::PretrainedExternal => "pretrained-external",
        }
    }
}

/// Fixed convolutional feature extractor. Tap 0 is the input itself when
/// `pixel_tap` is set; every conv layer output is a further tap.
#[derive(Debug, Clone)]
pub struct PerceptualNet {
    layers: Vec<FrozenConv>,
    weights: Vec<f64>,
    pixel_tap: bool,
    provenance: Provenance,
}

/// Serialized layer for externally supplied weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerWeights {
    /// `[c_out, c_in, k, k]`
    pub shape: [usize; 4],
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
    pub stride: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PerceptualWeightsFile {
    pub layers: Vec<LayerWeights>,
    /// Per-tap weights `c_i`; defaults to all ones.
    #[serde(default)]
    pub tap_weights: Option<Vec<f64>>,
    #[serde(default)]
    pub pixel_tap: bool,
}

impl PerceptualNet {
    /// Seed-frozen random net: three 3x3 conv layers (8, 16, 32 channels,
    /// strides 1, 2, 2) with rectified outputs, plus the pixel tap.
    pub fn random(seed: u64, dtype: DType) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = [(3, 8, 1), (8, 16, 2), (16, 32, 2)];
        let layers = spec
            .iter()
            .map(|&(ci, co, s)| FrozenConv::random(&mut rng, ci, co, 3, s, dtype))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            weights: vec![1.0; layers.len() + 1],
            layers,
            pixel_tap: true,
            provenance: Provenance::RandomFrozen,
        })
    }

    /// Loads externally trained layers from a JSON container.
    pub fn load(path: &Path, dtype: DType) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: PerceptualWeightsFile = serde_json::from_str(&text)?;
        let mut layers = Vec::with_capacity(file.layers.len());
        for (i, l) in file.layers.iter().enumerate() {
            let n: usize = l.shape.iter().product();
            if l.weight.len() != n || l.bias.len() != l.shape[0] {
                return Err(Error::Invalid(format!("layer {i} has inconsistent array sizes")));
            }
            let w = Tensor::from_vec(l.weight.clone(), l.shape.to_vec(), &Device::Cpu)?.to_dtype(dtype)?;
            let b = Tensor::from_vec(l.bias.clone(), l.shape[0], &Device::Cpu)?.to_dtype(dtype)?;
            layers.push(FrozenConv::from_arrays(w, b, l.stride)?);
        }
        let taps = layers.len() + usize::from(file.pixel_tap);
        let weights = file.tap_weights.unwrap_or_else(|| vec![1.0; taps]);
        Self::from_layers(layers, weights, file.pixel_tap, Provenance::PretrainedExternal)
    }

    pub fn from_layers(layers: Vec<FrozenConv>, weights: Vec<f64>, pixel_tap: bool, provenance: Provenance) -> Result<Self> {
        if weights.len() != layers.len() + usize::from(pixel_tap) {
            return Err(Error::Config(format!(
                "{} tap weights for {} taps",
                weights.len(),
                layers.len() + usize::from(pixel_tap)
            )));
        }
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::Config("tap weights must be nonnegative".into()));
        }
        Ok(Self {
            layers,
            weights,
            pixel_tap,
            provenance,
        })
    }

    pub fn with_weights(mut self, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != self.weights.len() {
            return Err(Error::Config("tap weight count mismatch".into()));
        }
        self.weights = weights;
        Ok(self)
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn tap_weights(&self) -> &[f64] {
        &self.weights
    }

    /// Tap outputs for a `(B, 3, H, W)` batch.
    pub fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut taps = Vec::with_capacity(self.weights.len());
        if self.pixel_tap {
            taps.push(x.clone());
        }
        let mut h = x.clone();
        for l in &self.layers {
            h = l.forward(&h)?.relu()?;
            taps.push(h.clone());
        }
        Ok(taps)
    }

    /// Unit-normalised taps (each spatial feature vector scaled to length
    /// one), used by the perceptual similarity proxy.
    pub fn normalized_features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        self.features(x)?
            .into_iter()
            .map(|t| {
                let norm = (t.sqr()?.sum_keepdim(1)? + 1e-10)?.sqrt()?;
                Ok(t.broadcast_div(&norm)?)
            })
            .collect()
    }
}

/// `sum_j sum_i c_i * mean|V_i(down_j(a)) - V_i(down_j(b))|` over `j < levels`.
pub fn perceptual_global(a: &Tensor, b: &Tensor, net: &PerceptualNet, levels: usize) -> Result<Tensor> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("image sizes differ: {:?} vs {:?}", a.dims(), b.dims())));
    }
    if levels == 0 {
        return Err(Error::Config("perceptual pyramid needs at least one level".into()));
    }
    let (_, _, h, w) = a.dims4()?;
    let f = 1usize << (levels - 1);
    if h % f != 0 || w % f != 0 || h / f < 2 || w / f < 2 {
        return Err(Error::Shape(format!("{h}x{w} image too small for {levels} pyramid levels")));
    }
    let (mut x, mut y) = (a.clone(), b.clone());
    let mut total = Tensor::zeros((), a.dtype(), a.device())?;
    for j in 0..levels {
        if j > 0 {
            x = downsample2(&x)?;
            y = downsample2(&y)?;
        }
        total = (total + perceptual_level(&x, &y, net)?)?;
    }
    Ok(total)
}

/// One pyramid level of [`perceptual_global`].
pub fn perceptual_level(a: &Tensor, b: &Tensor, net: &PerceptualNet) -> Result<Tensor> {
    let fa = net.features(a)?;
    let fb = net.features(b)?;
    let mut total = Tensor::zeros((), a.dtype(), a.device())?;
    for ((ta, tb), &c) in fa.iter().zip(&fb).zip(&net.weights) {
        if c == 0.0 {
            continue;
        }
        let d = (ta - tb)?.abs()?.mean_all()?.to_dtype(a.dtype())?;
        total = (total + (d * c)?)?;
    }
    Ok(total)
}

/// Sampling grid `(1, n, n, 2)` that resizes box `b` of a `w x h` image to
/// `n x n` with corner-aligned bilinear sampling.
pub fn crop_grid(b: &BoxRect, width: usize, height: usize, n: usize, dtype: DType) -> Result<Tensor> {
    if b.area() == 0 {
        return Err(Error::Invalid(format!("degenerate box {b:?}")));
    }
    if !b.fits(width, height) {
        return Err(Error::Invalid(format!("box {b:?} outside {width}x{height} image")));
    }
    let norm = |p: f64, len: usize| if len > 1 { 2.0 * p / (len - 1) as f64 - 1.0 } else { 0.0 };
    let along = |lo: u32, hi: u32, i: usize| {
        let span = (hi - lo - 1) as f64;
        lo as f64 + if n > 1 { span * i as f64 / (n - 1) as f64 } else { span / 2.0 }
    };
    let mut v = Vec::with_capacity(n * n * 2);
    for i in 0..n {
        for j in 0..n {
            v.push(norm(along(b.x0, b.x1, j), width));
            v.push(norm(along(b.y0, b.y1, i), height));
        }
    }
    Ok(Tensor::from_vec(v, (1, n, n, 2), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Crops `boxes[k]` out of sample `samples[k]` of `images`, resized to
/// `n x n`, stacked along the batch axis.
pub fn crop_batch(images: &Tensor, samples: &[usize], boxes: &[BoxRect], n: usize) -> Result<Tensor> {
    if samples.len() != boxes.len() || samples.is_empty() {
        return Err(Error::Shape("one box per selected sample required".into()));
    }
    let (_, _, h, w) = images.dims4()?;
    let idx = Tensor::from_vec(samples.iter().map(|&s| s as u32).collect::<Vec<_>>(), samples.len(), images.device())?;
    let picked = images.index_select(&idx, 0)?;
    let grids = boxes
        .iter()
        .map(|b| crop_grid(b, w, h, n, images.dtype()))
        .collect::<Result<Vec<_>>>()?;
    grid_sample(&picked, &Tensor::cat(&grids, 0)?)
}

/// Hand and face boxes of one batch sample.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalBoxes {
    pub hands: Vec<BoxRect>,
    pub face: BoxRect,
}

/// `(L_hand, L_face)`: single-level perceptual loss on crops resized to
/// `crop x crop`. Hand losses average over all hand boxes in the batch.
pub fn perceptual_local(real: &Tensor, fake: &Tensor, boxes: &[LocalBoxes], net: &PerceptualNet, crop: usize) -> Result<(Tensor, Tensor)> {
    let b = real.dim(0)?;
    if boxes.len() != b {
        return Err(Error::Shape(format!("{} box sets for batch of {b}", boxes.len())));
    }
    let mut hand_samples = Vec::new();
    let mut hand_boxes = Vec::new();
    for (i, lb) in boxes.iter().enumerate() {
        for h in &lb.hands {
            hand_samples.push(i);
            hand_boxes.push(*h);
        }
    }
    let face_samples: Vec<usize> = (0..b).collect();
    let face_boxes: Vec<BoxRect> = boxes.iter().map(|lb| lb.face).collect();
    let face = perceptual_level(
        &crop_batch(real, &face_samples, &face_boxes, crop)?,
        &crop_batch(fake, &face_samples, &face_boxes, crop)?,
        net,
    )?;
    let hand = if hand_boxes.is_empty() {
        Tensor::zeros((), real.dtype(), real.device())?
    } else {
        perceptual_level(
            &crop_batch(real, &hand_samples, &hand_boxes, crop)?,
            &crop_batch(fake, &hand_samples, &hand_boxes, crop)?,
            net,
        )?
    };
    Ok((hand, face))
}

/// Patch critic: two stride-2 convs and a 1-channel 3x3 head, so a 64x64
/// image yields a 16x16 logit map.
#[derive(Debug, Clone)]
pub struct PatchDiscriminator {
    c1: Conv2d,
    c2: Conv2d,
    out: Conv2d,
}

pub const DISC_PREFIX: &str = "disc";

impl PatchDiscriminator {
    pub fn new(scope: &mut Scope<'_>, width: usize) -> Result<Self> {
        Ok(Self {
            c1: Conv2d::new(scope, "c1", 3, width, 3, 2)?,
            c2: Conv2d::new(scope, "c2", width, 2 * width, 3, 2)?,
            out: Conv2d::new(scope, "out", 2 * width, 1, 3, 1)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = leaky(&self.c1.forward(x)?, 0.2)?;
        let h = leaky(&self.c2.forward(&h)?, 0.2)?;
        self.out.forward(&h)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GanKind {
    #[default]
    LeastSquares,
    Hinge,
}

/// `(L_GAN, L_discr)` from critic outputs. `d_fake_detached` must come from
/// a fake image cut off from the generator graph.
pub fn adversarial_from_logits(d_real: &Tensor, d_fake: &Tensor, d_fake_detached: &Tensor, kind: GanKind) -> Result<(Tensor, Tensor)> {
    match kind {
        GanKind::LeastSquares => {
            let gan = d_fake.affine(1.0, -1.0)?.sqr()?.mean_all()?;
            let discr = (d_real.affine(1.0, -1.0)?.sqr()?.mean_all()? + d_fake_detached.sqr()?.mean_all()?)?;
            Ok((gan, discr))
        }
        GanKind::Hinge => {
            let gan = d_fake.mean_all()?.neg()?;
            let discr = (d_real.affine(-1.0, 1.0)?.relu()?.mean_all()? + d_fake_detached.affine(1.0, 1.0)?.relu()?.mean_all()?)?;
            Ok((gan, discr))
        }
    }
}

/// Generator and discriminator adversarial losses for a real/fake pair.
pub fn adversarial_losses(disc: &PatchDiscriminator, real: &Tensor, fake: &Tensor, kind: GanKind) -> Result<(Tensor, Tensor)> {
    if real.dims() != fake.dims() {
        return Err(Error::Shape("real and fake images differ in shape".into()));
    }
    let d_real = disc.forward(real)?;
    let d_fake = disc.forward(fake)?;
    let d_fake_det = disc.forward(&fake.detach())?;
    adversarial_from_logits(&d_real, &d_fake, &d_fake_det, kind)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub per_glo: f64,
    pub per_loc: f64,
    pub per: f64,
    pub gan: f64,
    pub discr: f64,
    /// Pyramid levels of the global perceptual loss.
    pub levels: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            per_glo: 1.0,
            per_loc: 1.0,
            per: 1.0,
            gan: 0.1,
            discr: 0.1,
            levels: 3,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("per_glo", self.per_glo),
            ("per_loc", self.per_loc),
            ("per", self.per),
            ("gan", self.gan),
            ("discr", self.discr),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("loss weight {name} must be nonnegative and finite")));
            }
        }
        if self.levels == 0 {
            return Err(Error::Config("levels must be at least 1".into()));
        }
        Ok(())
    }

    pub fn adversarial_enabled(&self) -> bool {
        self.gan > 0.0 || self.discr > 0.0
    }
}

/// Individual stage-1 loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub per_glo: f64,
    pub hand: f64,
    pub face: f64,
    pub gan: f64,
    pub discr: f64,
}

impl LossWeights {
    /// `L_per = per_glo * L_glo + per_loc * (L_hand + L_face)`.
    pub fn perceptual(&self, p: &LossParts) -> f64 {
        self.per_glo * p.per_glo + self.per_loc * (p.hand + p.face)
    }

    /// `L_1 = per * L_per + gan * L_GAN + discr * L_discr`.
    pub fn total(&self, p: &LossParts) -> f64 {
        self.per * self.perceptual(p) + self.gan * p.gan + self.discr * p.discr
    }
}

/// Generator objective: the total without the discriminator term, which
/// only the critic optimizes.
pub fn generator_objective(per_glo: &Tensor, hand: &Tensor, face: &Tensor, gan: Option<&Tensor>, w: &LossWeights) -> Result<Tensor> {
    let local = (hand + face)?;
    let per = ((per_glo * w.per_glo)? + (local * w.per_loc)?)?;
    let mut total = (per * w.per)?;
    if let Some(g) = gan {
        total = (total + (g * w.gan)?)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(t: &Tensor) -> f64 {
        t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
    }

    fn img(seed: u64) -> Tensor {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f64> = (0..2 * 3 * 32 * 32).map(|_| rng.random::<f64>()).collect();
        Tensor::from_vec(v, (2, 3, 32, 32), &Device::Cpu).unwrap()
    }

    #[test]
    fn perceptual_zero_on_identical() {
        let net = PerceptualNet::random(1, DType::F64).unwrap();
        let a = img(1);
        assert_eq!(scalar(&perceptual_global(&a, &a, &net, 3).unwrap()), 0.0);
    }

    #[test]
    fn doubling_tap_weights_doubles_loss() {
        let net = PerceptualNet::random(1, DType::F64).unwrap();
        let (a, b) = (img(1), img(2));
        let base = scalar(&perceptual_global(&a, &b, &net, 2).unwrap());
        let w2 = net.tap_weights().iter().map(|w| 2.0 * w).collect();
        let doubled = scalar(&perceptual_global(&a, &b, &net.clone().with_weights(w2).unwrap(), 2).unwrap());
        assert!((doubled - 2.0 * base).abs() < 1e-12 * base.max(1.0));
    }

    #[test]
    fn lsgan_constants() {
        let zeros = Tensor::zeros((1, 1, 4, 4), DType::F64, &Device::Cpu).unwrap();
        let ones = Tensor::ones((1, 1, 4, 4), DType::F64, &Device::Cpu).unwrap();
        let (g, d) = adversarial_from_logits(&zeros, &zeros, &zeros, GanKind::LeastSquares).unwrap();
        assert_eq!((scalar(&g), scalar(&d)), (1.0, 1.0));
        let (_, d) = adversarial_from_logits(&ones, &zeros, &zeros, GanKind::LeastSquares).unwrap();
        assert_eq!(scalar(&d), 0.0);
    }

    #[test]
    fn weighted_total_arithmetic() {
        let p = LossParts {
            per_glo: 2.0,
            hand: 3.0,
            face: 0.5,
            gan: 0.7,
            discr: 1.1,
        };
        let w = LossWeights::default();
        assert!((w.perceptual(&p) - 5.5).abs() < 1e-12);
        assert!((w.total(&p) - 5.68).abs() < 1e-12);
        let zero = LossWeights {
            per_glo: 0.0,
            per_loc: 0.0,
            per: 0.0,
            gan: 0.0,
            discr: 0.0,
            levels: 1,
        };
        assert_eq!(zero.total(&p), 0.0);
    }

    #[test]
    fn crop_grid_of_full_image_is_identity() {
        let b = BoxRect::new(0, 0, 16, 16);
        let g = crop_grid(&b, 16, 16, 16, DType::F64).unwrap();
        let id = crate::deviation::warp::identity_grid(1, 16, 16, DType::F64).unwrap();
        let err = scalar(&(g - id).unwrap().abs().unwrap().max_all().unwrap());
        assert!(err < 1e-12);
    }

    #[test]
    fn degenerate_box_rejected() {
        assert!(crop_grid(&BoxRect::new(3, 3, 3, 9), 16, 16, 8, DType::F64).is_err());
    }
}
