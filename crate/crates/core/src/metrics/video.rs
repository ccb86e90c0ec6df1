//! Frozen random spatio-temporal feature net for the video distance.

use candle_core::{DType, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::media_io::image::{images_to_batch, Image};
use crate::nn::FrozenConv;

/// Frames per feature chunk.
pub const CHUNK: usize = 8;
const TEMPORAL: usize = 3;

/// One 3-D convolution layer realised as a sum of 2-D convolutions over its
/// temporal taps (valid in time, strided in space).
#[derive(Debug, Clone)]
struct Conv3d {
    taps: Vec<FrozenConv>,
}

impl Conv3d {
    fn random(rng: &mut ChaCha8Rng, c_in: usize, c_out: usize) -> Result<Self> {
        let mut taps = Vec::with_capacity(TEMPORAL);
        for _ in 0..TEMPORAL {
            taps.push(FrozenConv::random(rng, c_in, c_out, 3, 2, DType::F32)?);
        }
        // Fan-in spans all temporal taps; one bias per output channel.
        let scale = (1.0 / TEMPORAL as f64).sqrt();
        for (i, t) in taps.iter_mut().enumerate() {
            t.weight = t.weight.affine(scale, 0.0)?;
            if i > 0 {
                t.bias = t.bias.zeros_like()?;
            }
        }
        Ok(Self { taps })
    }

    /// `(T, C, H, W)` to `(T - 2, C', H / 2, W / 2)`.
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let t = x.dim(0)?;
        let span = t + 1 - TEMPORAL;
        let mut acc: Option<Tensor> = None;
        for (tau, tap) in self.taps.iter().enumerate() {
            let y = tap.forward(&x.narrow(0, tau, span)?)?;
            acc = Some(match acc {
                None => y,
                Some(a) => (a + y)?,
            });
        }
        Ok(acc.expect("at least one tap").relu()?)
    }
}

#[derive(Debug, Clone)]
pub struct VideoFeatureNet {
    layers: Vec<Conv3d>,
    seed: u64,
}

impl VideoFeatureNet {
    pub fn random(seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = vec![Conv3d::random(&mut rng, 3, 16)?, Conv3d::random(&mut rng, 16, 32)?];
        Ok(Self { layers, seed })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Minimum frames per chunk for a valid temporal receptive field.
    pub fn min_frames(&self) -> usize {
        self.layers.len() * (TEMPORAL - 1) + 1
    }

    /// Feature vector of one chunk of frames.
    pub fn chunk_features(&self, frames: &[Image]) -> Result<Vec<f64>> {
        if frames.len() < self.min_frames() {
            return Err(Error::Invalid(format!(
                "chunk of {} frames, need at least {}",
                frames.len(),
                self.min_frames()
            )));
        }
        let refs: Vec<&Image> = frames.iter().collect();
        let mut x = images_to_batch(&refs, DType::F32)?;
        for l in &self.layers {
            x = l.forward(&x)?;
        }
        let c = x.dim(1)?;
        let pooled = x.transpose(0, 1)?.contiguous()?.reshape((c, ()))?.mean(1)?;
        Ok(pooled.to_dtype(DType::F64)?.to_vec1::<f64>()?)
    }

    /// Features of consecutive non-overlapping chunks of a clip; a short
    /// tail is dropped unless it is the only chunk.
    pub fn clip_features(&self, frames: &[Image]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::new();
        for chunk in frames.chunks(CHUNK) {
            if chunk.len() == CHUNK || (out.is_empty() && chunk.len() >= self.min_frames()) {
                out.push(self.chunk_features(chunk)?);
            }
        }
        if out.is_empty() {
            return Err(Error::Invalid(format!("clip of {} frames too short for video features", frames.len())));
        }
        Ok(out)
    }
}
