//! Temporal transformer predicting clean motion-feature windows.
//!
//! Token layout per sample: `[t, prev_1..prev_4, source, frame_1..frame_M]`.
//! Frame tokens carry the noisy motion feature plus that frame's audio
//! features; only frame tokens are read out.

use candle_core::{Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{leaky, Init, LayerNorm, Linear, ParamStore, Scope};

pub const PREV_FRAMES: usize = 4;
const PREFIX_TOKENS: usize = PREV_FRAMES + 2;
pub const STAGE2_PREFIX: &str = "stage2";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    /// Motion feature length.
    pub k: usize,
    /// Audio feature bands per frame.
    pub audio_dim: usize,
    /// Window length `M`.
    pub window: usize,
    pub width: usize,
    pub blocks: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            k: 64,
            audio_dim: 26,
            window: 8,
            width: 128,
            blocks: 4,
            heads: 4,
            mlp_ratio: 2,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.audio_dim == 0 || self.window == 0 || self.blocks == 0 || self.heads == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("denoiser sizes must be positive".into()));
        }
        if self.width % self.heads != 0 || self.width % 2 != 0 {
            return Err(Error::Config("width must be even and divisible by heads".into()));
        }
        Ok(())
    }

    pub fn tokens(&self) -> usize {
        self.window + PREFIX_TOKENS
    }
}

/// Conditioning for one batch of windows.
#[derive(Debug, Clone)]
pub struct Condition {
    /// `(B, M, A)` per-frame audio features.
    pub audio: Tensor,
    /// `(B, 4, K)` motion features of the four preceding frames.
    pub prev4: Tensor,
    /// `(B, K)` motion feature of the source image.
    pub source_mf: Tensor,
}

#[derive(Debug, Clone)]
struct Block {
    ln1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

#[derive(Debug, Clone)]
pub struct Denoiser {
    cfg: DenoiserConfig,
    time1: Linear,
    time2: Linear,
    prev_in: Linear,
    source_in: Linear,
    motion_in: Linear,
    audio_in: Linear,
    pos: candle_core::Var,
    blocks: Vec<Block>,
    ln_out: LayerNorm,
    out: Linear,
}

/// Sinusoidal embedding `(B, dim)` of integer timesteps.
pub fn timestep_embedding(ts: &[f64], dim: usize, device: &Device) -> Result<Tensor> {
    let half = dim / 2;
    let mut v = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            v.push((t * freq).sin());
        }
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            v.push((t * freq).cos());
        }
    }
    Ok(Tensor::from_vec(v, (ts.len(), dim), device)?)
}

impl Denoiser {
    pub fn new(store: &mut ParamStore, cfg: &DenoiserConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.width;
        let mut root = store.scope(STAGE2_PREFIX);
        let mut s = root.sub("denoiser");
        let time1 = Linear::new(&mut s, "time1", d, d)?;
        let time2 = Linear::new_plain(&mut s, "time2", d, d)?;
        let prev_in = Linear::new_plain(&mut s, "prev_in", cfg.k, d)?;
        let source_in = Linear::new_plain(&mut s, "source_in", cfg.k, d)?;
        let motion_in = Linear::new_plain(&mut s, "motion_in", cfg.k, d)?;
        let audio_in = Linear::new_plain(&mut s, "audio_in", cfg.audio_dim, d)?;
        let pos = s.var("pos", &[cfg.tokens(), d], Init::Normal { std: 0.02 })?;
        let mut blocks = Vec::with_capacity(cfg.blocks);
        for i in 0..cfg.blocks {
            let mut b = s.sub(&format!("block{i}"));
            blocks.push(Block {
                ln1: LayerNorm::new(&mut b, "ln1", d)?,
                qkv: Linear::new_plain(&mut b, "qkv", d, 3 * d)?,
                proj: Self::residual_out(&mut b, "proj", d, d, cfg.blocks)?,
                ln2: LayerNorm::new(&mut b, "ln2", d)?,
                fc1: Linear::new(&mut b, "fc1", d, cfg.mlp_ratio * d)?,
                fc2: Self::residual_out(&mut b, "fc2", cfg.mlp_ratio * d, d, cfg.blocks)?,
            });
        }
        let ln_out = LayerNorm::new(&mut s, "ln_out", d)?;
        let out = Linear::new_plain(&mut s, "out", d, cfg.k)?;
        Ok(Self {
            cfg: cfg.clone(),
            time1,
            time2,
            prev_in,
            source_in,
            motion_in,
            audio_in,
            pos,
            blocks,
            ln_out,
            out,
        })
    }

    /// Residual branch outputs start small so the stack begins near identity.
    fn residual_out(scope: &mut Scope<'_>, name: &str, d_in: usize, d_out: usize, depth: usize) -> Result<Linear> {
        let mut s = scope.sub(name);
        let std = (1.0 / d_in as f64).sqrt() / (2.0 * depth as f64).sqrt();
        Ok(Linear {
            weight: s.var("weight", &[d_out, d_in], Init::Normal { std })?,
            bias: s.var("bias", &[d_out], Init::Zeros)?,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    fn attention(&self, block: &Block, x: &Tensor) -> Result<Tensor> {
        let (b, n, d) = x.dims3()?;
        let h = self.cfg.heads;
        let hd = d / h;
        let qkv = block.qkv.forward(x)?.reshape((b, n, 3, h, hd))?.permute((2, 0, 3, 1, 4))?;
        let q = qkv.get(0)?.contiguous()?;
        let k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;
        let scores = (q.matmul(&k.t()?.contiguous()?)? / (hd as f64).sqrt())?;
        let attn = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let out = attn.matmul(&v)?.transpose(1, 2)?.contiguous()?.reshape((b, n, d))?;
        block.proj.forward(&out)
    }

    /// Predicts the clean window `(B, M, K)` from noisy `x_t` at timesteps
    /// `ts` (one per batch row).
    pub fn predict_clean(&self, x_t: &Tensor, ts: &[usize], cond: &Condition) -> Result<Tensor> {
        let (b, m, k) = x_t.dims3()?;
        let c = &self.cfg;
        if m != c.window || k != c.k || ts.len() != b {
            return Err(Error::Shape(format!(
                "x_t {:?} with {} timesteps; expected (B, {}, {})",
                x_t.dims(),
                ts.len(),
                c.window,
                c.k
            )));
        }
        if cond.audio.dims() != [b, m, c.audio_dim] || cond.prev4.dims() != [b, PREV_FRAMES, k] || cond.source_mf.dims() != [b, k] {
            return Err(Error::Shape(format!(
                "condition shapes audio {:?}, prev4 {:?}, source {:?}",
                cond.audio.dims(),
                cond.prev4.dims(),
                cond.source_mf.dims()
            )));
        }
        let dtype = x_t.dtype();
        let tf: Vec<f64> = ts.iter().map(|&t| t as f64).collect();
        let temb = timestep_embedding(&tf, c.width, x_t.device())?.to_dtype(dtype)?;
        let t_tok = self.time2.forward(&leaky(&self.time1.forward(&temb)?, 0.2)?)?.unsqueeze(1)?;
        let prev = self.prev_in.forward(&cond.prev4)?;
        let src = self.source_in.forward(&cond.source_mf)?.unsqueeze(1)?;
        let frames = (self.motion_in.forward(x_t)? + self.audio_in.forward(&cond.audio)?)?;
        let mut x = Tensor::cat(&[t_tok, prev, src, frames], 1)?.broadcast_add(self.pos.as_tensor())?;
        for block in &self.blocks {
            let a = self.attention(block, &block.ln1.forward(&x)?)?;
            x = (x + a)?;
            let h = leaky(&block.fc1.forward(&block.ln2.forward(&x)?)?, 0.2)?;
            x = (&x + block.fc2.forward(&h)?)?;
        }
        let frames = x.narrow(1, PREFIX_TOKENS, m)?;
        self.out.forward(&self.ln_out.forward(&frames)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::DType;

    fn tiny() -> DenoiserConfig {
        DenoiserConfig {
            k: 8,
            audio_dim: 5,
            window: 4,
            width: 16,
            blocks: 2,
            heads: 2,
            mlp_ratio: 2,
        }
    }

    fn inputs(b: usize, cfg: &DenoiserConfig) -> (Tensor, Condition) {
        let dev = Device::Cpu;
        let x = Tensor::randn(0f64, 1.0, (b, cfg.window, cfg.k), &dev).unwrap();
        let cond = Condition {
            audio: Tensor::randn(0f64, 1.0, (b, cfg.window, cfg.audio_dim), &dev).unwrap(),
            prev4: Tensor::randn(0f64, 1.0, (b, 4, cfg.k), &dev).unwrap(),
            source_mf: Tensor::randn(0f64, 1.0, (b, cfg.k), &dev).unwrap(),
        };
        (x, cond)
    }

    #[test]
    fn output_shape_and_determinism() {
        let cfg = tiny();
        let mut store = ParamStore::new(DType::F64, 0);
        let net = Denoiser::new(&mut store, &cfg).unwrap();
        let (x, cond) = inputs(3, &cfg);
        let a = net.predict_clean(&x, &[1, 5, 9], &cond).unwrap();
        let b = net.predict_clean(&x, &[1, 5, 9], &cond).unwrap();
        assert_eq!(a.dims(), &[3, 4, 8]);
        let (va, vb) = (a.flatten_all().unwrap().to_vec1::<f64>().unwrap(), b.flatten_all().unwrap().to_vec1::<f64>().unwrap());
        assert_eq!(va, vb);
    }

    #[test]
    fn rejects_wrong_window() {
        let cfg = tiny();
        let mut store = ParamStore::new(DType::F64, 0);
        let net = Denoiser::new(&mut store, &cfg).unwrap();
        let (_, cond) = inputs(1, &cfg);
        let x = Tensor::zeros((1, 5, 8), DType::F64, &Device::Cpu).unwrap();
        assert!(net.predict_clean(&x, &[1], &cond).is_err());
    }
}
