//! Differentiable bilinear backward warping.
//!
//! `grid` holds, for every output location, the normalised source coordinate
//! `(x, y)` in `[-1, 1]^2` to sample from. Corners are aligned: `-1` is the
//! centre of the first pixel and `+1` the centre of the last. Coordinates
//! outside the frame are clamped to the border, and the clamped coordinate
//! receives no gradient.

use candle_core::{CpuStorage, CustomOp2, DType, Layout, Shape, Tensor, WithDType};

use crate::error::{Error, Result};

struct GridSample;

#[derive(Clone, Copy)]
struct Dims {
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
}

/// Bilinear taps for one output location.
#[derive(Clone, Copy)]
struct Taps {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    wx: f64,
    wy: f64,
    /// d(ix)/d(gx), zero when clamped.
    sx: f64,
    sy: f64,
}

#[inline]
fn taps(gx: f64, gy: f64, h: usize, w: usize) -> Taps {
    let axis = |g: f64, n: usize| -> (usize, usize, f64, f64) {
        let span = (n - 1) as f64;
        let raw = (g + 1.0) * 0.5 * span;
        let inside = raw >= 0.0 && raw <= span;
        let v = raw.clamp(0.0, span);
        let i0 = (v.floor() as usize).min(n - 1);
        let i1 = (i0 + 1).min(n - 1);
        let frac = v - i0 as f64;
        (i0, i1, frac, if inside { 0.5 * span } else { 0.0 })
    };
    let (x0, x1, wx, sx) = axis(gx, w);
    let (y0, y1, wy, sy) = axis(gy, h);
    Taps {
        x0,
        x1,
        y0,
        y1,
        wx,
        wy,
        sx,
        sy,
    }
}

fn forward<T: WithDType>(input: &[T], grid: &[T], d: Dims) -> Vec<T> {
    let mut out = vec![T::from_f64(0.0); d.b * d.c * d.ho * d.wo];
    let plane = d.h * d.w;
    for b in 0..d.b {
        for i in 0..d.ho {
            for j in 0..d.wo {
                let g = ((b * d.ho + i) * d.wo + j) * 2;
                let t = taps(grid[g].to_f64(), grid[g + 1].to_f64(), d.h, d.w);
                let w00 = (1.0 - t.wx) * (1.0 - t.wy);
                let w01 = t.wx * (1.0 - t.wy);
                let w10 = (1.0 - t.wx) * t.wy;
                let w11 = t.wx * t.wy;
                for c in 0..d.c {
                    let base = (b * d.c + c) * plane;
                    let v = w00 * input[base + t.y0 * d.w + t.x0].to_f64()
                        + w01 * input[base + t.y0 * d.w + t.x1].to_f64()
                        + w10 * input[base + t.y1 * d.w + t.x0].to_f64()
                        + w11 * input[base + t.y1 * d.w + t.x1].to_f64();
                    out[((b * d.c + c) * d.ho + i) * d.wo + j] = T::from_f64(v);
                }
            }
        }
    }
    out
}

/// Returns `(d input, d grid)` for upstream gradient `grad_out`.
fn backward(input: &[f64], grid: &[f64], grad_out: &[f64], d: Dims) -> (Vec<f64>, Vec<f64>) {
    let mut gi = vec![0.0; input.len()];
    let mut gg = vec![0.0; grid.len()];
    let plane = d.h * d.w;
    for b in 0..d.b {
        for i in 0..d.ho {
            for j in 0..d.wo {
                let g = ((b * d.ho + i) * d.wo + j) * 2;
                let t = taps(grid[g], grid[g + 1], d.h, d.w);
                let (mut dx, mut dy) = (0.0, 0.0);
                for c in 0..d.c {
                    let go = grad_out[((b * d.c + c) * d.ho + i) * d.wo + j];
                    if go == 0.0 {
                        continue;
                    }
                    let base = (b * d.c + c) * plane;
                    let (i00, i01) = (base + t.y0 * d.w + t.x0, base + t.y0 * d.w + t.x1);
                    let (i10, i11) = (base + t.y1 * d.w + t.x0, base + t.y1 * d.w + t.x1);
                    gi[i00] += go * (1.0 - t.wx) * (1.0 - t.wy);
                    gi[i01] += go * t.wx * (1.0 - t.wy);
                    gi[i10] += go * (1.0 - t.wx) * t.wy;
                    gi[i11] += go * t.wx * t.wy;
                    let (v00, v01, v10, v11) = (input[i00], input[i01], input[i10], input[i11]);
                    dx += go * ((1.0 - t.wy) * (v01 - v00) + t.wy * (v11 - v10));
                    dy += go * ((1.0 - t.wx) * (v10 - v00) + t.wx * (v11 - v01));
                }
                gg[g] = dx * t.sx;
                gg[g + 1] = dy * t.sy;
            }
        }
    }
    (gi, gg)
}

fn slice<'a, T>(data: &'a [T], l: &Layout) -> candle_core::Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => candle_core::bail!("grid sample expects contiguous inputs"),
    }
}

fn dims_of(input: &Shape, grid: &Shape) -> candle_core::Result<Dims> {
    let (b, c, h, w) = input.dims4()?;
    let (gb, ho, wo, two) = grid.dims4()?;
    if gb != b || two != 2 {
        candle_core::bail!("grid shape {grid:?} incompatible with input {input:?}");
    }
    Ok(Dims { b, c, h, w, ho, wo })
}

impl CustomOp2 for GridSample {
    fn name(&self) -> &'static str {
        "grid-sample-bilinear-border"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let d = dims_of(l1.shape(), l2.shape())?;
        let out_shape = Shape::from((d.b, d.c, d.ho, d.wo));
        let storage = match (s1, s2) {
            (CpuStorage::F32(a), CpuStorage::F32(g)) => {
                CpuStorage::F32(forward(slice(a, l1)?, slice(g, l2)?, d))
            }
            (CpuStorage::F64(a), CpuStorage::F64(g)) => {
                CpuStorage::F64(forward(slice(a, l1)?, slice(g, l2)?, d))
            }
            _ => candle_core::bail!("grid sample supports matching f32 or f64 inputs"),
        };
        Ok((storage, out_shape))
    }

    fn bwd(
        &self,
        input: &Tensor,
        grid: &Tensor,
        _res: &Tensor,
        grad_res: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let d = dims_of(input.shape(), grid.shape())?;
        let as_f64 = |t: &Tensor| t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>();
        let (gi, gg) = backward(&as_f64(input)?, &as_f64(grid)?, &as_f64(grad_res)?, d);
        let gi = Tensor::from_vec(gi, input.shape(), input.device())?.to_dtype(input.dtype())?;
        let gg = Tensor::from_vec(gg, grid.shape(), grid.device())?.to_dtype(grid.dtype())?;
        Ok((Some(gi), Some(gg)))
    }
}

/// Samples `features` `(B, C, H, W)` at `grid` `(B, Ho, Wo, 2)`, returning
/// `(B, C, Ho, Wo)`.
pub fn grid_sample(features: &Tensor, grid: &Tensor) -> Result<Tensor> {
    let (b, _, h, w) = features.dims4()?;
    let (gb, _, _, two) = grid.dims4()?;
    if gb != b || two != 2 || h == 0 || w == 0 {
        return Err(Error::Shape(format!(
            "grid {:?} incompatible with features {:?}",
            grid.dims(),
            features.dims()
        )));
    }
    if features.dtype() != grid.dtype() {
        return Err(Error::Shape("features and grid dtypes differ".into()));
    }
    Ok(features
        .contiguous()?
        .apply_op2(&grid.contiguous()?, GridSample)?)
}

/// Identity sampling grid `(B, h, w, 2)` with corner-aligned coordinates.
pub fn identity_grid(b: usize, h: usize, w: usize, dtype: DType) -> Result<Tensor> {
    let coord = |i: usize, n: usize| if n > 1 { -1.0 + 2.0 * i as f64 / (n - 1) as f64 } else { 0.0 };
    let mut v = Vec::with_capacity(h * w * 2);
    for i in 0..h {
        for j in 0..w {
            v.push(coord(j, w));
            v.push(coord(i, h));
        }
    }
    let g = Tensor::from_vec(v, (1, h, w, 2), &candle_core::Device::Cpu)?.to_dtype(dtype)?;
    Ok(g.broadcast_as((b, h, w, 2))?.contiguous()?)
}

/// Normalised-coordinate offset of `pixels` pixels along an axis of length `n`.
pub fn pixel_offset(pixels: f64, n: usize) -> f64 {
    if n > 1 {
        2.0 * pixels / (n - 1) as f64
    } else {
        0.0
    }
}
