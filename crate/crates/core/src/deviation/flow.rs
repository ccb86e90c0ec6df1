//! Pose transform, region masks and dense flow composition.

use candle_core::{DType, Device, Tensor, D};

use super::warp::identity_grid;
use crate::error::{Error, Result};
use crate::nn::{leaky, Conv2d, Linear, Scope};

/// Per-region rigid motion: rotation angle (radians) and translation in
/// normalised image coordinates.
#[derive(Debug, Clone)]
pub struct RegionTransforms {
    /// `(B, R)`
    pub theta: Tensor,
    /// `(B, R, 2)`, each component in `[-1, 1]` when produced by
    /// [`PoseTransform`].
    pub translation: Tensor,
}

impl RegionTransforms {
    pub fn regions(&self) -> Result<usize> {
        Ok(self.theta.dim(1)?)
    }

    /// Motion of `self` relative to `base`: angles and translations subtracted.
    pub fn relative_to(&self, base: &RegionTransforms) -> Result<Self> {
        Ok(Self {
            theta: (&self.theta - &base.theta)?,
            translation: (&self.translation - &base.translation)?,
        })
    }

    pub fn zeros(batch: usize, regions: usize, dtype: DType) -> Result<Self> {
        Ok(Self {
            theta: Tensor::zeros((batch, regions), dtype, &Device::Cpu)?,
            translation: Tensor::zeros((batch, regions, 2), dtype, &Device::Cpu)?,
        })
    }
}

/// Soft region assignment `(B, R + 1, h, w)`; channel 0 is background. The
/// channels sum to one at every pixel.
#[derive(Debug, Clone)]
pub struct RegionMasks {
    pub masks: Tensor,
}

impl RegionMasks {
    /// Foreground region weights `(B, R, h, w)`.
    pub fn regions(&self) -> Result<Tensor> {
        let r = self.masks.dim(1)?;
        Ok(self.masks.narrow(1, 1, r - 1)?)
    }

    /// Average-pools the masks `times` times by 2.
    pub fn downsampled(&self, times: usize) -> Result<Self> {
        let mut m = self.masks.clone();
        for _ in 0..times {
            m = m.avg_pool2d(2)?;
        }
        Ok(Self { masks: m })
    }
}

/// Dense backward-sampling grid `(B, h, w, 2)` in `[-1, 1]^2`.
#[derive(Debug, Clone)]
pub struct FlowField {
    pub grid: Tensor,
}

/// Maps a motion feature to region transforms through a small MLP whose
/// output layer starts at zero, so an untrained model predicts no motion.
#[derive(Debug, Clone)]
pub struct PoseTransform {
    hidden: Linear,
    out: Linear,
    regions: usize,
    slope: f64,
}

impl PoseTransform {
    pub fn new(scope: &mut Scope<'_>, k: usize, hidden: usize, regions: usize, slope: f64) -> Result<Self> {
        if regions == 0 {
            return Err(Error::Config("need at least one motion region".into()));
        }
        Ok(Self {
            hidden: Linear::new(scope, "hidden", k, hidden)?,
            out: Linear::zeros(scope, "out", hidden, 3 * regions)?,
            regions,
            slope,
        })
    }

    pub fn regions(&self) -> usize {
        self.regions
    }

    /// `mf` is `(B, K)`. Angles are `pi * tanh(.)`, translations `tanh(.)`.
    pub fn forward(&self, mf: &Tensor) -> Result<RegionTransforms> {
        let b = mf.dim(0)?;
        let h = leaky(&self.hidden.forward(mf)?, self.slope)?;
        let raw = self.out.forward(&h)?.reshape((b, self.regions, 3))?;
        let theta = (raw.narrow(2, 0, 1)?.squeeze(2)?.tanh()? * std::f64::consts::PI)?;
        let translation = raw.narrow(2, 1, 2)?.tanh()?;
        Ok(RegionTransforms { theta, translation })
    }
}

/// Predicts soft region masks from the finest encoder features.
#[derive(Debug, Clone)]
pub struct MaskPredictor {
    conv1: Conv2d,
    conv2: Conv2d,
    slope: f64,
}

impl MaskPredictor {
    pub fn new(scope: &mut Scope<'_>, c_in: usize, regions: usize, slope: f64) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d::new(scope, "conv1", c_in, c_in, 3, 1)?,
            conv2: Conv2d::new(scope, "conv2", c_in, regions + 1, 3, 1)?,
            slope,
        })
    }

    pub fn forward(&self, features: &Tensor) -> Result<RegionMasks> {
        let h = leaky(&self.conv1.forward(features)?, self.slope)?;
        let logits = self.conv2.forward(&h)?;
        Ok(RegionMasks {
            masks: candle_nn::ops::softmax(&logits, 1)?,
        })
    }
}

/// Separate x and y coordinate planes `(1, 1, h, w)` of the identity grid.
fn coordinate_planes(h: usize, w: usize, dtype: DType) -> Result<(Tensor, Tensor)> {
    let id = identity_grid(1, h, w, dtype)?;
    let px = id.narrow(3, 0, 1)?.squeeze(3)?.unsqueeze(1)?;
    let py = id.narrow(3, 1, 1)?.squeeze(3)?.unsqueeze(1)?;
    Ok((px, py))
}

/// Mask-weighted centroids `(B, R, 1, 1)` for x and y.
pub fn region_centroids(region_masks: &Tensor) -> Result<(Tensor, Tensor)> {
    let (_, _, h, w) = region_masks.dims4()?;
    let (px, py) = coordinate_planes(h, w, region_masks.dtype())?;
    let mass = (region_masks.sum_keepdim(3)?.sum_keepdim(2)? + 1e-6)?;
    let cx = region_masks.broadcast_mul(&px)?.sum_keepdim(3)?.sum_keepdim(2)?.div(&mass)?;
    let cy = region_masks.broadcast_mul(&py)?.sum_keepdim(3)?.sum_keepdim(2)?.div(&mass)?;
    Ok((cx, cy))
}

/// Composes the dense flow: identity plus, for every region, its mask times
/// the displacement of a rotation by `theta` about the region centroid
/// followed by a translation. Background keeps the identity. The result is
/// clamped to `[-1, 1]`.
pub fn decode_flow(rt: &RegionTransforms, masks: &RegionMasks) -> Result<FlowField> {
    let m = masks.regions()?;
    let (b, r, h, w) = m.dims4()?;
    if rt.regions()? != r || rt.theta.dim(0)? != b {
        return Err(Error::Shape(format!(
            "{} transforms for {r} mask regions",
            rt.regions()?
        )));
    }
    let (cx, cy) = region_centroids(&m)?;
    let (px, py) = coordinate_planes(h, w, m.dtype())?;
    let theta = rt.theta.reshape((b, r, 1, 1))?;
    let (cos, sin) = (theta.cos()?, theta.sin()?);
    let tx = rt.translation.narrow(2, 0, 1)?.reshape((b, r, 1, 1))?;
    let ty = rt.translation.narrow(2, 1, 1)?.reshape((b, r, 1, 1))?;
    let rx = px.broadcast_sub(&cx)?;
    let ry = py.broadcast_sub(&cy)?;
    let dx = (rx.broadcast_mul(&cos)? - ry.broadcast_mul(&sin)?)?
        .broadcast_add(&(&cx + &tx)?)?
        .broadcast_sub(&px)?;
    let dy = (rx.broadcast_mul(&sin)? + ry.broadcast_mul(&cos)?)?
        .broadcast_add(&(&cy + &ty)?)?
        .broadcast_sub(&py)?;
    let gx = px.broadcast_add(&(m.mul(&dx)?.sum_keepdim(1)?))?;
    let gy = py.broadcast_add(&(m.mul(&dy)?.sum_keepdim(1)?))?;
    let grid = Tensor::cat(&[gx, gy], 1)?.permute((0, 2, 3, 1))?.clamp(-1.0, 1.0)?;
    Ok(FlowField {
        grid: grid.contiguous()?,
    })
}

/// Degenerate flow: one rigid transform (region 0's) applied to the whole
/// frame about the image centre.
pub fn decode_global_flow(rt: &RegionTransforms, h: usize, w: usize) -> Result<FlowField> {
    let b = rt.theta.dim(0)?;
    let (px, py) = coordinate_planes(h, w, rt.theta.dtype())?;
    let theta = rt.theta.narrow(1, 0, 1)?.reshape((b, 1, 1, 1))?;
    let (cos, sin) = (theta.cos()?, theta.sin()?);
    let t = rt.translation.narrow(1, 0, 1)?;
    let tx = t.narrow(2, 0, 1)?.reshape((b, 1, 1, 1))?;
    let ty = t.narrow(2, 1, 1)?.reshape((b, 1, 1, 1))?;
    let gx = (px.broadcast_mul(&cos)? - py.broadcast_mul(&sin)?)?.broadcast_add(&tx)?;
    let gy = (px.broadcast_mul(&sin)? + py.broadcast_mul(&cos)?)?.broadcast_add(&ty)?;
    let grid = Tensor::cat(&[gx, gy], 1)?.permute((0, 2, 3, 1))?.clamp(-1.0, 1.0)?;
    Ok(FlowField {
        grid: grid.contiguous()?,
    })
}

/// Hard masks from explicit per-region boolean maps, for tests and tools.
pub fn masks_from_regions(regions: &[Vec<bool>], h: usize, w: usize, dtype: DType) -> Result<RegionMasks> {
    let r = regions.len();
    let mut v = vec![0f64; (r + 1) * h * w];
    for p in 0..h * w {
        let mut used = 0.0;
        for (k, reg) in regions.iter().enumerate() {
            if reg[p] {
                v[(k + 1) * h * w + p] = 1.0;
                used += 1.0;
            }
        }
        v[p] = (1.0f64 - used).max(0.0);
    }
    let t = Tensor::from_vec(v, (1, r + 1, h, w), &Device::Cpu)?.to_dtype(dtype)?;
    Ok(RegionMasks { masks: t })
}

/// Maximum absolute difference between a flow and the identity grid.
pub fn distance_from_identity(flow: &FlowField) -> Result<f64> {
    let (b, h, w, _) = flow.grid.dims4()?;
    let id = identity_grid(b, h, w, flow.grid.dtype())?;
    Ok((&flow.grid - id)?
        .abs()?
        .flatten_all()?
        .max(D::Minus1)?
        .to_dtype(DType::F64)?
        .to_scalar::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid_values(f: &FlowField) -> Vec<f64> {
        f.grid.flatten_all().unwrap().to_vec1::<f64>().unwrap()
    }

    #[test]
    fn zero_motion_is_identity() {
        let masks = masks_from_regions(&[vec![true; 64], vec![false; 64]], 8, 8, DType::F64).unwrap();
        let rt = RegionTransforms::zeros(1, 2, DType::F64).unwrap();
        let flow = decode_flow(&rt, &masks).unwrap();
        let id = identity_grid(1, 8, 8, DType::F64).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(grid_values(&flow), id);
    }

    #[test]
    fn full_region_translation_shifts_x() {
        let masks = masks_from_regions(&[vec![true; 81]], 9, 9, DType::F64).unwrap();
        let rt = RegionTransforms {
            theta: Tensor::zeros((1, 1), DType::F64, &Device::Cpu).unwrap(),
            translation: Tensor::from_vec(vec![0.25f64, 0.0], (1, 1, 2), &Device::Cpu).unwrap(),
        };
        let flow = decode_flow(&rt, &masks).unwrap();
        let g = grid_values(&flow);
        let id = identity_grid(1, 9, 9, DType::F64).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for p in 0..81 {
            let x = id[2 * p];
            if x + 0.25 <= 1.0 {
                assert!((g[2 * p] - (x + 0.25)).abs() < 1e-12);
            }
            assert!((g[2 * p + 1] - id[2 * p + 1]).abs() < 1e-12);
        }
    }

    #[test]
    fn half_turn_rotates_about_centroid() {
        // Centred 5x5 square inside a 9x9 grid; centroid is the origin.
        let (h, w) = (9, 9);
        let region: Vec<bool> = (0..h * w)
            .map(|p| (2..7).contains(&(p / w)) && (2..7).contains(&(p % w)))
            .collect();
        let masks = masks_from_regions(&[region], h, w, DType::F64).unwrap();
        let rt = RegionTransforms {
            theta: Tensor::from_vec(vec![std::f64::consts::PI], (1, 1), &Device::Cpu).unwrap(),
            translation: Tensor::zeros((1, 1, 2), DType::F64, &Device::Cpu).unwrap(),
        };
        let g = grid_values(&decode_flow(&rt, &masks).unwrap());
        let coord = |i: usize| -1.0 + 2.0 * i as f64 / 8.0;
        // Closed form: a half turn about c maps p to 2c - p; c = (0, 0) up to
        // the 1e-6 mass regulariser.
        for (row, col) in [(2, 2), (2, 6), (6, 3), (4, 5)] {
            let p = row * w + col;
            assert!((g[2 * p] + coord(col)).abs() < 1e-6, "x at ({row},{col})");
            assert!((g[2 * p + 1] + coord(row)).abs() < 1e-6, "y at ({row},{col})");
        }
    }

    #[test]
    fn pose_transform_zero_init_is_identity_motion() {
        let mut store = crate::nn::ParamStore::new(DType::F64, 0);
        let pt = PoseTransform::new(&mut store.scope("pose"), 8, 16, 3, 0.2).unwrap();
        let mf = Tensor::zeros((2, 8), DType::F64, &Device::Cpu).unwrap();
        let rt = pt.forward(&mf).unwrap();
        assert!(rt.theta.flatten_all().unwrap().to_vec1::<f64>().unwrap().iter().all(|&v| v == 0.0));
        assert!(rt.translation.flatten_all().unwrap().to_vec1::<f64>().unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn masks_sum_to_one() {
        let mut store = crate::nn::ParamStore::new(DType::F32, 0);
        let mp = MaskPredictor::new(&mut store.scope("mask"), 4, 3, 0.2).unwrap();
        let x = Tensor::randn(0f32, 1f32, (2, 4, 8, 8), &Device::Cpu).unwrap();
        let m = mp.forward(&x).unwrap().masks.sum(1).unwrap();
        for v in m.flatten_all().unwrap().to_vec1::<f32>().unwrap() {
            assert!((v - 1.0).abs() < 1e-5);
        }
    }
}
