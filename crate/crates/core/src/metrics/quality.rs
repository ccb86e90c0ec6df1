//! Full-reference image metrics.

use candle_core::DType;

use crate::error::{Error, Result};
use crate::losses::PerceptualNet;
use crate::media_io::image::Image;

fn same_shape(a: &Image, b: &Image) -> Result<()> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(Error::Shape(format!(
            "{}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    Ok(())
}

/// `10 log10(peak^2 / mse)`; infinite when `mse == 0`.
pub fn psnr_from_mse(mse: f64, peak: f64) -> Result<f64> {
    if !(peak > 0.0) {
        return Err(Error::Invalid("peak must be positive".into()));
    }
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

/// Sum of squared differences and element count.
pub fn squared_error(a: &Image, b: &Image) -> Result<(f64, usize)> {
    same_shape(a, b)?;
    let sse = a
        .pixels()
        .iter()
        .zip(b.pixels())
        .map(|(x, y)| (*x as f64 - *y as f64).powi(2))
        .sum();
    Ok((sse, a.pixels().len()))
}

pub fn psnr(a: &Image, b: &Image, peak: f64) -> Result<f64> {
    let (sse, n) = squared_error(a, b)?;
    psnr_from_mse(sse / n as f64, peak)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            range: 1.0,
        }
    }
}

fn gaussian_window(n: usize, sigma: f64) -> Vec<f64> {
    let c = (n as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..n).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering of an `h x w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean local SSIM with a Gaussian window, averaged over channels.
pub fn ssim_with(a: &Image, b: &Image, p: &SsimParams) -> Result<f64> {
    same_shape(a, b)?;
    let (h, w) = (a.height(), a.width());
    if h < p.window || w < p.window {
        return Err(Error::Shape(format!("{h}x{w} image smaller than {0}x{0} window", p.window)));
    }
    let k = gaussian_window(p.window, p.sigma);
    let c1 = (p.k1 * p.range).powi(2);
    let c2 = (p.k2 * p.range).powi(2);
    let mut total = 0.0;
    for c in 0..3 {
        let pa: Vec<f64> = (0..h * w).map(|i| a.pixels()[i * 3 + c] as f64).collect();
        let pb: Vec<f64> = (0..h * w).map(|i| b.pixels()[i * 3 + c] as f64).collect();
        let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(u, v)| u * v).collect::<Vec<_>>();
        let mu_a = filter_valid(&pa, h, w, &k);
        let mu_b = filter_valid(&pb, h, w, &k);
        let e_aa = filter_valid(&prod(&pa, &pa), h, w, &k);
        let e_bb = filter_valid(&prod(&pb, &pb), h, w, &k);
        let e_ab = filter_valid(&prod(&pa, &pb), h, w, &k);
        let mut sum = 0.0;
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            let num = (2.0 * ma * mb + c1) * (2.0 * cov + c2);
            let den = (ma * ma + mb * mb + c1) * (va + vb + c2);
            sum += num / den;
        }
        total += sum / mu_a.len() as f64;
    }
    Ok(total / 3.0)
}

pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    ssim_with(a, b, &SsimParams::default())
}

/// Sum over taps of the spatial mean of squared differences between
/// unit-normalised feature vectors.
pub fn lpips_proxy(a: &Image, b: &Image, net: &PerceptualNet) -> Result<f64> {
    same_shape(a, b)?;
    let fa = net.normalized_features(&a.to_tensor(DType::F64)?)?;
    let fb = net.normalized_features(&b.to_tensor(DType::F64)?)?;
    let mut total = 0.0;
    for (x, y) in fa.iter().zip(&fb) {
        let d = (x - y)?.sqr()?.sum(1)?.mean_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        total += d;
    }
    Ok(total)
}
