use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense RGB image, row-major HWC, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape(format!("empty image {height}x{width}")));
        }
        if pixels.len() != height * width * 3 {
            return Err(Error::Shape(format!(
                "expected {} values for {height}x{width}x3, got {}",
                height * width * 3,
                pixels.len()
            )));
        }
        if let Some(v) = pixels.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::Invalid(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    /// Builds an image, clamping every value into `[0, 1]` first.
    pub fn from_clamped(height: usize, width: usize, mut pixels: Vec<f32>) -> Result<Self> {
        for v in pixels.iter_mut() {
            *v = if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 };
        }
        Self::new(height, width, pixels)
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Result<Self> {
        let pixels = (0..height * width).flat_map(|_| rgb).collect();
        Self::new(height, width, pixels)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.pixels[(y * self.width + x) * 3 + c]
    }

    /// Checks the encoder's size contract: both sides at least 16 and
    /// divisible by `2^depth`.
    pub fn check_encodable(&self, depth: usize) -> Result<()> {
        check_encodable_size(self.height, self.width, depth)
    }

    /// `(1, 3, H, W)` tensor.
    pub fn to_tensor(&self, dtype: DType) -> Result<Tensor> {
        let (h, w) = (self.height, self.width);
        let mut chw = vec![0f32; 3 * h * w];
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    chw[c * h * w + y * w + x] = self.pixels[(y * w + x) * 3 + c];
                }
            }
        }
        Ok(Tensor::from_vec(chw, (1, 3, h, w), &Device::Cpu)?.to_dtype(dtype)?)
    }

    /// Accepts `(3, H, W)` or `(1, 3, H, W)`; values are clamped into range.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let t = match t.rank() {
            4 => t.squeeze(0)?,
            3 => t.clone(),
            r => return Err(Error::Shape(format!("expected rank 3 or 4 image tensor, got {r}"))),
        };
        let (c, h, w) = t.dims3()?;
        if c != 3 {
            return Err(Error::Shape(format!("expected 3 channels, got {c}")));
        }
        let chw = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        let mut hwc = vec![0f32; 3 * h * w];
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    hwc[(y * w + x) * 3 + c] = chw[c * h * w + y * w + x];
                }
            }
        }
        Self::from_clamped(h, w, hwc)
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let img = image::open(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        let pixels = rgb.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
        Self::new(h as usize, w as usize, pixels)
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect()
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, self.to_rgb8())
            .ok_or_else(|| Error::Shape("buffer size mismatch".into()))?;
        buf.save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::Image {
                path: path.to_path_buf(),
                msg: e.to_string(),
            })
    }

    /// Copies the pixels inside `b` into a new image.
    pub fn crop(&self, b: &BoxRect) -> Result<Self> {
        if !b.fits(self.width, self.height) || b.area() == 0 {
            return Err(Error::Invalid(format!(
                "box {b:?} outside {}x{} image or empty",
                self.width, self.height
            )));
        }
        let (bw, bh) = (b.width() as usize, b.height() as usize);
        let mut px = Vec::with_capacity(bw * bh * 3);
        for y in b.y0 as usize..b.y1 as usize {
            let row = (y * self.width + b.x0 as usize) * 3;
            px.extend_from_slice(&self.pixels[row..row + bw * 3]);
        }
        Self::new(bh, bw, px)
    }
}

pub fn check_encodable_size(height: usize, width: usize, depth: usize) -> Result<()> {
    let m = 1usize << depth;
    if height < 16 || width < 16 || height % m != 0 || width % m != 0 {
        return Err(Error::Shape(format!(
            "image {height}x{width} must be at least 16x16 and divisible by {m}"
        )));
    }
    Ok(())
}

/// Stacks images into a `(B, 3, H, W)` tensor.
pub fn images_to_batch(images: &[&Image], dtype: DType) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::Invalid("empty image batch".into()))?;
    let ts = images
        .iter()
        .map(|im| {
            if im.height != first.height || im.width != first.width {
                return Err(Error::Shape("mixed image sizes in batch".into()));
            }
            im.to_tensor(dtype)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::cat(&ts, 0)?)
}

pub fn batch_to_images(t: &Tensor) -> Result<Vec<Image>> {
    let b = t.dim(0)?;
    (0..b).map(|i| Image::from_tensor(&t.get(i)?)).collect()
}

/// Axis-aligned pixel rectangle, `x1`/`y1` exclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoxRect {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl BoxRect {
    pub fn new(x0: u32, y0: u32, x1: u32, y1: u32) -> Self {
        Self { x0, y0, x1, y1 }
    }

    /// Square-ish box of the given size centred on `(cx, cy)`, shifted so it
    /// stays inside a `width x height` frame.
    pub fn centered(cx: f64, cy: f64, size: u32, width: usize, height: usize) -> Self {
        let size_x = size.min(width as u32);
        let size_y = size.min(height as u32);
        let place = |c: f64, s: u32, lim: usize| -> u32 {
            let start = (c - s as f64 / 2.0).round();
            start.clamp(0.0, (lim as u32 - s) as f64) as u32
        };
        let x0 = place(cx, size_x, width);
        let y0 = place(cy, size_y, height);
        Self::new(x0, y0, x0 + size_x, y0 + size_y)
    }

    pub fn width(&self) -> u32 {
        self.x1.saturating_sub(self.x0)
    }

    pub fn height(&self) -> u32 {
        self.y1.saturating_sub(self.y0)
    }

    pub fn area(&self) -> u32 {
        self.width() * self.height()
    }

    pub fn fits(&self, width: usize, height: usize) -> bool {
        self.x0 < self.x1
            && self.y0 < self.y1
            && self.x1 as usize <= width
            && self.y1 as usize <= height
    }

    /// True if the pixel-coordinate point lies inside the box.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x0 as f64 && x < self.x1 as f64 && y >= self.y0 as f64 && y < self.y1 as f64
    }
}

/// Region boxes for one frame.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameBoxes {
    pub hands: Vec<BoxRect>,
    pub face: BoxRect,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lip: Option<BoxRect>,
}

impl FrameBoxes {
    /// Lip box, falling back to the lower-middle part of the face box.
    pub fn lip_or_face_lower(&self) -> BoxRect {
        self.lip.unwrap_or_else(|| {
            let f = self.face;
            let h = f.height();
            BoxRect::new(f.x0, f.y0 + h / 2, f.x1, f.y1)
        })
    }
}

/// Fixed fractional crop rectangles for data that ships without boxes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FractionalBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl FractionalBox {
    pub fn to_pixels(&self, width: usize, height: usize) -> BoxRect {
        let fx = |v: f64| (v.clamp(0.0, 1.0) * width as f64).round() as u32;
        let fy = |v: f64| (v.clamp(0.0, 1.0) * height as f64).round() as u32;
        BoxRect::new(fx(self.x0), fy(self.y0), fx(self.x1), fy(self.y1))
    }
}

#[derive(Debug, Clone)]
pub struct VideoClip {
    pub frames: Vec<Image>,
    pub fps: f64,
    pub region_boxes: Option<Vec<FrameBoxes>>,
}

impl VideoClip {
    pub fn new(frames: Vec<Image>, fps: f64, region_boxes: Option<Vec<FrameBoxes>>) -> Result<Self> {
        if !(fps > 0.0) {
            return Err(Error::Invalid(format!("fps must be positive, got {fps}")));
        }
        if let Some(first) = frames.first() {
            let (h, w) = (first.height(), first.width());
            if frames.iter().any(|f| f.height() != h || f.width() != w) {
                return Err(Error::Shape("frames differ in size".into()));
            }
            if let Some(boxes) = &region_boxes {
                if boxes.len() != frames.len() {
                    return Err(Error::Shape(format!(
                        "{} box records for {} frames",
                        boxes.len(),
                        frames.len()
                    )));
                }
                for fb in boxes {
                    let all = fb.hands.iter().chain(std::iter::once(&fb.face)).chain(fb.lip.iter());
                    for b in all {
                        if !b.fits(w, h) {
                            return Err(Error::Invalid(format!("box {b:?} outside {w}x{h} frame")));
                        }
                    }
                }
            }
        }
        Ok(Self {
            frames,
            fps,
            region_boxes,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn duration_seconds(&self) -> f64 {
        self.frames.len() as f64 / self.fps
    }
}
