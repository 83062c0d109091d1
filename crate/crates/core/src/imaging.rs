//! RGB frames and patches, cropping with mean-color padding, and tensor
//! conversion.

use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};
use crate::geometry::BBox;

/// `H × W × 3` image with values in `[0, 1]`, stored row-major HWC.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

/// A crop fed to the networks (template or search region).
pub type ImagePatch = Image;

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::Shape(format!(
                "{} values for a {height}x{width}x3 image",
                data.len()
            )));
        }
        if !data.iter().all(|v| (0.0..=1.0).contains(v)) {
            return Err(Error::OutOfRange);
        }
        Ok(Image { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Image { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let o = (y * self.width + x) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    pub fn channel_mean(&self) -> [f32; 3] {
        let mut sum = [0f64; 3];
        for px in self.data.chunks_exact(3) {
            for c in 0..3 {
                sum[c] += px[c] as f64;
            }
        }
        let n = (self.height * self.width).max(1) as f64;
        sum.map(|s| (s / n) as f32)
    }

    /// Rounds every value to the nearest multiple of `1/255`, the grid a lossless
    /// 8-bit file can represent exactly.
    pub fn quantize_u8(&mut self) {
        for v in &mut self.data {
            *v = (*v * 255.0).round().clamp(0.0, 255.0) as u8 as f32 / 255.0;
        }
    }

    /// `(1, 3, H, W)` tensor.
    pub fn to_tensor(&self, dtype: DType) -> Result<Tensor> {
        let (h, w) = (self.height, self.width);
        let mut chw = vec![0f32; h * w * 3];
        for (i, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                chw[c * h * w + i] = px[c];
            }
        }
        Ok(Tensor::from_vec(chw, (1, 3, h, w), &Device::Cpu)?.to_dtype(dtype)?)
    }

    /// Inverse of [`Image::to_tensor`]; accepts `(3, H, W)` or `(1, 3, H, W)`.
    /// Values are clamped into `[0, 1]`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let t = match t.rank() {
            4 => t.squeeze(0)?,
            3 => t.clone(),
            r => return Err(Error::Shape(format!("rank {r} tensor is not an image"))),
        };
        let (c, h, w) = t.dims3()?;
        if c != 3 {
            return Err(Error::Shape(format!("{c} channels")));
        }
        let chw = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        let mut data = vec![0f32; h * w * 3];
        for i in 0..h * w {
            for ch in 0..3 {
                data[i * 3 + ch] = chw[ch * h * w + i].clamp(0.0, 1.0);
            }
        }
        Ok(Image { height: h, width: w, data })
    }

    /// Bilinear resample of the square region `[x0, x0 + side) × [y0, y0 + side)`
    /// into an `out × out` patch. Samples falling outside the frame take `pad`.
    pub fn crop_resize(&self, x0: f64, y0: f64, side: f64, out: usize, pad: [f32; 3]) -> Image {
        let scale = side / out as f64;
        let mut data = Vec::with_capacity(out * out * 3);
        let (hh, ww) = (self.height as isize, self.width as isize);
        let fetch = |yy: isize, xx: isize, c: usize| -> f64 {
            if yy < 0 || xx < 0 || yy >= hh || xx >= ww {
                pad[c] as f64
            } else {
                self.data[(yy as usize * self.width + xx as usize) * 3 + c] as f64
            }
        };
        for v in 0..out {
            let sy = y0 + (v as f64 + 0.5) * scale - 0.5;
            let y_lo = sy.floor();
            let fy = sy - y_lo;
            let y_lo = y_lo as isize;
            for u in 0..out {
                let sx = x0 + (u as f64 + 0.5) * scale - 0.5;
                let x_lo = sx.floor();
                let fx = sx - x_lo;
                let x_lo = x_lo as isize;
                for c in 0..3 {
                    let top = fetch(y_lo, x_lo, c) * (1.0 - fx) + fetch(y_lo, x_lo + 1, c) * fx;
                    let bot = fetch(y_lo + 1, x_lo, c) * (1.0 - fx) + fetch(y_lo + 1, x_lo + 1, c) * fx;
                    data.push(((top * (1.0 - fy) + bot * fy) as f32).clamp(0.0, 1.0));
                }
            }
        }
        Image { height: out, width: out, data }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.data.iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect();
        let buf = ::image::RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
            .ok_or_else(|| Error::Shape("image buffer size".into()))?;
        buf.save(path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = ::image::open(path)?.to_rgb8();
        let (w, h) = img.dimensions();
        let data = img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
        Ok(Image {
            height: h as usize,
            width: w as usize,
            data,
        })
    }
}

/// Affine map from patch coordinates to frame coordinates: `frame = origin + scale * patch`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropMapping {
    pub origin_x: f64,
    pub origin_y: f64,
    pub scale: f64,
}

impl CropMapping {
    pub fn to_frame(&self, px: f64, py: f64) -> (f64, f64) {
        (self.origin_x + self.scale * px, self.origin_y + self.scale * py)
    }

    pub fn to_patch(&self, fx: f64, fy: f64) -> (f64, f64) {
        ((fx - self.origin_x) / self.scale, (fy - self.origin_y) / self.scale)
    }

    pub fn box_to_frame(&self, b: &BBox) -> BBox {
        let (x, y) = self.to_frame(b.x, b.y);
        BBox {
            x,
            y,
            w: b.w * self.scale,
            h: b.h * self.scale,
        }
    }

    pub fn box_to_patch(&self, b: &BBox) -> BBox {
        let (x, y) = self.to_patch(b.x, b.y);
        BBox {
            x,
            y,
            w: b.w / self.scale,
            h: b.h / self.scale,
        }
    }
}

/// Side of the context region around a target: `sqrt((w + p)(h + p))`, `p = (w + h) / 2`.
pub fn context_side(target: &BBox) -> f64 {
    let p = (target.w + target.h) / 2.0;
    ((target.w + p) * (target.h + p)).sqrt()
}

fn crop_centered(frame: &Image, cx: f64, cy: f64, side: f64, out: usize) -> (Image, CropMapping) {
    let x0 = cx - side / 2.0;
    let y0 = cy - side / 2.0;
    let patch = frame.crop_resize(x0, y0, side, out, frame.channel_mean());
    let mapping = CropMapping {
        origin_x: x0,
        origin_y: y0,
        scale: side / out as f64,
    };
    (patch, mapping)
}

/// Template exemplar around `gt`, resized to `out × out`.
pub fn crop_template(frame: &Image, gt: &BBox, out: usize) -> Result<(ImagePatch, CropMapping)> {
    if !(gt.w > 0.0 && gt.h > 0.0) || !gt.is_valid() {
        return Err(Error::InvalidBox(format!("{gt:?}")));
    }
    if !gt.intersects(frame.width() as f64, frame.height() as f64) {
        return Err(Error::InvalidBox(format!("{gt:?} lies outside the frame")));
    }
    Ok(crop_centered(frame, gt.cx(), gt.cy(), context_side(gt), out))
}

/// Search region around `prev`: the template context scaled by `out / template_size`.
pub fn crop_search(frame: &Image, prev: &BBox, template_size: usize, out: usize) -> Result<(ImagePatch, CropMapping)> {
    if !prev.is_valid() {
        return Err(Error::InvalidBox(format!("{prev:?}")));
    }
    let side = context_side(prev) * out as f64 / template_size as f64;
    Ok(crop_centered(frame, prev.cx(), prev.cy(), side, out))
}
