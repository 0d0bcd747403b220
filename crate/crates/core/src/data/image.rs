use std::path::Path;

use ::image::{DynamicImage, ImageBuffer, Luma};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Single-channel image with intensities in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Image {
            width,
            height,
            pixels: vec![0.0; width * height],
        }
    }

    pub fn from_pixels(width: usize, height: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::Argument(format!(
                "{} pixels for a {width}x{height} image",
                pixels.len()
            )));
        }
        Ok(Image {
            width,
            height,
            pixels,
        })
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        self.pixels[y * self.width + x] = v;
    }

    /// Bilinear sample at continuous pixel coordinates (pixel centers at
    /// integer + 0.5); outside the image reads as 0.
    pub fn sample(&self, fx: f32, fy: f32) -> f32 {
        let x = fx - 0.5;
        let y = fy - 0.5;
        let x0 = x.floor();
        let y0 = y.floor();
        let tx = x - x0;
        let ty = y - y0;
        let read = |xi: f32, yi: f32| -> f32 {
            if xi < 0.0 || yi < 0.0 || xi >= self.width as f32 || yi >= self.height as f32 {
                0.0
            } else {
                self.get(xi as usize, yi as usize)
            }
        };
        let a = read(x0, y0) * (1.0 - tx) + read(x0 + 1.0, y0) * tx;
        let b = read(x0, y0 + 1.0) * (1.0 - tx) + read(x0 + 1.0, y0 + 1.0) * tx;
        a * (1.0 - ty) + b * ty
    }

    /// Like [`sample`](Self::sample) but clamps coordinates to the border.
    fn sample_clamped(&self, fx: f32, fy: f32) -> f32 {
        let cx = fx.clamp(0.5, self.width as f32 - 0.5);
        let cy = fy.clamp(0.5, self.height as f32 - 0.5);
        let x = cx - 0.5;
        let y = cy - 0.5;
        let x0 = (x.floor() as usize).min(self.width - 1);
        let y0 = (y.floor() as usize).min(self.height - 1);
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let tx = x - x0 as f32;
        let ty = y - y0 as f32;
        let a = self.get(x0, y0) * (1.0 - tx) + self.get(x1, y0) * tx;
        let b = self.get(x0, y1) * (1.0 - tx) + self.get(x1, y1) * tx;
        a * (1.0 - ty) + b * ty
    }

    /// Resamples the box `[x0, x1) x [y0, y1)` (pixel units) to `width x height`.
    pub fn crop_resize(&self, bx: (f32, f32, f32, f32), width: usize, height: usize) -> Image {
        let (x0, y0, x1, y1) = bx;
        if (x0, y0) == (0.0, 0.0)
            && (x1, y1) == (self.width as f32, self.height as f32)
            && (width, height) == (self.width, self.height)
        {
            return self.clone();
        }
        let sx = (x1 - x0) / width as f32;
        let sy = (y1 - y0) / height as f32;
        let mut out = Image::new(width, height);
        for y in 0..height {
            for x in 0..width {
                let fx = x0 + (x as f32 + 0.5) * sx;
                let fy = y0 + (y as f32 + 0.5) * sy;
                out.pixels[y * width + x] = self.sample_clamped(fx, fy);
            }
        }
        out
    }

    pub fn resize(&self, width: usize, height: usize) -> Image {
        self.crop_resize((0.0, 0.0, self.width as f32, self.height as f32), width, height)
    }

    pub fn flip_horizontal(&self) -> Image {
        let mut out = self.clone();
        for row in out.pixels.chunks_mut(self.width) {
            row.reverse();
        }
        out
    }

    /// Packs images into an `(N, H, W, channels)` tensor, replicating the
    /// gray channel when `channels > 1`.
    pub fn batch_tensor<T: Element>(images: &[Image], channels: usize) -> Result<Tensor<T>> {
        let first = images
            .first()
            .ok_or_else(|| Error::Argument("empty image batch".into()))?;
        let (w, h) = (first.width, first.height);
        let mut data = Vec::with_capacity(images.len() * w * h * channels);
        for img in images {
            if (img.width, img.height) != (w, h) {
                return Err(Error::Argument("images in a batch must share a size".into()));
            }
            for &p in &img.pixels {
                let v = T::from_f64(p as f64);
                data.extend(std::iter::repeat_n(v, channels));
            }
        }
        Tensor::from_vec([images.len(), h, w, channels], data)
    }
}

/// Loads an 8- or 16-bit PNG as gray intensities in `[0, 1]`.
pub fn load_png(path: &Path) -> Result<Image> {
    let img = ::image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let pixels = match img {
        DynamicImage::ImageLuma8(buf) => buf.pixels().map(|p| p.0[0] as f32 / 255.0).collect(),
        other => other
            .to_luma16()
            .pixels()
            .map(|p| p.0[0] as f32 / 65535.0)
            .collect(),
    };
    Image::from_pixels(w, h, pixels)
}

/// Writes an 8-bit gray PNG.
pub fn save_png(path: &Path, img: &Image) -> Result<()> {
    let bytes: Vec<u8> = img
        .pixels
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> =
        ImageBuffer::from_raw(img.width as u32, img.height as u32, bytes)
            .ok_or_else(|| Error::Internal("pixel buffer size".into()))?;
    buf.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}
