//! Channel-first float images in `[0, 1]` and 8-bit file codecs.

use std::path::Path;

use candle_core::{Device, Tensor};

use crate::error::{Error, Result};
use crate::grid::{Grid, Mask};

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    channels: usize,
    height: usize,
    width: usize,
    /// CHW, row-major within each channel.
    data: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::ShapeMismatch(format!(
                "image {channels}x{height}x{width} needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        Ok(Self { channels, height, width, data })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Self { channels, height, width, data: vec![value; channels * height * width] }
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self { channels, height, width, data }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    /// `(1, C, H, W)` tensor.
    pub fn to_tensor(&self, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.data, (1, self.channels, self.height, self.width), device)?)
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let t = match t.rank() {
            4 => t.squeeze(0)?,
            _ => t.clone(),
        };
        let (c, h, w) = t.dims3()?;
        Self::new(c, h, w, crate::diffusion::to_vec_f32(&t)?)
    }

    /// Mean absolute difference per value.
    pub fn mean_abs_diff(&self, other: &Image) -> Result<f64> {
        if self.dims() != other.dims() {
            return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", self.dims(), other.dims())));
        }
        let s: f64 = self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs() as f64).sum();
        Ok(s / self.data.len().max(1) as f64)
    }

    /// Bilinear resize with half-pixel centers, per channel.
    pub fn resize(&self, height: usize, width: usize) -> Image {
        if (height, width) == (self.height, self.width) {
            return self.clone();
        }
        let mut data = Vec::with_capacity(self.channels * height * width);
        for c in 0..self.channels {
            let plane = &self.data[c * self.height * self.width..(c + 1) * self.height * self.width];
            let g = Grid::new(self.height, self.width, plane.to_vec()).expect("plane size");
            data.extend(g.resize_bilinear(height, width).into_data());
        }
        Image { channels: self.channels, height, width, data }
    }

    pub fn clamp01(&self) -> Image {
        Image { data: self.data.iter().map(|v| v.clamp(0.0, 1.0)).collect(), ..self.clone() }
    }

    fn to_rgb8(&self) -> Result<image::RgbImage> {
        let q = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        match self.channels {
            1 | 3 => Ok(image::RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
                let (x, y) = (x as usize, y as usize);
                let px = |c: usize| q(self.get(if self.channels == 1 { 0 } else { c }, y, x));
                image::Rgb([px(0), px(1), px(2)])
            })),
            c => Err(Error::ShapeMismatch(format!("cannot save a {c}-channel image"))),
        }
    }

    /// Writes an 8-bit RGB file; the format follows the extension.
    pub fn save(&self, path: &Path) -> Result<()> {
        let rgb = self.to_rgb8()?;
        let mut bytes = std::io::Cursor::new(Vec::new());
        let fmt = image::ImageFormat::from_path(path).map_err(|e| image_err(path, e))?;
        rgb.write_to(&mut bytes, fmt).map_err(|e| image_err(path, e))?;
        crate::io::write_atomic(path, bytes.get_ref())
    }

    /// Reads any supported 8-bit file as a 3-channel image in `[0, 1]`.
    pub fn load(path: &Path) -> Result<Image> {
        let img = decode(path)?.to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        Ok(Image::from_fn(3, h, w, |c, y, x| img.get_pixel(x as u32, y as u32)[c] as f32 / 255.0))
    }
}

fn image_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Image { path: path.to_path_buf(), msg: e.to_string() }
}

fn decode(path: &Path) -> Result<image::DynamicImage> {
    let bytes = crate::io::read(path)?;
    image::load_from_memory(&bytes).map_err(|e| image_err(path, e))
}

/// Stacks same-sized images into `(N, C, H, W)`.
pub fn batch_tensor(images: &[&Image], device: &Device) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::EmptyDataset("empty image batch".into()))?;
    let (c, h, w) = first.dims();
    let mut data = Vec::with_capacity(images.len() * c * h * w);
    for img in images {
        if img.dims() != (c, h, w) {
            return Err(Error::ShapeMismatch(format!(
                "batch mixes {:?} and {:?}",
                (c, h, w),
                img.dims()
            )));
        }
        data.extend_from_slice(&img.data);
    }
    Ok(Tensor::from_vec(data, (images.len(), c, h, w), device)?)
}

pub fn unbatch(t: &Tensor) -> Result<Vec<Image>> {
    (0..t.dim(0)?).map(|i| Image::from_tensor(&t.get(i)?)).collect()
}

/// Grayscale mask file: any value above 127 is foreground.
pub fn load_mask(path: &Path) -> Result<Mask> {
    let img = decode(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(Grid::from_fn(h, w, |y, x| img.get_pixel(x as u32, y as u32)[0] > 127))
}

pub fn save_mask(mask: &Mask, path: &Path) -> Result<()> {
    let (h, w) = mask.dims();
    let img = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([if mask.get(y as usize, x as usize) { 255 } else { 0 }])
    });
    let mut bytes = std::io::Cursor::new(Vec::new());
    img.write_to(&mut bytes, image::ImageFormat::Png).map_err(|e| image_err(path, e))?;
    crate::io::write_atomic(path, bytes.get_ref())
}
