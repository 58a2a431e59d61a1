//! Float rasters, binary masks and PNG/JPEG conversion.
//!
//! Channel values are `f32` in `[0, 1]`, stored row-major with interleaved
//! channels. Rasters loaded from 8-bit files hold values `k / 255`, from 16-bit
//! files `k / 65535`, so writing them back at the same depth is lossless.

use std::path::Path;

use image::{ImageBuffer, Luma, Rgb as ImgRgb, Rgba as ImgRgba};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An RGB raster with straight channel values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Rgb {
    pub width: u32,
    pub height: u32,
    pub data: Vec<[f32; 3]>,
}

/// An RGBA raster with straight (non-premultiplied) alpha.
#[derive(Debug, Clone, PartialEq)]
pub struct Rgba {
    pub width: u32,
    pub height: u32,
    pub data: Vec<[f32; 4]>,
}

/// A binary raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub width: u32,
    pub height: u32,
    pub data: Vec<bool>,
}

/// Pixel-aligned box with inclusive bounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PixelBox {
    pub x_min: u32,
    pub y_min: u32,
    pub x_max: u32,
    pub y_max: u32,
}

impl PixelBox {
    pub fn width(&self) -> u32 {
        self.x_max - self.x_min + 1
    }

    pub fn height(&self) -> u32 {
        self.y_max - self.y_min + 1
    }

    pub fn area(&self) -> u64 {
        self.width() as u64 * self.height() as u64
    }
}

/// Running min/max accumulator for tight boxes.
#[derive(Debug, Default, Clone, Copy)]
pub struct BoxAccumulator(Option<PixelBox>);

impl BoxAccumulator {
    pub fn add(&mut self, x: u32, y: u32) {
        self.0 = Some(match self.0 {
            None => PixelBox {
                x_min: x,
                y_min: y,
                x_max: x,
                y_max: y,
            },
            Some(b) => PixelBox {
                x_min: b.x_min.min(x),
                y_min: b.y_min.min(y),
                x_max: b.x_max.max(x),
                y_max: b.y_max.max(y),
            },
        });
    }

    pub fn finish(self) -> Option<PixelBox> {
        self.0
    }
}

fn check_dims(width: u32, height: u32, len: usize) -> Result<()> {
    if width as usize * height as usize != len {
        return Err(Error::InvalidInput(format!(
            "{width}x{height} raster with {len} pixels"
        )));
    }
    Ok(())
}

impl Rgb {
    pub fn new(width: u32, height: u32, fill: [f32; 3]) -> Self {
        Self {
            width,
            height,
            data: vec![fill; width as usize * height as usize],
        }
    }

    pub fn from_vec(width: u32, height: u32, data: Vec<[f32; 3]>) -> Result<Self> {
        check_dims(width, height, data.len())?;
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, x: u32, y: u32) -> usize {
        y as usize * self.width as usize + x as usize
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> [f32; 3] {
        self.data[self.index(x, y)]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, px: [f32; 3]) {
        let i = self.index(x, y);
        self.data[i] = px;
    }

    /// Loads an 8- or 16-bit image, dropping any alpha channel.
    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::image(path, e))?;
        let buf = img.to_rgb32f();
        let (width, height) = buf.dimensions();
        let data = buf
            .as_raw()
            .chunks_exact(3)
            .map(|c| [c[0], c[1], c[2]])
            .collect();
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn to_rgb8(&self) -> ImageBuffer<ImgRgb<u8>, Vec<u8>> {
        let raw = self
            .data
            .iter()
            .flat_map(|p| p.map(to_u8))
            .collect::<Vec<_>>();
        ImageBuffer::from_raw(self.width, self.height, raw).expect("dimensions checked")
    }

    pub fn save_png8(&self, path: &Path) -> Result<()> {
        self.to_rgb8()
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::image(path, e))
    }

    /// Rounds every channel to the nearest 8-bit level, matching what
    /// [`Rgb::save_png8`] followed by [`Rgb::load`] would return.
    pub fn quantized8(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            data: self
                .data
                .iter()
                .map(|p| p.map(|v| to_u8(v) as f32 / 255.0))
                .collect(),
        }
    }
}

impl Rgba {
    pub fn new(width: u32, height: u32, fill: [f32; 4]) -> Self {
        Self {
            width,
            height,
            data: vec![fill; width as usize * height as usize],
        }
    }

    pub fn from_vec(width: u32, height: u32, data: Vec<[f32; 4]>) -> Result<Self> {
        check_dims(width, height, data.len())?;
        Ok(Self {
            width,
            height,
            data,
        })
    }

    #[inline]
    pub fn index(&self, x: u32, y: u32) -> usize {
        y as usize * self.width as usize + x as usize
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> [f32; 4] {
        self.data[self.index(x, y)]
    }

    pub fn alpha_sum(&self) -> f64 {
        self.data.iter().map(|p| p[3] as f64).sum()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::image(path, e))?;
        let buf = img.to_rgba32f();
        let (width, height) = buf.dimensions();
        let data = buf
            .as_raw()
            .chunks_exact(4)
            .map(|c| [c[0], c[1], c[2], c[3]])
            .collect();
        Ok(Self {
            width,
            height,
            data,
        })
    }

    /// Writes a 16-bit RGBA PNG. Lossless for rasters produced by
    /// [`Rgba::quantized16`] or loaded from 16-bit files.
    pub fn save_png16(&self, path: &Path) -> Result<()> {
        let raw = self
            .data
            .iter()
            .flat_map(|p| p.map(to_u16))
            .collect::<Vec<_>>();
        let buf: ImageBuffer<ImgRgba<u16>, Vec<u16>> =
            ImageBuffer::from_raw(self.width, self.height, raw).expect("dimensions checked");
        buf.save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::image(path, e))
    }

    pub fn quantized16(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            data: self
                .data
                .iter()
                .map(|p| p.map(|v| to_u16(v) as f32 / 65535.0))
                .collect(),
        }
    }
}

impl Mask {
    pub fn new(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            data: vec![false; width as usize * height as usize],
        }
    }

    pub fn from_vec(width: u32, height: u32, data: Vec<bool>) -> Result<Self> {
        check_dims(width, height, data.len())?;
        Ok(Self {
            width,
            height,
            data,
        })
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> bool {
        self.data[y as usize * self.width as usize + x as usize]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, v: bool) {
        let i = y as usize * self.width as usize + x as usize;
        self.data[i] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    /// Loads a single-channel (or any) image; non-zero luma is foreground.
    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::image(path, e))?;
        let buf = img.to_luma16();
        let (width, height) = buf.dimensions();
        Ok(Self {
            width,
            height,
            data: buf.as_raw().iter().map(|&v| v != 0).collect(),
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let raw = self.data.iter().map(|&v| if v { 255u8 } else { 0 }).collect();
        let buf: ImageBuffer<Luma<u8>, Vec<u8>> =
            ImageBuffer::from_raw(self.width, self.height, raw).expect("dimensions checked");
        buf.save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::image(path, e))
    }
}

#[inline]
/// PNG and JPEG files directly inside `dir`, sorted by path.
pub fn list_images(dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|x| x.to_str())
                    .is_some_and(|x| matches!(x.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        })
        .collect();
    paths.sort();
    Ok(paths)
}

pub fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[inline]
pub fn to_u16(v: f32) -> u16 {
    (v.clamp(0.0, 1.0) * 65535.0).round() as u16
}

/// Reads a 16-bit single-channel label PNG.
pub fn load_labels16(path: &Path) -> Result<(u32, u32, Vec<u16>)> {
    let img = image::open(path).map_err(|e| Error::image(path, e))?;
    let buf = img.to_luma16();
    let (w, h) = buf.dimensions();
    Ok((w, h, buf.into_raw()))
}

pub fn save_labels16(path: &Path, width: u32, height: u32, labels: &[u16]) -> Result<()> {
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(width, height, labels.to_vec())
            .ok_or_else(|| Error::InvalidInput("label buffer size mismatch".into()))?;
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::image(path, e))
}
