//! 8-bit grayscale rasters and the BMP/PNG boundary.

use std::io::Cursor;
use std::path::Path;

use image::{DynamicImage, ImageFormat, ImageReader};
use thiserror::Error;

/// Smallest accepted side length of a [`GrayImage`].
pub const MIN_SIDE: usize = 8;

/// Width of the reference fingerprint scans.
pub const CANONICAL_WIDTH: usize = 96;
/// Height of the reference fingerprint scans.
pub const CANONICAL_HEIGHT: usize = 103;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot decode image {path}: {reason}")]
    Decode { path: String, reason: String },
    #[error("unsupported image format: {0}")]
    UnsupportedFormat(String),
    #[error("invalid raster: {0}")]
    InvalidRaster(String),
    #[error("cannot encode image: {0}")]
    Encode(String),
}

/// Row-major 8-bit grayscale raster. 0 is a dark ridge, 255 is background.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self, ImageError> {
        if width < MIN_SIDE || height < MIN_SIDE {
            return Err(ImageError::InvalidRaster(format!(
                "{width}x{height} is below the {MIN_SIDE}x{MIN_SIDE} minimum"
            )));
        }
        if pixels.len() != width * height {
            return Err(ImageError::InvalidRaster(format!(
                "{} pixels for a {width}x{height} raster",
                pixels.len()
            )));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Result<Self, ImageError> {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> u8,
    ) -> Result<Self, ImageError> {
        let mut pixels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(x, y));
            }
        }
        Self::new(width, height, pixels)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [u8] {
        &mut self.pixels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        self.pixels[y * self.width + x] = v;
    }

    /// Circular shift by (dx, dy) pixels.
    pub fn roll(&self, dx: isize, dy: isize) -> GrayImage {
        let (w, h) = (self.width as isize, self.height as isize);
        let mut out = self.clone();
        for y in 0..h {
            for x in 0..w {
                let sx = (x - dx).rem_euclid(w);
                let sy = (y - dy).rem_euclid(h);
                out.pixels[(y * w + x) as usize] = self.pixels[(sy * w + sx) as usize];
            }
        }
        out
    }

    pub fn to_png_bytes(&self) -> Result<Vec<u8>, ImageError> {
        let buf = image::GrayImage::from_raw(self.width as u32, self.height as u32, self.pixels.clone())
            .ok_or_else(|| ImageError::Encode("raster size mismatch".into()))?;
        let mut out = Cursor::new(Vec::new());
        DynamicImage::ImageLuma8(buf)
            .write_to(&mut out, ImageFormat::Png)
            .map_err(|e| ImageError::Encode(e.to_string()))?;
        Ok(out.into_inner())
    }

    pub fn save_png(&self, path: &Path) -> Result<(), ImageError> {
        let bytes = self.to_png_bytes()?;
        std::fs::write(path, bytes).map_err(|source| ImageError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

/// Binary raster, 1 marks a pixel that an alteration may have modified.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn empty(width: usize, height: usize) -> Self {
        Self { width, height, bits: vec![false; width * height] }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn area(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn to_image(&self) -> GrayImage {
        GrayImage {
            width: self.width,
            height: self.height,
            pixels: self.bits.iter().map(|&b| if b { 255 } else { 0 }).collect(),
        }
    }

    /// Pixels >= 128 are set.
    pub fn from_image(img: &GrayImage) -> Self {
        Self {
            width: img.width,
            height: img.height,
            bits: img.pixels.iter().map(|&p| p >= 128).collect(),
        }
    }
}

/// Interleaved 8-bit RGB raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn save_png(&self, path: &Path) -> Result<(), ImageError> {
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, self.data.clone())
            .ok_or_else(|| ImageError::Encode("raster size mismatch".into()))?;
        let mut out = Cursor::new(Vec::new());
        DynamicImage::ImageRgb8(buf)
            .write_to(&mut out, ImageFormat::Png)
            .map_err(|e| ImageError::Encode(e.to_string()))?;
        std::fs::write(path, out.into_inner()).map_err(|source| ImageError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

/// ITU-R BT.601 luma, rounded half-up.
#[inline]
pub fn luma601(r: u8, g: u8, b: u8) -> u8 {
    ((299 * r as u32 + 587 * g as u32 + 114 * b as u32 + 500) / 1000) as u8
}

/// Reads a BMP or PNG file as 8-bit grayscale.
pub fn load_image(path: &Path) -> Result<GrayImage, ImageError> {
    let bytes = std::fs::read(path).map_err(|source| ImageError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_image(&bytes, &path.display().to_string())
}

pub fn decode_image(bytes: &[u8], name: &str) -> Result<GrayImage, ImageError> {
    let format = image::guess_format(bytes)
        .map_err(|_| ImageError::UnsupportedFormat(format!("{name}: unrecognized signature")))?;
    if !matches!(format, ImageFormat::Bmp | ImageFormat::Png) {
        return Err(ImageError::UnsupportedFormat(format!("{name}: {format:?}")));
    }
    let decoded = ImageReader::with_format(Cursor::new(bytes), format)
        .decode()
        .map_err(|e| ImageError::Decode { path: name.to_string(), reason: e.to_string() })?;
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    let pixels = match decoded {
        DynamicImage::ImageLuma8(buf) => buf.into_raw(),
        DynamicImage::ImageLumaA8(buf) => buf.pixels().map(|p| p.0[0]).collect(),
        DynamicImage::ImageLuma16(buf) => {
            buf.pixels().map(|p| ((p.0[0] as u32 * 255 + 32767) / 65535) as u8).collect()
        }
        other => other.to_rgb8().pixels().map(|p| luma601(p.0[0], p.0[1], p.0[2])).collect(),
    };
    GrayImage::new(w, h, pixels)
}
