//! Grayscale images, feature maps, and 8-bit PNG interchange.

use std::io::Cursor;

use crate::error::{check_dim, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        check_dim("image pixel count", height * width, pixels.len())?;
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            pixels: vec![value; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.pixels
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.pixels
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.pixels
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().sum::<f64>() / self.pixels.len() as f64
    }

    /// Mean squared pixel difference.
    pub fn mse(&self, other: &Image) -> Result<f64> {
        check_dim("image height", self.height, other.height)?;
        check_dim("image width", self.width, other.width)?;
        let sum: f64 = self
            .pixels
            .iter()
            .zip(&other.pixels)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        Ok(sum / self.pixels.len() as f64)
    }

    /// Values clamped to `[0, 1]`, scaled to 0–255, rounded half-up.
    pub fn to_u8(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .map(|&v| {
                let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
                (v * 255.0 + 0.5).floor() as u8
            })
            .collect()
    }

    pub fn to_png(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, self.width as u32, self.height as u32);
            enc.set_color(png::ColorType::Grayscale);
            enc.set_depth(png::BitDepth::Eight);
            let mut writer = enc.write_header().map_err(|e| Error::Image(e.to_string()))?;
            writer
                .write_image_data(&self.to_u8())
                .map_err(|e| Error::Image(e.to_string()))?;
        }
        Ok(out)
    }

    /// Decode a PNG into `[0, 1]` intensities. Color images are averaged to gray.
    pub fn from_png(bytes: &[u8]) -> Result<Self> {
        let mut decoder = png::Decoder::new(Cursor::new(bytes));
        decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
        let mut reader = decoder.read_info().map_err(|e| Error::Image(e.to_string()))?;
        let size = reader
            .output_buffer_size()
            .ok_or_else(|| Error::Image("image too large".into()))?;
        let mut buf = vec![0u8; size];
        let info = reader.next_frame(&mut buf).map_err(|e| Error::Image(e.to_string()))?;
        let channels = match info.color_type {
            png::ColorType::Grayscale => 1,
            png::ColorType::GrayscaleAlpha => 2,
            png::ColorType::Rgb => 3,
            png::ColorType::Rgba => 4,
            png::ColorType::Indexed => {
                return Err(Error::Image("indexed PNG after expansion".into()));
            }
        };
        let (w, h) = (info.width as usize, info.height as usize);
        let color = if channels >= 3 { 3 } else { 1 };
        let pixels = buf[..info.buffer_size()]
            .chunks(info.line_size)
            .take(h)
            .flat_map(|row| {
                row.chunks(channels).take(w).map(move |px| {
                    px[..color].iter().map(|&c| c as f64).sum::<f64>() / (color as f64 * 255.0)
                })
            })
            .collect();
        Image::new(h, w, pixels)
    }
}

/// One level of a feature pyramid.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

pub type Features = Vec<FeatureMap>;
