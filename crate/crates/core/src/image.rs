//! Planar float images and their PNG encoding.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{Error, Result};

/// A `channels × height × width` image stored channel-major, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn filled(channels: usize, height: usize, width: usize, level: f32) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![level; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "{} values for a {channels}x{height}x{width} image",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        let i = self.index(c, y, x);
        self.data[i] = v;
    }

    /// Writes `v` into every channel at `(y, x)`.
    pub fn set_all(&mut self, y: usize, x: usize, v: f32) {
        for c in 0..self.channels {
            self.set(c, y, x, v);
        }
    }

    /// Rounds every value to the nearest 8-bit level, as a PNG round trip would.
    pub fn quantize(&mut self) {
        for v in &mut self.data {
            *v = to_u8(*v) as f32 / 255.0;
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let color = match self.channels {
            1 => png::ColorType::Grayscale,
            3 => png::ColorType::Rgb,
            c => return Err(Error::Shape(format!("cannot write {c}-channel PNG"))),
        };
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut encoder =
            png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        encoder.set_color(color);
        encoder.set_depth(png::BitDepth::Eight);
        let mut writer = encoder
            .write_header()
            .map_err(|e| Error::format(path, e))?;
        let mut bytes = Vec::with_capacity(self.data.len());
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..self.channels {
                    bytes.push(to_u8(self.get(c, y, x)));
                }
            }
        }
        writer
            .write_image_data(&bytes)
            .map_err(|e| Error::format(path, e))?;
        writer.finish().map_err(|e| Error::format(path, e))
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut decoder = png::Decoder::new(BufReader::new(file));
        decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
        let mut reader = decoder.read_info().map_err(|e| Error::format(path, e))?;
        let mut buf = vec![0; reader.output_buffer_size()];
        let info = reader
            .next_frame(&mut buf)
            .map_err(|e| Error::format(path, e))?;
        let channels = match info.color_type {
            png::ColorType::Grayscale => 1,
            png::ColorType::Rgb => 3,
            other => return Err(Error::format(path, format!("unsupported color type {other:?}"))),
        };
        let (width, height) = (info.width as usize, info.height as usize);
        let mut img = Image::filled(channels, height, width, 0.0);
        let stride = info.line_size;
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    img.set(c, y, x, buf[y * stride + x * channels + c] as f32 / 255.0);
                }
            }
        }
        Ok(img)
    }
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        let mut img = Image::filled(3, 4, 5, 0.25);
        img.set(1, 2, 3, 0.9);
        img.save_png(&path).unwrap();
        let back = Image::load_png(&path).unwrap();
        img.quantize();
        assert_eq!(back, img);
    }
}
