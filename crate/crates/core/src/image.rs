//! Planar floating-point images and PNG dumps.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Channel-planar image with values nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::Config("image extents must be positive".into()));
        }
        if data.len() != channels * height * width {
            return Err(Error::shape("image", &[channels, height, width], &[data.len()]));
        }
        Ok(Image {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, v: f64) -> Self {
        Image {
            channels,
            height,
            width,
            data: vec![v; channels * height * width],
        }
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        &self.data[c * self.pixels()..(c + 1) * self.pixels()]
    }

    /// Grayscale plane: identity for one channel, BT.601 weights for RGB.
    pub fn luminance(&self) -> Vec<f64> {
        match self.channels {
            1 => self.data.clone(),
            3 => (0..self.pixels())
                .map(|i| 0.299 * self.data[i] + 0.587 * self.data[self.pixels() + i] + 0.114 * self.data[2 * self.pixels() + i])
                .collect(),
            c => (0..self.pixels())
                .map(|i| (0..c).map(|ch| self.data[ch * self.pixels() + i]).sum::<f64>() / c as f64)
                .collect(),
        }
    }

    /// 8-bit interleaved samples, rounded after clamping to `[0, 1]`.
    pub fn to_u8_interleaved(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len());
        for i in 0..self.pixels() {
            for c in 0..self.channels {
                let v = self.data[c * self.pixels() + i].clamp(0.0, 1.0);
                out.push((v * 255.0).round() as u8);
            }
        }
        out
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        let color = match self.channels {
            1 => png::ColorType::Grayscale,
            3 => png::ColorType::Rgb,
            c => return Err(Error::Config(format!("cannot write {c}-channel image as PNG"))),
        };
        let mut buf = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut buf, self.width as u32, self.height as u32);
            enc.set_color(color);
            enc.set_depth(png::BitDepth::Eight);
            let mut writer = enc.write_header().map_err(|e| Error::format("png", e.to_string()))?;
            writer
                .write_image_data(&self.to_u8_interleaved())
                .map_err(|e| Error::format("png", e.to_string()))?;
        }
        std::fs::File::create(path)?.write_all(&buf)?;
        Ok(())
    }

    pub fn read_png(path: &Path) -> Result<Self> {
        let decoder = png::Decoder::new(std::io::BufReader::new(std::fs::File::open(path)?));
        let mut reader = decoder.read_info().map_err(|e| Error::format("png", e.to_string()))?;
        let size = reader
            .output_buffer_size()
            .ok_or_else(|| Error::format("png", "image too large"))?;
        let mut buf = vec![0; size];
        let info = reader.next_frame(&mut buf).map_err(|e| Error::format("png", e.to_string()))?;
        let channels = match info.color_type {
            png::ColorType::Grayscale => 1,
            png::ColorType::Rgb => 3,
            other => return Err(Error::format("png", format!("unsupported color type {other:?}"))),
        };
        if info.bit_depth != png::BitDepth::Eight {
            return Err(Error::format("png", "only 8-bit images are supported"));
        }
        let (h, w) = (info.height as usize, info.width as usize);
        let mut data = vec![0.0; channels * h * w];
        for i in 0..h * w {
            for c in 0..channels {
                data[c * h * w + i] = buf[i * channels + c] as f64 / 255.0;
            }
        }
        Image::new(channels, h, w, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_quantizes_to_8_bits() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::new(3, 2, 3, (0..18).map(|i| i as f64 / 17.0).collect()).unwrap();
        let path = dir.path().join("x.png");
        img.write_png(&path).unwrap();
        let back = Image::read_png(&path).unwrap();
        assert_eq!((back.channels, back.height, back.width), (3, 2, 3));
        assert!(img.data.iter().zip(&back.data).all(|(a, b)| (a - b).abs() <= 0.5 / 255.0 + 1e-12));
    }

    #[test]
    fn luminance_weights() {
        let img = Image::new(3, 1, 1, vec![1.0, 0.0, 0.0]).unwrap();
        assert_eq!(img.luminance(), vec![0.299]);
    }
}
