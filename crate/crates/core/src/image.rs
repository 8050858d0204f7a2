//! Height x width x channel images with intensities in `[0, 1]`.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::Image(format!(
                "{height}x{width}x{channels} image needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(Image {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, color: &[f32]) -> Self {
        let mut data = Vec::with_capacity(height * width * color.len());
        for _ in 0..height * width {
            data.extend_from_slice(color);
        }
        Image {
            height,
            width,
            channels: color.len(),
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f32] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn pixel_mut(&mut self, y: usize, x: usize) -> &mut [f32] {
        let i = (y * self.width + x) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    /// Fails with a canvas error unless the extents match exactly.
    pub fn check_canvas(&self, height: usize, width: usize, channels: usize) -> Result<()> {
        if (self.height, self.width, self.channels) != (height, width, channels) {
            return Err(Error::Canvas {
                expected_h: height,
                expected_w: width,
                expected_c: channels,
                h: self.height,
                w: self.width,
                c: self.channels,
            });
        }
        Ok(())
    }

    /// Clamps to `[0, 1]` and rounds to the nearest of 256 levels, so that an
    /// 8-bit PNG round-trip is lossless.
    pub fn quantize_8bit(&mut self) {
        for v in &mut self.data {
            *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
        }
    }

    pub fn clamp01(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    pub fn mse(&self, other: &Image) -> f64 {
        assert_eq!(self.data.len(), other.data.len(), "image sizes differ");
        let s: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| ((a - b) as f64).powi(2))
            .sum();
        s / self.data.len().max(1) as f64
    }

    pub fn mae(&self, other: &Image) -> f64 {
        assert_eq!(self.data.len(), other.data.len(), "image sizes differ");
        let s: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| ((a - b) as f64).abs())
            .sum();
        s / self.data.len().max(1) as f64
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        let color = match self.channels {
            1 => png::ColorType::Grayscale,
            3 => png::ColorType::Rgb,
            4 => png::ColorType::Rgba,
            c => return Err(Error::Image(format!("cannot encode {c}-channel image"))),
        };
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut enc = png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let mut w = enc
            .write_header()
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
        w.write_image_data(&bytes)
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
        w.finish()
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
    }

    /// Reads an 8-bit grayscale, RGB or RGBA PNG; grayscale and alpha are
    /// converted to RGB.
    pub fn read_png(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let err = |e: png::DecodingError| Error::Image(format!("{}: {e}", path.display()));
        let mut reader = png::Decoder::new(BufReader::new(file)).read_info().map_err(err)?;
        let size = reader
            .output_buffer_size()
            .ok_or_else(|| Error::Image(format!("{}: image too large", path.display())))?;
        let mut buf = vec![0u8; size];
        let info = reader.next_frame(&mut buf).map_err(err)?;
        if info.bit_depth != png::BitDepth::Eight {
            return Err(Error::Image(format!("{}: only 8-bit PNGs are supported", path.display())));
        }
        let (h, w) = (info.height as usize, info.width as usize);
        let src_c = match info.color_type {
            png::ColorType::Grayscale => 1,
            png::ColorType::GrayscaleAlpha => 2,
            png::ColorType::Rgb => 3,
            png::ColorType::Rgba => 4,
            png::ColorType::Indexed => {
                return Err(Error::Image(format!("{}: indexed PNGs are not supported", path.display())))
            }
        };
        let bytes = &buf[..info.buffer_size()];
        let mut data = Vec::with_capacity(h * w * 3);
        for px in bytes.chunks_exact(src_c) {
            let rgb = match src_c {
                1 | 2 => [px[0]; 3],
                _ => [px[0], px[1], px[2]],
            };
            data.extend(rgb.iter().map(|&b| b as f32 / 255.0));
        }
        Image::new(h, w, 3, data)
    }
}
