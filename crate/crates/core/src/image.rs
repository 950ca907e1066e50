//! RGB images in `[0,1]` and their 8-bit PNG form.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use migs_tensor::Tensor;

use crate::error::{MigsError, Result};

/// Row-major `[H, W, 3]` image with channel values in `[0,1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(MigsError::Contract(format!("image size {height}x{width}")));
        }
        if data.len() != height * width * 3 {
            return Err(MigsError::Contract(format!(
                "image {height}x{width} needs {} values, got {}",
                height * width * 3,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            data.extend_from_slice(&rgb);
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Channel-first tensor `[3,H,W]` mapped to `[-1,1]`.
    pub fn to_signed_chw(&self) -> Tensor {
        let (h, w) = (self.height, self.width);
        Tensor::from_fn(&[3, h, w], |i| {
            let c = i / (h * w);
            let p = i % (h * w);
            self.data[p * 3 + c] * 2.0 - 1.0
        })
    }

    /// Inverse of [`to_signed_chw`](Self::to_signed_chw), clamping to `[0,1]`.
    pub fn from_signed_chw(t: &Tensor) -> Result<Self> {
        if t.ndim() != 3 || t.dim(0) != 3 {
            return Err(MigsError::Contract(format!(
                "expected [3,H,W], got {:?}",
                t.shape()
            )));
        }
        let (h, w) = (t.dim(1), t.dim(2));
        let mut data = vec![0.0; h * w * 3];
        for c in 0..3 {
            for p in 0..h * w {
                data[p * 3 + c] = ((t.data()[c * h * w + p] + 1.0) * 0.5).clamp(0.0, 1.0);
            }
        }
        Self::new(h, w, data)
    }

    /// 8-bit quantisation as used for PNG storage.
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn from_rgb8(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(
            height,
            width,
            bytes.iter().map(|&b| b as f64 / 255.0).collect(),
        )
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| MigsError::io(path, e))?;
        let mut encoder =
            png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        encoder.set_color(png::ColorType::Rgb);
        encoder.set_depth(png::BitDepth::Eight);
        let fmt = |e: png::EncodingError| MigsError::Format {
            path: path.to_path_buf(),
            message: e.to_string(),
        };
        let mut writer = encoder.write_header().map_err(fmt)?;
        writer.write_image_data(&self.to_rgb8()).map_err(fmt)?;
        writer.finish().map_err(fmt)
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| MigsError::io(path, e))?;
        let fmt = |message: String| MigsError::Format {
            path: path.to_path_buf(),
            message,
        };
        let decoder = png::Decoder::new(std::io::BufReader::new(file));
        let mut reader = decoder.read_info().map_err(|e| fmt(e.to_string()))?;
        let mut buf = vec![
            0;
            reader
                .output_buffer_size()
                .ok_or_else(|| fmt("image too large".into()))?
        ];
        let info = reader
            .next_frame(&mut buf)
            .map_err(|e| fmt(e.to_string()))?;
        if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
            return Err(fmt(format!(
                "expected 8-bit RGB, got {:?} {:?}",
                info.color_type, info.bit_depth
            )));
        }
        Self::from_rgb8(
            info.height as usize,
            info.width as usize,
            &buf[..info.buffer_size()],
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn signed_round_trip() {
        let img = RgbImage::new(2, 3, (0..18).map(|i| i as f64 / 17.0).collect()).unwrap();
        let back = RgbImage::from_signed_chw(&img.to_signed_chw()).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn png_round_trip_is_exact_for_quantised_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        let bytes: Vec<u8> = (0..4 * 5 * 3).map(|i| (i * 7 % 256) as u8).collect();
        let img = RgbImage::from_rgb8(4, 5, &bytes).unwrap();
        img.save_png(&path).unwrap();
        let back = RgbImage::load_png(&path).unwrap();
        assert_eq!(back.to_rgb8(), bytes);
    }

    #[test]
    fn rejects_empty_image() {
        assert!(RgbImage::new(0, 4, vec![]).is_err());
    }
}
