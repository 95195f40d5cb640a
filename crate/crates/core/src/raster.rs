//! 8-bit PNG encode/decode used by every on-disk grid format.
//!
//! Encoding settings are pinned so that identical pixels always produce
//! identical bytes.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Single-channel 8-bit image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::Shape(format!(
                "{} pixels for a {width}x{height} image",
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        Self {
            width,
            height,
            pixels: vec![value; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        self.pixels[y * self.width + x] = v;
    }

    pub fn to_png(&self) -> Result<Vec<u8>> {
        encode(
            self.width,
            self.height,
            png::ColorType::Grayscale,
            &self.pixels,
        )
    }

    pub fn from_png(bytes: &[u8]) -> Result<Self> {
        let (width, height, color, data) = decode(bytes)?;
        if color != png::ColorType::Grayscale {
            return Err(Error::format(
                "<png>",
                format!("expected grayscale, got {color:?}"),
            ));
        }
        Self::new(width, height, data)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_bytes(path, &self.to_png()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_png(&bytes).map_err(|e| match e {
            Error::Format { reason, .. } => Error::format(path, reason),
            other => other,
        })
    }
}

/// Three-channel 8-bit image, row-major RGB triples.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl RgbImage {
    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let mut pixels = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            pixels.extend_from_slice(&rgb);
        }
        Self {
            width,
            height,
            pixels,
        }
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn to_png(&self) -> Result<Vec<u8>> {
        encode(self.width, self.height, png::ColorType::Rgb, &self.pixels)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_bytes(path, &self.to_png()?)
    }
}

fn encode(width: usize, height: usize, color: png::ColorType, data: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        enc.set_compression(png::Compression::Default);
        enc.set_filter(png::FilterType::Sub);
        enc.set_adaptive_filter(png::AdaptiveFilterType::NonAdaptive);
        let mut writer = enc
            .write_header()
            .map_err(|e| Error::format("<png>", e.to_string()))?;
        writer
            .write_image_data(data)
            .map_err(|e| Error::format("<png>", e.to_string()))?;
    }
    Ok(out)
}

fn decode(bytes: &[u8]) -> Result<(usize, usize, png::ColorType, Vec<u8>)> {
    let decoder = png::Decoder::new(bytes);
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::format("<png>", e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::format("<png>", e.to_string()))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::format("<png>", "only 8-bit images are supported"));
    }
    buf.truncate(info.buffer_size());
    Ok((
        info.width as usize,
        info.height as usize,
        info.color_type,
        buf,
    ))
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_roundtrip_is_byte_stable() {
        let img = GrayImage::new(3, 2, vec![0, 1, 2, 128, 254, 255]).unwrap();
        let a = img.to_png().unwrap();
        let back = GrayImage::from_png(&a).unwrap();
        assert_eq!(back, img);
        assert_eq!(back.to_png().unwrap(), a);
    }

    #[test]
    fn rejects_wrong_pixel_count() {
        assert!(GrayImage::new(2, 2, vec![0; 3]).is_err());
    }
}
