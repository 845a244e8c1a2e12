//! RGB buffers, portable-pixmap I/O and the pre-mix geometry step.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use image::imageops::{self, FilterType};
pub use image::RgbImage;

use crate::error::{Error, Result};

/// A full-precision RGB buffer; values are on the 0..=255 scale.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatImage {
    pub width: u32,
    pub height: u32,
    /// Interleaved RGB, row-major.
    pub data: Vec<f64>,
}

impl FloatImage {
    pub fn from_rgb(img: &RgbImage) -> Self {
        FloatImage {
            width: img.width(),
            height: img.height(),
            data: img.as_raw().iter().map(|&b| b as f64).collect(),
        }
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    /// Quantizes to 8 bits, rounding half to even.
    pub fn quantize(&self) -> RgbImage {
        let bytes = self
            .data
            .iter()
            .map(|&v| v.clamp(0.0, 255.0).round_ties_even() as u8)
            .collect();
        RgbImage::from_raw(self.width, self.height, bytes).expect("buffer matches dimensions")
    }
}

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend_from_slice(img.as_raw());
    out
}

pub fn decode_image(bytes: &[u8]) -> Result<RgbImage> {
    Ok(image::load_from_memory(bytes)?.to_rgb8())
}

pub fn write_ppm(path: &Path, img: &RgbImage) -> Result<()> {
    crate::fsutil::write_atomic(path, &encode_ppm(img))
}

pub fn read_image(path: &Path) -> Result<RgbImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&bytes)
}

/// Center-crops to the target aspect ratio, then resizes bilinearly.
pub fn fit_to(img: &RgbImage, width: u32, height: u32) -> RgbImage {
    if img.dimensions() == (width, height) {
        return img.clone();
    }
    let (w, h) = img.dimensions();
    // crop so that w/h == width/height
    let (cw, ch) = if (w as u64) * (height as u64) > (h as u64) * (width as u64) {
        (((h as u64 * width as u64) / height as u64).max(1) as u32, h)
    } else {
        (w, ((w as u64 * height as u64) / width as u64).max(1) as u32)
    };
    let x = (w - cw) / 2;
    let y = (h - ch) / 2;
    let cropped = imageops::crop_imm(img, x, y, cw, ch).to_image();
    imageops::resize(&cropped, width, height, FilterType::Triangle)
}

/// Where image buffers referenced by locator strings live.
pub trait ImageStore: Send + Sync {
    fn put(&self, locator: &str, img: &RgbImage) -> Result<()>;
    fn get(&self, locator: &str) -> Result<RgbImage>;
}

#[derive(Default)]
pub struct MemoryImageStore {
    images: Mutex<HashMap<String, RgbImage>>,
}

impl MemoryImageStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.images.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl ImageStore for MemoryImageStore {
    fn put(&self, locator: &str, img: &RgbImage) -> Result<()> {
        self.images
            .lock()
            .unwrap()
            .insert(locator.to_string(), img.clone());
        Ok(())
    }

    fn get(&self, locator: &str) -> Result<RgbImage> {
        self.images
            .lock()
            .unwrap()
            .get(locator)
            .cloned()
            .ok_or_else(|| Error::validation(format!("unknown image {locator}")))
    }
}

/// Stores images as PPM files under a root directory.
pub struct DirImageStore {
    root: PathBuf,
}

impl DirImageStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        DirImageStore { root: root.into() }
    }
}

impl ImageStore for DirImageStore {
    fn put(&self, locator: &str, img: &RgbImage) -> Result<()> {
        write_ppm(&self.root.join(locator), img)
    }

    fn get(&self, locator: &str) -> Result<RgbImage> {
        read_image(&self.root.join(locator))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip() {
        let img = RgbImage::from_fn(5, 3, |x, y| image::Rgb([x as u8 * 40, y as u8 * 70, 9]));
        let bytes = encode_ppm(&img);
        assert!(bytes.starts_with(b"P6\n5 3\n255\n"));
        assert_eq!(decode_image(&bytes).unwrap(), img);
    }

    #[test]
    fn quantize_rounds_half_to_even() {
        let f = FloatImage {
            width: 1,
            height: 1,
            data: vec![0.5, 1.5, 300.0],
        };
        assert_eq!(f.quantize().as_raw(), &vec![0u8, 2, 255]);
    }

    #[test]
    fn fit_to_dimensions() {
        let img = RgbImage::from_pixel(40, 10, image::Rgb([1, 2, 3]));
        let out = fit_to(&img, 8, 8);
        assert_eq!(out.dimensions(), (8, 8));
        assert_eq!(out.get_pixel(3, 3), &image::Rgb([1, 2, 3]));
        let tall = RgbImage::from_pixel(7, 31, image::Rgb([5, 5, 5]));
        assert_eq!(fit_to(&tall, 16, 12).dimensions(), (16, 12));
    }
}
