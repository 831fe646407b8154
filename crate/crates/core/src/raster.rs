//! Raster helpers shared by every stage: PNG I/O, resampling, flips and
//! conversion between 8-bit RGB images and `(N, 3, H, W)` tensors.

use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use image::imageops::{self, FilterType};
pub use image::{Rgb, RgbImage};

use crate::error::{Error, Result};

/// How 8-bit pixel values map to network inputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PixelScale {
    /// `v / 127.5 - 1`, range [-1, 1]. Used by the translation network.
    Symmetric,
    /// `(v / 255 - 0.5) / 0.25`. Used by the regressor.
    Standardized,
}

impl PixelScale {
    fn forward(self, v: u8) -> f64 {
        let v = v as f64;
        match self {
            PixelScale::Symmetric => v / 127.5 - 1.0,
            PixelScale::Standardized => (v / 255.0 - 0.5) / 0.25,
        }
    }

    fn inverse(self, x: f64) -> f64 {
        match self {
            PixelScale::Symmetric => (x + 1.0) * 127.5,
            PixelScale::Standardized => (x * 0.25 + 0.5) * 255.0,
        }
    }
}

pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(img.to_rgb8())
}

pub fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

/// All `.png` files directly inside `dir`, sorted by file name.
pub fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_png = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if is_png && path.is_file() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// ITU-R 601 luma, row-major, unrounded.
pub fn luma(img: &RgbImage) -> Vec<f64> {
    img.pixels()
        .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
        .collect()
}

/// Resample to `width` x `height`. Downscaling uses a triangle filter whose
/// support grows with the scale factor, so it averages rather than aliases.
pub fn resize(img: &RgbImage, width: u32, height: u32) -> RgbImage {
    if img.width() == width && img.height() == height {
        return img.clone();
    }
    imageops::resize(img, width, height, FilterType::Triangle)
}

pub fn gaussian_blur(img: &RgbImage, sigma: f32) -> RgbImage {
    if sigma <= 0.0 {
        return img.clone();
    }
    imageops::blur(img, sigma)
}

pub fn flip(img: &RgbImage, horizontal: bool, vertical: bool) -> RgbImage {
    let mut out = if horizontal {
        imageops::flip_horizontal(img)
    } else {
        img.clone()
    };
    if vertical {
        imageops::flip_vertical_in_place(&mut out);
    }
    out
}

/// Square crop of `edge` pixels at `(x0, y0)`.
pub fn crop(img: &RgbImage, x0: u32, y0: u32, edge: u32) -> RgbImage {
    imageops::crop_imm(img, x0, y0, edge, edge).to_image()
}

/// Stack images of identical size into an `(N, 3, H, W)` tensor.
pub fn to_tensor(
    images: &[&RgbImage],
    scale: PixelScale,
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    let Some(first) = images.first() else {
        return Err(Error::Shape("empty image batch".into()));
    };
    let (w, h) = first.dimensions();
    let plane = (w * h) as usize;
    let mut data = vec![0f64; images.len() * 3 * plane];
    for (n, img) in images.iter().enumerate() {
        if img.dimensions() != (w, h) {
            return Err(Error::Shape(format!(
                "image {n} is {:?}, batch expects {:?}",
                img.dimensions(),
                (w, h)
            )));
        }
        let base = n * 3 * plane;
        for (i, p) in img.pixels().enumerate() {
            for c in 0..3 {
                data[base + c * plane + i] = scale.forward(p[c]);
            }
        }
    }
    let t = Tensor::from_vec(data, (images.len(), 3, h as usize, w as usize), device)?;
    Ok(t.to_dtype(dtype)?)
}

/// Inverse of [`to_tensor`] for one `(3, H, W)` tensor; values are rounded and
/// clamped to [0, 255].
pub fn from_tensor(t: &Tensor, scale: PixelScale) -> Result<RgbImage> {
    let (c, h, w) = t.dims3()?;
    if c != 3 {
        return Err(Error::Shape(format!("expected 3 channels, got {c}")));
    }
    let data = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    let plane = h * w;
    let mut img = RgbImage::new(w as u32, h as u32);
    for (i, p) in img.pixels_mut().enumerate() {
        for ch in 0..3 {
            let v = scale.inverse(data[ch * plane + i]).round().clamp(0.0, 255.0);
            p[ch] = v as u8;
        }
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_round_trip_is_exact() {
        let mut img = RgbImage::new(5, 3);
        for (i, p) in img.pixels_mut().enumerate() {
            *p = Rgb([(i * 17 % 256) as u8, (i * 29 % 256) as u8, (255 - i) as u8]);
        }
        for scale in [PixelScale::Symmetric, PixelScale::Standardized] {
            let t = to_tensor(&[&img], scale, DType::F32, &Device::Cpu).unwrap();
            assert_eq!(t.dims(), &[1, 3, 3, 5]);
            let back = from_tensor(&t.get(0).unwrap(), scale).unwrap();
            assert_eq!(back, img);
        }
    }

    #[test]
    fn mixed_sizes_rejected() {
        let a = RgbImage::new(4, 4);
        let b = RgbImage::new(4, 5);
        assert!(to_tensor(&[&a, &b], PixelScale::Symmetric, DType::F32, &Device::Cpu).is_err());
    }

    #[test]
    fn luma_weights() {
        let img = RgbImage::from_pixel(1, 1, Rgb([100, 200, 50]));
        let y = luma(&img)[0];
        assert!((y - (29.9 + 117.4 + 5.7)).abs() < 1e-12);
    }
}
