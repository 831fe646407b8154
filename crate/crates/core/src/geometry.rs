//! Altitude-adjusted crop planning and bicubic upscaling of drone crops.
//!
//! A crop edge scales inversely with altitude so every crop covers the same
//! patch of land: `edge = round(base_edge * reference_altitude / altitude)`.

use image::imageops::{self, FilterType};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::RgbImage;

/// Smallest crop edge ever planned.
pub const MIN_EDGE_PX: u32 = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CropConfig {
    pub base_edge_px: u32,
    pub reference_altitude_m: f64,
    pub target_edge_px: u32,
    pub n_random_crops: usize,
    pub rng_seed: u64,
}

impl Default for CropConfig {
    fn default() -> Self {
        Self {
            base_edge_px: 256,
            reference_altitude_m: 6.0,
            target_edge_px: 2048,
            n_random_crops: 50,
            rng_seed: 0,
        }
    }
}

impl CropConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_edge_px == 0 {
            return Err(Error::Config("base_edge_px must be > 0".into()));
        }
        if self.target_edge_px == 0 || self.target_edge_px % 8 != 0 {
            return Err(Error::Config(format!(
                "target_edge_px must be a positive multiple of 8, got {}",
                self.target_edge_px
            )));
        }
        if !(self.reference_altitude_m > 0.0) {
            return Err(Error::Config("reference_altitude_m must be > 0".into()));
        }
        Ok(())
    }
}

/// Square window in source-image pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CropWindow {
    pub x0: u32,
    pub y0: u32,
    pub edge: u32,
}

impl CropWindow {
    pub fn fits(&self, width: u32, height: u32) -> bool {
        self.x0 as u64 + self.edge as u64 <= width as u64 && self.y0 as u64 + self.edge as u64 <= height as u64
    }
}

pub fn crop_edge_for_altitude(altitude_m: f64, config: &CropConfig) -> Result<u32> {
    if !(altitude_m > 0.0) || !altitude_m.is_finite() {
        return Err(Error::Domain(format!("altitude must be > 0, got {altitude_m}")));
    }
    let raw = config.base_edge_px as f64 * config.reference_altitude_m / altitude_m;
    let edge = raw.round_ties_even();
    Ok(if edge > u32::MAX as f64 {
        u32::MAX
    } else {
        (edge as u32).max(MIN_EDGE_PX)
    })
}

fn checked_edge(image_size: (u32, u32), altitude_m: f64, config: &CropConfig) -> Result<u32> {
    let edge = crop_edge_for_altitude(altitude_m, config)?;
    let (width, height) = image_size;
    if edge > width.min(height) {
        return Err(Error::CropTooLarge { edge, width, height });
    }
    Ok(edge)
}

/// `config.n_random_crops` windows with top-left corners uniform over all
/// valid positions. Deterministic in `config.rng_seed`.
pub fn plan_random_crops(image_size: (u32, u32), altitude_m: f64, config: &CropConfig) -> Result<Vec<CropWindow>> {
    let edge = checked_edge(image_size, altitude_m, config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let (w, h) = image_size;
    Ok((0..config.n_random_crops)
        .map(|_| CropWindow {
            x0: rng.random_range(0..=w - edge),
            y0: rng.random_range(0..=h - edge),
            edge,
        })
        .collect())
}

/// Non-overlapping grid of edge-sized tiles in row-major order; a trailing
/// strip narrower than one edge is dropped.
pub fn plan_checkerboard_crops(
    image_size: (u32, u32),
    altitude_m: f64,
    config: &CropConfig,
) -> Result<Vec<CropWindow>> {
    let edge = checked_edge(image_size, altitude_m, config)?;
    let (w, h) = image_size;
    let (cols, rows) = (w / edge, h / edge);
    let mut out = Vec::with_capacity((cols * rows) as usize);
    for r in 0..rows {
        for c in 0..cols {
            out.push(CropWindow {
                x0: c * edge,
                y0: r * edge,
                edge,
            });
        }
    }
    Ok(out)
}

/// Cut `window` out of `image` and resample it to `target_edge_px` squared
/// with a Catmull-Rom bicubic kernel; output is clamped to [0, 255].
pub fn upscale_crop(image: &RgbImage, window: CropWindow, target_edge_px: u32) -> Result<RgbImage> {
    if window.edge == 0 || !window.fits(image.width(), image.height()) {
        return Err(Error::Domain(format!(
            "window {window:?} outside {}x{} image",
            image.width(),
            image.height()
        )));
    }
    if target_edge_px == 0 {
        return Err(Error::Domain("target edge must be > 0".into()));
    }
    let view = imageops::crop_imm(image, window.x0, window.y0, window.edge, window.edge);
    Ok(imageops::resize(&*view, target_edge_px, target_edge_px, FilterType::CatmullRom))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::Rgb;
    use proptest::prelude::*;

    #[test]
    fn worked_examples() {
        let cfg = CropConfig::default();
        assert_eq!(crop_edge_for_altitude(12.0, &cfg).unwrap(), 128);
        assert_eq!(crop_edge_for_altitude(6.0, &cfg).unwrap(), 256);
        assert_eq!(crop_edge_for_altitude(3.0, &cfg).unwrap(), 512);
        assert_eq!(crop_edge_for_altitude(8.0, &cfg).unwrap(), 192);
    }

    #[test]
    fn rounding_and_floor() {
        let cfg = CropConfig {
            base_edge_px: 5,
            reference_altitude_m: 1.0,
            ..Default::default()
        };
        // 5 / 2 = 2.5 rounds to even, then floors at 8.
        assert_eq!(crop_edge_for_altitude(2.0, &cfg).unwrap(), MIN_EDGE_PX);
        let cfg = CropConfig {
            base_edge_px: 25,
            reference_altitude_m: 1.0,
            ..Default::default()
        };
        assert_eq!(crop_edge_for_altitude(2.0, &cfg).unwrap(), 12); // 12.5 -> 12
        let cfg = CropConfig {
            base_edge_px: 27,
            reference_altitude_m: 1.0,
            ..Default::default()
        };
        assert_eq!(crop_edge_for_altitude(2.0, &cfg).unwrap(), 14); // 13.5 -> 14
        assert!(crop_edge_for_altitude(0.0, &cfg).is_err());
        assert!(crop_edge_for_altitude(-3.0, &cfg).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(CropConfig::default().validate().is_ok());
        let bad = CropConfig {
            target_edge_px: 100,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn random_plan() {
        let cfg = CropConfig::default();
        let a = plan_random_crops((5472, 3648), 8.0, &cfg).unwrap();
        assert_eq!(a.len(), 50);
        assert!(a.iter().all(|w| w.edge == 192 && w.fits(5472, 3648)));
        assert_eq!(a, plan_random_crops((5472, 3648), 8.0, &cfg).unwrap());
        let err = plan_random_crops((100, 100), 0.1, &cfg).unwrap_err();
        assert!(err.to_string().contains("crop edge exceeds image"), "{err}");
    }

    #[test]
    fn checkerboard_plan() {
        let cfg = CropConfig::default();
        let tiles = plan_checkerboard_crops((5472, 3648), 8.0, &cfg).unwrap();
        assert_eq!(tiles.len(), (5472 / 192) * (3648 / 192));
        assert_eq!(tiles.len(), 532);
        assert_eq!(tiles[1], CropWindow { x0: 192, y0: 0, edge: 192 });
        assert_eq!(tiles[28], CropWindow { x0: 0, y0: 192, edge: 192 });

        let column = plan_checkerboard_crops((256, 1000), 6.0, &cfg).unwrap();
        assert_eq!(column.len(), 3);
        assert!(column.iter().all(|w| w.x0 == 0));
    }

    #[test]
    fn checkerboard_count_across_altitudes() {
        let cfg = CropConfig::default();
        let count = |alt: f64| plan_checkerboard_crops((5472, 3648), alt, &cfg).unwrap().len();
        for alt in [6.0, 7.0, 8.0, 9.0, 10.0, 10.8] {
            let n = count(alt);
            assert!((250..=1000).contains(&n), "{alt} m -> {n}");
        }
        // Higher flights tile finer than the nominal 1000 upper bound.
        assert_eq!(count(12.0), 42 * 28);
    }

    #[test]
    fn constant_crop_stays_constant() {
        let img = RgbImage::from_pixel(40, 30, Rgb([90, 140, 20]));
        let out = upscale_crop(&img, CropWindow { x0: 5, y0: 3, edge: 16 }, 64).unwrap();
        assert_eq!(out.dimensions(), (64, 64));
        assert!(out.pixels().all(|p| *p == Rgb([90, 140, 20])));
    }

    #[test]
    fn window_out_of_bounds_rejected() {
        let img = RgbImage::new(10, 10);
        assert!(upscale_crop(&img, CropWindow { x0: 5, y0: 0, edge: 8 }, 16).is_err());
    }

    proptest! {
        #[test]
        fn edge_monotone_in_altitude(a in 0.5f64..50.0, b in 0.5f64..50.0) {
            let cfg = CropConfig::default();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(crop_edge_for_altitude(lo, &cfg).unwrap() >= crop_edge_for_altitude(hi, &cfg).unwrap());
        }

        #[test]
        fn footprint_constant_within_rounding(alt in 3.0f64..15.0) {
            let cfg = CropConfig::default();
            let edge = crop_edge_for_altitude(alt, &cfg).unwrap() as f64;
            let reference = cfg.base_edge_px as f64 * cfg.reference_altitude_m;
            prop_assert!((edge * alt - reference).abs() <= 0.5 * alt + 1e-9);
        }

        #[test]
        fn planned_windows_in_bounds(w in 64u32..600, h in 64u32..600, alt in 4.0f64..30.0, seed in 0u64..1000) {
            let cfg = CropConfig { base_edge_px: 64, rng_seed: seed, n_random_crops: 20, ..Default::default() };
            if let Ok(plan) = plan_random_crops((w, h), alt, &cfg) {
                prop_assert!(plan.iter().all(|c| c.fits(w, h)));
            }
            if let Ok(plan) = plan_checkerboard_crops((w, h), alt, &cfg) {
                prop_assert!(plan.iter().all(|c| c.fits(w, h)));
            }
        }
    }
}
