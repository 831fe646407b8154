//! Deterministic synthetic canopy images with analytically known labels.
//!
//! Every image is a soil background covered by discs ("blobs") of flat class
//! colours plus bounded per-pixel noise. The label is a function of the class
//! map only, and the class map is recoverable from the pixels by nearest-colour
//! classification because the noise is smaller than half the palette spacing:
//!
//! * composition: pixel fraction of each class among vegetation pixels;
//! * herbage mass: `300 + 2600 * v` kg DM/ha with `v` the vegetation fraction;
//! * height: `min(15, 1 + 250 * s / sqrt(w * h))` cm, where the blob scale `s`
//!   is vegetation pixels divided by boundary pixels (vegetation pixels with a
//!   4-neighbour of soil).
//!
//! Drone images come from the same process, rendered at a pixel scale set by
//! the drone altitude, then blurred and colour-shifted.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{BiomassLabel, Domain, ImageRecord, Manifest, SchemaName, TaskSchema};
use crate::elevation::{FixturePoint, FixtureTable};
use crate::error::{Error, Result};
use crate::raster::{self, Rgb, RgbImage};

pub const MASS_INTERCEPT: f64 = 300.0;
pub const MASS_SLOPE: f64 = 2600.0;
pub const HEIGHT_INTERCEPT: f64 = 1.0;
pub const HEIGHT_SLOPE: f64 = 250.0;
pub const HEIGHT_MAX: f64 = 15.0;

const SOIL: [u8; 3] = [115, 85, 55];
const GRASS: [u8; 3] = [55, 135, 40];
const CLOVER: [u8; 3] = [150, 205, 115];
const RED_CLOVER: [u8; 3] = [175, 80, 120];
const WEEDS: [u8; 3] = [205, 185, 60];

/// Flat colours for soil and each composition class.
#[derive(Clone, Debug, PartialEq)]
pub struct Palette {
    pub soil: [u8; 3],
    pub classes: Vec<[u8; 3]>,
}

impl Palette {
    pub fn for_schema(schema: &TaskSchema) -> Self {
        let classes = match schema.name {
            SchemaName::Irish => vec![GRASS, CLOVER, WEEDS],
            SchemaName::Grassclover => vec![GRASS, CLOVER, RED_CLOVER, WEEDS],
        };
        Self {
            soil: SOIL,
            classes,
        }
    }

    fn colour(&self, code: u8) -> [u8; 3] {
        if code == 0 {
            self.soil
        } else {
            self.classes[code as usize - 1]
        }
    }
}

/// Rendering parameters for one canopy image.
#[derive(Clone, Debug)]
pub struct CanopyParams {
    /// Target vegetation pixel fraction.
    pub coverage: f64,
    /// Mean blob radius in pixels; individual blobs vary by ±30 %.
    pub radius_px: f64,
    /// Relative frequency of each composition class among blobs.
    pub class_weights: Vec<f64>,
    /// Per-channel uniform noise amplitude.
    pub noise: u8,
    /// Low-frequency modulation of blob density, `None` for uniform.
    pub density_field: Option<DensityField>,
}

#[derive(Clone, Copy, Debug)]
pub struct DensityField {
    pub freq: (f64, f64),
    pub phase: (f64, f64),
}

impl DensityField {
    fn at(&self, u: f64, v: f64) -> f64 {
        0.5 + 0.5 * (2.0 * PI * self.freq.0 * u + self.phase.0).sin() * (2.0 * PI * self.freq.1 * v + self.phase.1).sin()
    }
}

/// Render a canopy. Returns the image and its class map (0 = soil, `c + 1` =
/// composition class `c`).
pub fn render_canopy(
    rng: &mut impl Rng,
    width: u32,
    height: u32,
    params: &CanopyParams,
    palette: &Palette,
) -> (RgbImage, Vec<u8>) {
    let (w, h) = (width as i64, height as i64);
    let area = (w * h) as f64;
    let mut map = vec![0u8; (w * h) as usize];
    let total_weight: f64 = params.class_weights.iter().sum();
    let mut veg = 0usize;
    let target = (params.coverage * area).ceil() as usize;
    let blob_area = PI * params.radius_px.max(0.5).powi(2);
    let max_attempts = 50 * ((area / blob_area) as usize + 1) + 1000;

    let mut attempts = 0;
    while (veg < target || veg == 0) && attempts < max_attempts {
        attempts += 1;
        let cx = rng.random::<f64>() * w as f64;
        let cy = rng.random::<f64>() * h as f64;
        let r = params.radius_px * rng.random_range(0.7..1.3);
        let mut pick = rng.random::<f64>() * total_weight;
        let accept = rng.random::<f64>();
        if let Some(field) = &params.density_field {
            if accept > field.at(cx / w as f64, cy / h as f64) {
                continue;
            }
        }
        let mut class = params.class_weights.len() - 1;
        for (i, &cw) in params.class_weights.iter().enumerate() {
            if pick < cw {
                class = i;
                break;
            }
            pick -= cw;
        }
        let code = class as u8 + 1;
        let r2 = r * r;
        let y_lo = ((cy - r).floor() as i64).max(0);
        let y_hi = ((cy + r).ceil() as i64).min(h - 1);
        let x_lo = ((cx - r).floor() as i64).max(0);
        let x_hi = ((cx + r).ceil() as i64).min(w - 1);
        for y in y_lo..=y_hi {
            let dy = y as f64 + 0.5 - cy;
            for x in x_lo..=x_hi {
                let dx = x as f64 + 0.5 - cx;
                if dx * dx + dy * dy <= r2 {
                    let cell = &mut map[(y * w + x) as usize];
                    if *cell == 0 {
                        veg += 1;
                    }
                    *cell = code;
                }
            }
        }
    }
    if veg == 0 {
        // Degenerate tiny image: force a single vegetation pixel.
        map[0] = 1;
    }

    let n = params.noise as i32;
    let mut img = RgbImage::new(width, height);
    for (p, &code) in img.pixels_mut().zip(&map) {
        let base = palette.colour(code);
        let mut px = [0u8; 3];
        for c in 0..3 {
            let jitter = if n > 0 { rng.random_range(-n..=n) } else { 0 };
            px[c] = (base[c] as i32 + jitter).clamp(0, 255) as u8;
        }
        *p = Rgb(px);
    }
    (img, map)
}

/// Nearest-palette classification of every pixel (ties go to the lower code).
pub fn classify_pixels(img: &RgbImage, palette: &Palette) -> Vec<u8> {
    let mut colours = vec![palette.soil];
    colours.extend(palette.classes.iter().copied());
    img.pixels()
        .map(|p| {
            let mut best = 0u8;
            let mut best_d = i32::MAX;
            for (code, col) in colours.iter().enumerate() {
                let d: i32 = (0..3).map(|c| (p[c] as i32 - col[c] as i32).pow(2)).sum();
                if d < best_d {
                    best_d = d;
                    best = code as u8;
                }
            }
            best
        })
        .collect()
}

/// The analytic labelling rule applied to a class map.
pub fn label_from_class_map(map: &[u8], width: u32, height: u32, schema: &TaskSchema) -> BiomassLabel {
    let (w, h) = (width as usize, height as usize);
    let k = schema.n_classes();
    let mut counts = vec![0usize; k];
    let mut boundary = 0usize;
    for y in 0..h {
        for x in 0..w {
            let code = map[y * w + x];
            if code == 0 {
                continue;
            }
            counts[code as usize - 1] += 1;
            let soil_neighbour = (x > 0 && map[y * w + x - 1] == 0)
                || (x + 1 < w && map[y * w + x + 1] == 0)
                || (y > 0 && map[(y - 1) * w + x] == 0)
                || (y + 1 < h && map[(y + 1) * w + x] == 0);
            if soil_neighbour {
                boundary += 1;
            }
        }
    }
    let veg: usize = counts.iter().sum();
    let veg_frac = veg as f64 / (w * h) as f64;
    let composition = if veg > 0 {
        Some(counts.iter().map(|&c| c as f64 / veg as f64).collect())
    } else {
        None
    };
    let blob_scale = veg as f64 / boundary.max(1) as f64;
    let height_cm = (HEIGHT_INTERCEPT + HEIGHT_SLOPE * blob_scale / ((w * h) as f64).sqrt()).min(HEIGHT_MAX);
    BiomassLabel {
        composition,
        herbage_mass: Some(MASS_INTERCEPT + MASS_SLOPE * veg_frac),
        height: Some(height_cm),
    }
}

/// Recover the label of a clean synthetic render from its pixels.
pub fn label_from_pixels(img: &RgbImage, schema: &TaskSchema) -> BiomassLabel {
    let map = classify_pixels(img, &Palette::for_schema(schema));
    label_from_class_map(&map, img.width(), img.height(), schema)
}

/// Fixed blur plus colour transform that turns a clean render into the drone
/// domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DroneShift {
    pub blur_sigma: f32,
    /// Row-major 3x3 channel mixing matrix.
    pub mix: [[f64; 3]; 3],
    /// Contrast around mid-grey applied after mixing.
    pub contrast: f64,
    pub offset: [f64; 3],
}

impl Default for DroneShift {
    fn default() -> Self {
        Self {
            blur_sigma: 1.2,
            mix: [[0.85, 0.05, 0.10], [0.10, 0.80, 0.10], [0.05, 0.20, 0.75]],
            contrast: 0.75,
            offset: [14.0, -4.0, 20.0],
        }
    }
}

impl DroneShift {
    pub fn apply(&self, img: &RgbImage) -> RgbImage {
        let mut out = raster::gaussian_blur(img, self.blur_sigma);
        for p in out.pixels_mut() {
            let v = [p[0] as f64, p[1] as f64, p[2] as f64];
            for c in 0..3 {
                let mixed: f64 = (0..3).map(|k| self.mix[c][k] * v[k]).sum();
                let shifted = 128.0 + self.contrast * (mixed - 128.0) + self.offset[c];
                p[c] = shifted.round().clamp(0.0, 255.0) as u8;
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub schema: SchemaName,
    pub ground_size: u32,
    pub drone_size: u32,
    /// Blob radius as a fraction of the ground-image edge (ground) or of the
    /// altitude-adjusted footprint edge (drone).
    pub blob_radius_frac: (f64, f64),
    pub coverage: (f64, f64),
    pub texture_noise: u8,
    pub drone_shift: DroneShift,
    /// Drone-image pixels spanning one ground-image footprint at the
    /// reference altitude.
    pub footprint_edge_px: u32,
    pub reference_altitude_m: f64,
    pub altitude_range_m: (f64, f64),
    pub gps_origin: (f64, f64),
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            schema: SchemaName::Irish,
            ground_size: 512,
            drone_size: 2048,
            blob_radius_frac: (0.02, 0.08),
            coverage: (0.35, 0.95),
            texture_noise: 10,
            drone_shift: DroneShift::default(),
            footprint_edge_px: 256,
            reference_altitude_m: 6.0,
            altitude_range_m: (6.0, 12.0),
            gps_origin: (52.16, -7.15),
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let (r0, r1) = self.blob_radius_frac;
        let (c0, c1) = self.coverage;
        let (a0, a1) = self.altitude_range_m;
        if self.ground_size == 0 || self.drone_size == 0 || self.footprint_edge_px == 0 {
            return Err(Error::Config("image sizes must be positive".into()));
        }
        if !(0.0 < r0 && r0 <= r1) || !(0.0 < c0 && c0 <= c1 && c1 <= 1.0) {
            return Err(Error::Config("invalid radius or coverage range".into()));
        }
        if !(0.0 < a0 && a0 <= a1 && a1 <= 100.0) || self.reference_altitude_m <= 0.0 {
            return Err(Error::Config("invalid altitude range".into()));
        }
        // Above 20 the worst-case noise vector can cross the bisector between
        // grass and soil, and classification stops being exact.
        if self.texture_noise > 20 {
            return Err(Error::Config("texture_noise must be <= 20".into()));
        }
        Ok(())
    }
}

pub struct SyntheticDataset {
    pub manifest: Manifest,
    pub manifest_path: PathBuf,
    /// Terrain elevation at every drone GPS fix.
    pub elevation_fixture: FixtureTable,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn class_weights(rng: &mut impl Rng, k: usize) -> Vec<f64> {
    let mut w = Vec::with_capacity(k);
    w.push(rng.random_range(0.3..1.0));
    for _ in 1..k {
        w.push(rng.random_range(0.0..0.5));
    }
    w
}

fn round_to(v: f64, decimals: i32) -> f64 {
    let s = 10f64.powi(decimals);
    (v * s).round() / s
}

/// Render `n_ground` labelled ground images and `n_drone` drone images into
/// `out_dir`, writing `manifest.json` and `elevation_fixture.json` alongside.
pub fn generate_synthetic_dataset(
    out_dir: &Path,
    seed: u64,
    n_ground: usize,
    n_drone: usize,
    config: &SyntheticConfig,
) -> Result<SyntheticDataset> {
    if n_ground == 0 || n_drone == 0 {
        return Err(Error::Config("n_ground and n_drone must be > 0".into()));
    }
    config.validate()?;
    let schema = TaskSchema::from_name(config.schema);
    let palette = Palette::for_schema(&schema);
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut records = Vec::with_capacity(n_ground + n_drone);
    for i in 0..n_ground {
        let mut rng = stream_rng(seed, i as u64);
        let size = config.ground_size;
        let params = CanopyParams {
            coverage: rng.random_range(config.coverage.0..=config.coverage.1),
            radius_px: rng.random_range(config.blob_radius_frac.0..=config.blob_radius_frac.1) * size as f64,
            class_weights: class_weights(&mut rng, schema.n_classes()),
            noise: config.texture_noise,
            density_field: None,
        };
        let (img, map) = render_canopy(&mut rng, size, size, &params, &palette);
        let label = label_from_class_map(&map, size, size, &schema);
        let rel = PathBuf::from(format!("ground/g{i:04}.png"));
        raster::save_png(&img, &out_dir.join(&rel))?;
        records.push(ImageRecord {
            id: format!("g{i:04}"),
            path: rel,
            domain: Domain::Ground,
            altitude_m: None,
            altitude_asl_m: None,
            gps: None,
            label: Some(label),
        });
    }

    let mut fixture = FixtureTable::default();
    for i in 0..n_drone {
        let mut rng = stream_rng(seed, (1 << 32) | i as u64);
        let altitude = round_to(
            rng.random_range(config.altitude_range_m.0..=config.altitude_range_m.1),
            2,
        );
        let footprint = config.footprint_edge_px as f64 * config.reference_altitude_m / altitude;
        let params = CanopyParams {
            coverage: rng.random_range(config.coverage.0..=config.coverage.1),
            radius_px: rng.random_range(config.blob_radius_frac.0..=config.blob_radius_frac.1) * footprint,
            class_weights: class_weights(&mut rng, schema.n_classes()),
            noise: config.texture_noise,
            density_field: Some(DensityField {
                freq: (rng.random_range(0.5..2.0), rng.random_range(0.5..2.0)),
                phase: (rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI)),
            }),
        };
        let size = config.drone_size;
        let (clean, map) = render_canopy(&mut rng, size, size, &params, &palette);
        let img = config.drone_shift.apply(&clean);
        let full = label_from_class_map(&map, size, size, &schema);
        let lat = round_to(config.gps_origin.0 + rng.random_range(-0.01..0.01), 5);
        let lon = round_to(config.gps_origin.1 + rng.random_range(-0.01..0.01), 5);
        let terrain = round_to(rng.random_range(20.0..120.0), 2);
        fixture.points.push(FixturePoint {
            lat,
            lon,
            elevation: terrain,
        });
        let rel = PathBuf::from(format!("drone/d{i:04}.png"));
        raster::save_png(&img, &out_dir.join(&rel))?;
        records.push(ImageRecord {
            id: format!("d{i:04}"),
            path: rel,
            domain: Domain::Drone,
            altitude_m: Some(altitude),
            altitude_asl_m: Some(round_to(terrain + altitude, 2)),
            gps: Some((lat, lon)),
            label: Some(BiomassLabel {
                composition: None,
                herbage_mass: full.herbage_mass,
                height: None,
            }),
        });
    }

    let mut manifest = Manifest::new(schema, records);
    manifest.validate()?;
    manifest.base_dir = out_dir.to_path_buf();
    let manifest_path = out_dir.join("manifest.json");
    manifest.save(&manifest_path)?;
    fixture.save(&out_dir.join("elevation_fixture.json"))?;
    Ok(SyntheticDataset {
        manifest,
        manifest_path,
        elevation_fixture: fixture,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> SyntheticConfig {
        SyntheticConfig {
            ground_size: 48,
            drone_size: 96,
            footprint_edge_px: 24,
            ..Default::default()
        }
    }

    #[test]
    fn noise_never_changes_classification() {
        let schema = TaskSchema::grassclover();
        let palette = Palette::for_schema(&schema);
        let params = CanopyParams {
            coverage: 0.7,
            radius_px: 3.0,
            class_weights: vec![0.4, 0.2, 0.2, 0.2],
            noise: 20,
            density_field: None,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (img, map) = render_canopy(&mut rng, 40, 40, &params, &palette);
        assert_eq!(classify_pixels(&img, &palette), map);
    }

    #[test]
    fn coverage_target_reached() {
        let schema = TaskSchema::irish();
        let palette = Palette::for_schema(&schema);
        let params = CanopyParams {
            coverage: 0.6,
            radius_px: 2.5,
            class_weights: vec![1.0, 0.3, 0.1],
            noise: 0,
            density_field: None,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (_, map) = render_canopy(&mut rng, 64, 64, &params, &palette);
        let veg = map.iter().filter(|&&c| c != 0).count() as f64 / map.len() as f64;
        assert!(veg >= 0.6, "{veg}");
    }

    #[test]
    fn dataset_is_deterministic_and_labels_recoverable() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let cfg = small_config();
        let da = generate_synthetic_dataset(a.path(), 7, 10, 4, &cfg).unwrap();
        generate_synthetic_dataset(b.path(), 7, 10, 4, &cfg).unwrap();
        assert_eq!(da.manifest.records.len(), 14);
        for name in ["manifest.json", "elevation_fixture.json", "ground/g0003.png", "drone/d0002.png"] {
            let x = std::fs::read(a.path().join(name)).unwrap();
            let y = std::fs::read(b.path().join(name)).unwrap();
            assert_eq!(x, y, "{name} differs between runs");
        }
        let schema = TaskSchema::irish();
        for rec in da.manifest.by_domain(Domain::Ground) {
            let label = rec.label.as_ref().unwrap();
            let comp = label.composition.as_ref().unwrap();
            assert!((comp.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let img = raster::load_rgb(&da.manifest.resolve(rec)).unwrap();
            let again = label_from_pixels(&img, &schema);
            assert_eq!(&again, label);
        }
        for rec in da.manifest.by_domain(Domain::Drone) {
            let alt = rec.altitude_m.unwrap();
            assert!((6.0..=12.0).contains(&alt));
        }
    }

    #[test]
    fn zero_counts_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(generate_synthetic_dataset(dir.path(), 1, 0, 1, &small_config()).is_err());
    }
}
