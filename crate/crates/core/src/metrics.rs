//! Evaluation quantities: herbage-mass RMSE per species (HRMSE), relative
//! error (HRE), height error (HE), composition RMSE, Laplacian-variance
//! sharpness, per-channel histogram distance, and per-image aggregation of
//! crop predictions.

use serde::{Deserialize, Serialize};

use crate::cut::CUTModel;
use crate::data_model::{BiomassLabel, Domain, Manifest, TaskSchema};
use crate::error::{Error, Result};
use crate::geometry::{plan_checkerboard_crops, plan_random_crops, upscale_crop, CropConfig};
use crate::raster::{self, RgbImage};
use crate::regressor::RegressorModel;

/// Herbage mass split by species; clover is total clover.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeciesMass {
    pub total: f64,
    pub grass: f64,
    pub clover: f64,
    pub weeds: f64,
}

impl SpeciesMass {
    fn components(&self) -> [f64; 4] {
        [self.total, self.grass, self.clover, self.weeds]
    }
}

/// `total * fraction` for grass, clover and weeds.
pub fn per_species_mass(label: &BiomassLabel, schema: &TaskSchema) -> Result<SpeciesMass> {
    let total = label
        .herbage_mass
        .ok_or_else(|| Error::Domain("label has no herbage mass".into()))?;
    let comp = label
        .composition
        .as_ref()
        .ok_or_else(|| Error::Domain("label has no composition".into()))?;
    let frac = |name: &str| {
        schema
            .class_index(name)
            .map(|i| comp[i])
            .ok_or_else(|| Error::Domain(format!("schema has no `{name}` class")))
    };
    let clover = label
        .total_clover(schema)
        .ok_or_else(|| Error::Domain("schema has no clover class".into()))?;
    Ok(SpeciesMass {
        total,
        grass: total * frac("grass")?,
        clover: total * clover,
        weeds: total * frac("weeds")?,
    })
}

pub fn rmse(preds: &[f64], gts: &[f64]) -> Result<f64> {
    if preds.len() != gts.len() || preds.is_empty() {
        return Err(Error::Shape(format!(
            "rmse needs equal non-empty inputs, got {} and {}",
            preds.len(),
            gts.len()
        )));
    }
    let sq: f64 = preds.iter().zip(gts).map(|(p, g)| (p - g) * (p - g)).sum();
    Ok((sq / preds.len() as f64).sqrt())
}

/// HRMSE per component. `avg` is the mean of grass, clover and weeds; the
/// total is not part of it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hrmse {
    pub total: f64,
    pub grass: f64,
    pub clover: f64,
    pub weeds: f64,
    pub avg: f64,
}

fn check_lengths<T>(preds: &[T], gts: &[T]) -> Result<()> {
    if preds.len() != gts.len() || preds.is_empty() {
        return Err(Error::Shape(format!(
            "need equal non-empty prediction and ground-truth lists, got {} and {}",
            preds.len(),
            gts.len()
        )));
    }
    Ok(())
}

pub fn hrmse(preds: &[BiomassLabel], gts: &[BiomassLabel], schema: &TaskSchema) -> Result<Hrmse> {
    check_lengths(preds, gts)?;
    let mut sq = [0.0f64; 4];
    for (p, g) in preds.iter().zip(gts) {
        let (p, g) = (per_species_mass(p, schema)?, per_species_mass(g, schema)?);
        for (acc, (a, b)) in sq.iter_mut().zip(p.components().iter().zip(g.components())) {
            *acc += (a - b) * (a - b);
        }
    }
    let n = preds.len() as f64;
    let [total, grass, clover, weeds] = sq.map(|s| (s / n).sqrt());
    Ok(Hrmse {
        total,
        grass,
        clover,
        weeds,
        avg: (grass + clover + weeds) / 3.0,
    })
}

/// `pred / gt` for one image.
pub fn hre(pred_mass: f64, gt_mass: f64) -> Result<f64> {
    if !(gt_mass > 0.0) {
        return Err(Error::Domain(format!("ground-truth mass must be > 0, got {gt_mass}")));
    }
    Ok(pred_mass / gt_mass)
}

/// Mean of per-image ratios.
pub fn hre_batch(preds: &[f64], gts: &[f64]) -> Result<f64> {
    check_lengths(preds, gts)?;
    let mut sum = 0.0;
    for (p, g) in preds.iter().zip(gts) {
        sum += hre(*p, *g)?;
    }
    Ok(sum / preds.len() as f64)
}

/// RMSE of herbage height in cm.
pub fn height_error(preds: &[BiomassLabel], gts: &[BiomassLabel]) -> Result<f64> {
    check_lengths(preds, gts)?;
    let get = |l: &BiomassLabel| l.height.ok_or_else(|| Error::Domain("label has no height".into()));
    let p: Vec<f64> = preds.iter().map(get).collect::<Result<_>>()?;
    let g: Vec<f64> = gts.iter().map(get).collect::<Result<_>>()?;
    rmse(&p, &g)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassRmse {
    pub class: String,
    pub rmse: f64,
}

/// Composition RMSE in percentage points.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompositionRmse {
    pub per_class: Vec<ClassRmse>,
    /// White plus red clover, for schemas that split clover.
    pub total_clover: Option<f64>,
    /// Mean over `per_class`.
    pub avg: f64,
}

pub fn composition_rmse(preds: &[BiomassLabel], gts: &[BiomassLabel], schema: &TaskSchema) -> Result<CompositionRmse> {
    check_lengths(preds, gts)?;
    let comp = |l: &BiomassLabel| {
        l.composition
            .clone()
            .ok_or_else(|| Error::Domain("label has no composition".into()))
    };
    let p: Vec<Vec<f64>> = preds.iter().map(comp).collect::<Result<_>>()?;
    let g: Vec<Vec<f64>> = gts.iter().map(comp).collect::<Result<_>>()?;
    let mut per_class = Vec::new();
    for (k, class) in schema.composition_classes.iter().enumerate() {
        let a: Vec<f64> = p.iter().map(|v| 100.0 * v[k]).collect();
        let b: Vec<f64> = g.iter().map(|v| 100.0 * v[k]).collect();
        per_class.push(ClassRmse {
            class: class.clone(),
            rmse: rmse(&a, &b)?,
        });
    }
    let total_clover = if schema.n_classes() > 3 {
        let a: Vec<f64> = preds.iter().filter_map(|l| l.total_clover(schema)).map(|v| 100.0 * v).collect();
        let b: Vec<f64> = gts.iter().filter_map(|l| l.total_clover(schema)).map(|v| 100.0 * v).collect();
        Some(rmse(&a, &b)?)
    } else {
        None
    };
    let avg = per_class.iter().map(|c| c.rmse).sum::<f64>() / per_class.len() as f64;
    Ok(CompositionRmse {
        per_class,
        total_clover,
        avg,
    })
}

/// Variance of the 3x3 Laplacian of ITU-R 601 luma, with mirror padding
/// (edge pixel not repeated) and population variance.
pub fn sharpness(img: &RgbImage) -> f64 {
    let (w, h) = (img.width() as i64, img.height() as i64);
    if w == 0 || h == 0 {
        return 0.0;
    }
    let y = raster::luma(img);
    let reflect = |i: i64, n: i64| -> i64 {
        if n == 1 {
            0
        } else if i < 0 {
            -i
        } else if i >= n {
            2 * n - 2 - i
        } else {
            i
        }
    };
    let at = |x: i64, yy: i64| y[(reflect(yy, h) * w + reflect(x, w)) as usize];
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for r in 0..h {
        for c in 0..w {
            let lap = at(c, r - 1) + at(c, r + 1) + at(c - 1, r) + at(c + 1, r) - 4.0 * at(c, r);
            sum += lap;
            sum_sq += lap * lap;
        }
    }
    let n = (w * h) as f64;
    let mean = sum / n;
    (sum_sq / n - mean * mean).max(0.0)
}

/// Per-channel 256-bin intensity histograms over a set of images.
pub fn channel_histograms(images: &[RgbImage]) -> [[u64; 256]; 3] {
    let mut h = [[0u64; 256]; 3];
    for img in images {
        for p in img.pixels() {
            for c in 0..3 {
                h[c][p[c] as usize] += 1;
            }
        }
    }
    h
}

/// 1-D Wasserstein-1 distance between two intensity histograms, in
/// intensity units: the L1 distance between their CDFs.
pub fn wasserstein_1d(a: &[u64; 256], b: &[u64; 256]) -> f64 {
    let (na, nb) = (a.iter().sum::<u64>() as f64, b.iter().sum::<u64>() as f64);
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let (mut ca, mut cb, mut dist) = (0.0, 0.0, 0.0);
    for k in 0..255 {
        ca += a[k] as f64 / na;
        cb += b[k] as f64 / nb;
        dist += (ca - cb).abs();
    }
    dist
}

/// Mean over RGB channels of the histogram distance between two image sets.
pub fn channel_wasserstein(a: &[RgbImage], b: &[RgbImage]) -> f64 {
    let (ha, hb) = (channel_histograms(a), channel_histograms(b));
    (0..3).map(|c| wasserstein_1d(&ha[c], &hb[c])).sum::<f64>() / 3.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `counts.len() + 1` bin edges.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

/// Image-level summary of per-crop predictions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropAggregate {
    pub n: usize,
    pub mean: f64,
    /// Population standard deviation of the per-crop values.
    pub std: f64,
    pub min: f64,
    pub max: f64,
    pub histogram: Histogram,
}

pub const HISTOGRAM_BINS: usize = 10;

pub fn aggregate_crop_predictions(values: &[f64]) -> Result<CropAggregate> {
    if values.is_empty() {
        return Err(Error::Domain("no crop predictions to aggregate".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let width = (max - min) / HISTOGRAM_BINS as f64;
    let edges: Vec<f64> = (0..=HISTOGRAM_BINS).map(|i| min + width * i as f64).collect();
    let mut counts = vec![0usize; HISTOGRAM_BINS];
    for v in values {
        let bin = if width > 0.0 {
            (((v - min) / width) as usize).min(HISTOGRAM_BINS - 1)
        } else {
            0
        };
        counts[bin] += 1;
    }
    Ok(CropAggregate {
        n: values.len(),
        mean: mean.clamp(min, max),
        std,
        min,
        max,
        histogram: Histogram { edges, counts },
    })
}

/// Anything that maps images to decoded biomass labels.
pub trait Predictor {
    fn schema(&self) -> &TaskSchema;
    fn predict(&self, images: &[RgbImage]) -> Result<Vec<BiomassLabel>>;
}

impl Predictor for RegressorModel {
    fn schema(&self) -> &TaskSchema {
        RegressorModel::schema(self)
    }

    fn predict(&self, images: &[RgbImage]) -> Result<Vec<BiomassLabel>> {
        RegressorModel::predict(self, images)
    }
}

/// Applied to upscaled drone crops before prediction, e.g. a trained
/// translation network.
pub trait CropTransform {
    fn transform(&self, crops: &[RgbImage]) -> Result<Vec<RgbImage>>;
}

impl CropTransform for CUTModel {
    fn transform(&self, crops: &[RgbImage]) -> Result<Vec<RgbImage>> {
        self.apply_translation(crops)
    }
}

/// How the metric values were defined, stored alongside them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conventions {
    pub hrmse_avg: String,
    pub hre_batch: String,
    pub species_mass: String,
    pub composition_units: String,
}

impl Default for Conventions {
    fn default() -> Self {
        Self {
            hrmse_avg: "mean of grass, clover and weeds HRMSE".into(),
            hre_batch: "mean of per-image ratios".into(),
            species_mass: "predicted total mass times predicted fraction".into(),
            composition_units: "percentage points".into(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CropMode {
    Random,
    Checkerboard,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordResult {
    pub id: String,
    pub domain: Domain,
    pub prediction: BiomassLabel,
    pub ground_truth: BiomassLabel,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub hre: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub crops: Option<CropAggregate>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub crop_predictions: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropSampling {
    pub mode: CropMode,
    pub aggregation: String,
    pub crop: CropConfig,
    pub translated: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub n_samples: usize,
    /// Over samples with mass and composition on both sides.
    pub hrmse: Option<Hrmse>,
    /// Total-mass RMSE over every sample with a mass on both sides.
    pub total_hrmse: Option<f64>,
    pub hre: Option<f64>,
    pub height_error: Option<f64>,
    pub composition_rmse: Option<CompositionRmse>,
    pub conventions: Conventions,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub crop_sampling: Option<CropSampling>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub records: Vec<RecordResult>,
}

fn subset<'a>(
    preds: &'a [BiomassLabel],
    gts: &'a [BiomassLabel],
    keep: impl Fn(&BiomassLabel) -> bool,
) -> (Vec<BiomassLabel>, Vec<BiomassLabel>) {
    preds
        .iter()
        .zip(gts)
        .filter(|(p, g)| keep(p) && keep(g))
        .map(|(p, g)| (p.clone(), g.clone()))
        .unzip()
}

/// Every metric the paired labels support. Each metric is computed over the
/// samples that carry the quantities it needs and is `None` if there are none.
pub fn label_metrics(preds: &[BiomassLabel], gts: &[BiomassLabel], schema: &TaskSchema) -> Result<MetricReport> {
    check_lengths(preds, gts)?;
    let (pm, gm) = subset(preds, gts, |l| l.composition.is_some() && l.herbage_mass.is_some());
    let hr = if pm.is_empty() || !schema.has_mass_head {
        None
    } else {
        Some(hrmse(&pm, &gm, schema)?)
    };
    let (pt, gt) = subset(preds, gts, |l| l.herbage_mass.is_some());
    let (total_hrmse, hre_value) = if pt.is_empty() {
        (None, None)
    } else {
        let p: Vec<f64> = pt.iter().filter_map(|l| l.herbage_mass).collect();
        let g: Vec<f64> = gt.iter().filter_map(|l| l.herbage_mass).collect();
        let ratio = if g.iter().all(|v| *v > 0.0) {
            Some(hre_batch(&p, &g)?)
        } else {
            None
        };
        (Some(rmse(&p, &g)?), ratio)
    };
    let (ph, gh) = subset(preds, gts, |l| l.height.is_some());
    let he = if ph.is_empty() { None } else { Some(height_error(&ph, &gh)?) };
    let (pc, gc) = subset(preds, gts, |l| l.composition.is_some());
    let comp = if pc.is_empty() {
        None
    } else {
        Some(composition_rmse(&pc, &gc, schema)?)
    };
    Ok(MetricReport {
        n_samples: preds.len(),
        hrmse: hr,
        total_hrmse,
        hre: hre_value,
        height_error: he,
        composition_rmse: comp,
        conventions: Conventions::default(),
        crop_sampling: None,
        records: Vec::new(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluateOptions {
    pub crop: CropConfig,
    pub mode: CropMode,
    /// Keep at most this many checkerboard tiles, evenly spaced.
    pub max_crops: Option<usize>,
    pub keep_crop_predictions: bool,
}

impl Default for EvaluateOptions {
    fn default() -> Self {
        Self {
            crop: CropConfig::default(),
            mode: CropMode::Random,
            max_crops: None,
            keep_crop_predictions: true,
        }
    }
}

/// Predict every labeled record of `manifest` and score the predictions.
/// Ground records are predicted whole; drone records are cropped by
/// altitude, upscaled, optionally transformed, and their per-crop masses
/// averaged.
pub fn evaluate(
    predictor: &dyn Predictor,
    manifest: &Manifest,
    options: &EvaluateOptions,
    transform: Option<&dyn CropTransform>,
) -> Result<MetricReport> {
    let schema = predictor.schema().clone();
    if schema != manifest.schema {
        return Err(Error::Config(format!(
            "model schema `{}` does not match manifest schema `{}`",
            schema.name, manifest.schema.name
        )));
    }
    options.crop.validate()?;
    let labeled: Vec<_> = manifest.records.iter().enumerate().filter(|(_, r)| r.label.is_some()).collect();
    if labeled.is_empty() {
        return Err(Error::Manifest("no labeled records to evaluate".into()));
    }
    let mut records = Vec::with_capacity(labeled.len());
    let mut any_drone = false;
    for (index, rec) in labeled {
        let img = raster::load_rgb(&manifest.resolve(rec))?;
        let gt = rec.label.clone().unwrap_or_default();
        let result = match rec.domain {
            Domain::Ground => {
                let prediction = predictor.predict(std::slice::from_ref(&img))?.remove(0);
                RecordResult {
                    id: rec.id.clone(),
                    domain: rec.domain,
                    hre: ratio(&prediction, &gt),
                    prediction,
                    ground_truth: gt,
                    crops: None,
                    crop_predictions: Vec::new(),
                }
            }
            Domain::Drone => {
                any_drone = true;
                let altitude = rec
                    .altitude_m
                    .ok_or_else(|| Error::record(&rec.id, "altitude_m", "missing altitude on drone record"))?;
                let size = img.dimensions();
                let crop_config = CropConfig {
                    rng_seed: record_seed(options.crop.rng_seed, index),
                    ..options.crop.clone()
                };
                let mut windows = match options.mode {
                    CropMode::Random => plan_random_crops(size, altitude, &crop_config)?,
                    CropMode::Checkerboard => plan_checkerboard_crops(size, altitude, &crop_config)?,
                };
                if let Some(max) = options.max_crops {
                    if windows.len() > max && max > 0 {
                        let stride = windows.len() as f64 / max as f64;
                        windows = (0..max).map(|i| windows[(i as f64 * stride) as usize]).collect();
                    }
                }
                let crops: Vec<RgbImage> = windows
                    .iter()
                    .map(|w| upscale_crop(&img, *w, options.crop.target_edge_px))
                    .collect::<Result<_>>()?;
                let crops = match transform {
                    Some(t) => t.transform(&crops)?,
                    None => crops,
                };
                let preds = predictor.predict(&crops)?;
                let masses: Vec<f64> = preds
                    .iter()
                    .map(|p| p.herbage_mass.ok_or_else(|| Error::Config("model predicts no herbage mass".into())))
                    .collect::<Result<_>>()?;
                let agg = aggregate_crop_predictions(&masses)?;
                log::info!("{}: {} crops, mean {:.1} kg DM/ha", rec.id, agg.n, agg.mean);
                let prediction = BiomassLabel {
                    composition: None,
                    herbage_mass: Some(agg.mean),
                    height: None,
                };
                RecordResult {
                    id: rec.id.clone(),
                    domain: rec.domain,
                    hre: ratio(&prediction, &gt),
                    prediction,
                    ground_truth: gt,
                    crops: Some(agg),
                    crop_predictions: if options.keep_crop_predictions { masses } else { Vec::new() },
                }
            }
        };
        records.push(result);
    }
    let preds: Vec<BiomassLabel> = records.iter().map(|r| r.prediction.clone()).collect();
    let gts: Vec<BiomassLabel> = records.iter().map(|r| r.ground_truth.clone()).collect();
    let mut report = label_metrics(&preds, &gts, &schema)?;
    report.records = records;
    if any_drone {
        report.crop_sampling = Some(CropSampling {
            mode: options.mode,
            aggregation: "mean".into(),
            crop: options.crop.clone(),
            translated: transform.is_some(),
        });
    }
    Ok(report)
}

/// Random-crop seed of the record at position `index` of a manifest, so images of equal size do not
/// share crop positions.
pub fn record_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_add(index as u64)
}

fn ratio(pred: &BiomassLabel, gt: &BiomassLabel) -> Option<f64> {
    match (pred.herbage_mass, gt.herbage_mass) {
        (Some(p), Some(g)) if g > 0.0 => Some(p / g),
        _ => None,
    }
}
