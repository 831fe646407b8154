use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_core::DType;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{ElevationMode, PipelineConfig};
use super::{
    plots, AnnotateArgs, Cli, Command, CropArgs, DomainArg, EvaluateArgs, ReportArgs, SharpnessArgs, SslTrainArgs,
    SynthDataArgs, TranslateApplyArgs, TranslateTrainArgs,
};
use crate::checkpoint::{read_json, write_json};
use crate::cut::{train_cut, CUTModel, TrainCutOptions};
use crate::data_model::generate_synthetic_dataset;
use crate::data_model::{BiomassLabel, Domain, Manifest, TaskSchema};
use crate::elevation::{annotate_manifest, ElevationSource, FixtureTable, HttpSettings};
use crate::error::{Error, Result};
use crate::geometry::{plan_checkerboard_crops, plan_random_crops, upscale_crop, CropConfig, CropWindow};
use crate::metrics::{self, CropMode, CropTransform, EvaluateOptions, MetricReport};
use crate::raster::{self, RgbImage};
use crate::regressor::RegressorModel;
use crate::ssl::{self, SslData, TrainingReport};

/// What produced an artifact: the stage, its inputs as given on the command
/// line, and the fully merged configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub command: String,
    pub version: String,
    pub inputs: BTreeMap<String, String>,
    pub config: PipelineConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifact<T> {
    pub provenance: Provenance,
    #[serde(flatten)]
    pub body: T,
}

fn provenance(command: &str, config: &PipelineConfig, inputs: &[(&str, &Path)]) -> Provenance {
    Provenance {
        command: command.to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        inputs: inputs
            .iter()
            .map(|(k, p)| (k.to_string(), p.display().to_string()))
            .collect(),
        config: config.clone(),
    }
}

fn provenance_value(p: &Provenance) -> serde_json::Value {
    serde_json::to_value(p).expect("provenance serializes")
}

pub fn execute(cli: Cli) -> Result<()> {
    let config = PipelineConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::SynthData(a) => synth_data(config, a),
        Command::AnnotateAltitude(a) => annotate_altitude(config, a),
        Command::Crop(a) => crop(config, a),
        Command::TranslateTrain(a) => translate_train(config, a),
        Command::TranslateApply(a) => translate_apply(a),
        Command::SslTrain(a) => ssl_train(config, a),
        Command::Evaluate(a) => evaluate(config, a),
        Command::Sharpness(a) => sharpness(a),
        Command::Report(a) => report(a),
    }
}

fn set<T>(target: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *target = v;
    }
}

fn load_all(paths: &[PathBuf]) -> Result<Vec<RgbImage>> {
    paths.iter().map(|p| raster::load_rgb(p)).collect()
}

fn file_name(path: &Path) -> String {
    path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

fn synth_data(mut config: PipelineConfig, a: SynthDataArgs) -> Result<()> {
    set(&mut config.seed, a.seed);
    set(&mut config.synth.n_ground, a.n_ground);
    set(&mut config.synth.n_drone, a.n_drone);
    set(&mut config.synth.config.schema, a.schema);
    set(&mut config.synth.config.ground_size, a.ground_size);
    set(&mut config.synth.config.drone_size, a.drone_size);
    set(&mut config.synth.config.footprint_edge_px, a.footprint_edge);
    let s = &config.synth;
    let ds = generate_synthetic_dataset(&a.out, config.seed, s.n_ground, s.n_drone, &s.config)?;
    let prov = provenance("synth-data", &config, &[("out", &a.out)]);
    write_json(&a.out.join("provenance.json"), &prov)?;
    println!(
        "wrote {} ground and {} drone images, manifest {}",
        s.n_ground,
        s.n_drone,
        ds.manifest_path.display()
    );
    Ok(())
}

fn annotate_altitude(mut config: PipelineConfig, a: AnnotateArgs) -> Result<()> {
    let e = &mut config.elevation;
    set(&mut e.source, a.source);
    set(&mut e.endpoint, a.endpoint);
    set(&mut e.dataset, a.dataset);
    if a.fixture_file.is_some() {
        e.fixture_file = a.fixture_file;
    }
    if a.cache_file.is_some() {
        e.cache_file = a.cache_file;
    }
    let mut manifest = Manifest::load_unannotated(&a.manifest)?;
    let source = match config.elevation.source {
        ElevationMode::Fixture => {
            let path = config
                .elevation
                .fixture_file
                .as_ref()
                .ok_or_else(|| Error::Config("--source fixture needs --fixture-file".into()))?;
            ElevationSource::fixture(FixtureTable::load(path)?)
        }
        ElevationMode::Http => ElevationSource::http(HttpSettings::new(
            config.elevation.endpoint.clone(),
            config.elevation.dataset.clone(),
        )),
    };
    let source = match config.elevation_cache() {
        Some(path) => source.with_cache_file(&path)?,
        None => source,
    };
    let n = annotate_manifest(&mut manifest, &source)?;
    let out = a.out.unwrap_or(a.manifest);
    manifest.save(&out)?;
    println!(
        "annotated {n} drone records ({} backend lookups), wrote {}",
        source.backend_lookups(),
        out.display()
    );
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropEntry {
    pub source: String,
    pub window: CropWindow,
    pub altitude_m: f64,
    /// Relative to the directory holding the crops manifest.
    pub path: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropsManifest {
    pub mode: CropMode,
    pub crops: BTreeMap<String, CropEntry>,
}

fn crop_settings(config: &mut PipelineConfig, n_crops: Option<usize>, seed: Option<u64>, target: Option<u32>) {
    let c = &mut config.crop.config;
    set(&mut c.n_random_crops, n_crops);
    set(&mut c.rng_seed, seed);
    set(&mut c.target_edge_px, target);
}

fn crop(mut config: PipelineConfig, a: CropArgs) -> Result<()> {
    crop_settings(&mut config, a.n_crops, a.seed, a.target_edge);
    set(&mut config.crop.mode, a.mode.map(Into::into));
    set(&mut config.crop.config.base_edge_px, a.base_edge);
    set(&mut config.crop.config.reference_altitude_m, a.reference_altitude);
    config.crop.config.validate()?;
    let manifest = Manifest::load(&a.manifest)?;
    let mut crops = BTreeMap::new();
    for (index, rec) in manifest.records.iter().enumerate() {
        if rec.domain != Domain::Drone {
            continue;
        }
        let altitude = rec
            .altitude_m
            .ok_or_else(|| Error::record(&rec.id, "altitude_m", "missing altitude on drone record"))?;
        let img = raster::load_rgb(&manifest.resolve(rec))?;
        let cc = CropConfig {
            rng_seed: metrics::record_seed(config.crop.config.rng_seed, index),
            ..config.crop.config.clone()
        };
        let windows = match config.crop.mode {
            CropMode::Random => plan_random_crops(img.dimensions(), altitude, &cc)?,
            CropMode::Checkerboard => plan_checkerboard_crops(img.dimensions(), altitude, &cc)?,
        };
        for (k, window) in windows.into_iter().enumerate() {
            let id = format!("{}_{k:04}", rec.id);
            let rel = format!("crops/{id}.png");
            raster::save_png(&upscale_crop(&img, window, cc.target_edge_px)?, &a.out.join(&rel))?;
            crops.insert(
                id,
                CropEntry {
                    source: rec.id.clone(),
                    window,
                    altitude_m: altitude,
                    path: rel,
                },
            );
        }
    }
    if crops.is_empty() {
        return Err(Error::Manifest("manifest has no drone records to crop".into()));
    }
    let n = crops.len();
    let body = CropsManifest {
        mode: config.crop.mode,
        crops,
    };
    let prov = provenance("crop", &config, &[("manifest", &a.manifest)]);
    write_json(&a.out.join("crops.json"), &Artifact { provenance: prov, body })?;
    println!("wrote {n} crops to {}", a.out.join("crops").display());
    Ok(())
}

fn ground_images(manifest: &Manifest) -> Result<Vec<RgbImage>> {
    manifest
        .by_domain(Domain::Ground)
        .map(|r| raster::load_rgb(&manifest.resolve(r)))
        .collect()
}

fn translate_train(mut config: PipelineConfig, a: TranslateTrainArgs) -> Result<()> {
    set(&mut config.seed, a.seed);
    set(&mut config.translate.steps, a.steps);
    set(&mut config.translate.checkpoint_every, a.checkpoint_every);
    set(&mut config.translate.cut.train_resolution, a.resolution);
    config.translate.cut.validate()?;
    let manifest = Manifest::load(&a.ground_manifest)?;
    let ground = ground_images(&manifest)?;
    let drone = load_all(&raster::list_pngs(&a.drone_crops)?)?;
    let mut model = CUTModel::new(&config.translate.cut, DType::F32)?;
    let prov = provenance(
        "translate-train",
        &config,
        &[("ground_manifest", &a.ground_manifest), ("drone_crops", &a.drone_crops)],
    );
    let options = TrainCutOptions {
        steps: config.translate.steps,
        checkpoint_every: config.translate.checkpoint_every,
        checkpoint_path: Some(a.out.clone()),
        provenance: provenance_value(&prov),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let history = train_cut(&mut model, &ground, &drone, &options, &mut rng)?;
    if let Some(path) = &a.history {
        write_json(path, &Artifact { provenance: prov, body: history.clone() })?;
    }
    if let Some(last) = history.steps.last() {
        println!(
            "step {}: generator loss {:.4}, discriminator loss {:.4}; wrote {}",
            last.step,
            last.loss_g,
            last.loss_d,
            a.out.display()
        );
    }
    Ok(())
}

fn translate_apply(a: TranslateApplyArgs) -> Result<()> {
    let model = CUTModel::load(&a.checkpoint)?;
    let r = a.resolution.unwrap_or(model.config().train_resolution);
    let files = raster::list_pngs(&a.in_dir)?;
    if files.is_empty() {
        return Err(Error::Config(format!("no PNG files in {}", a.in_dir.display())));
    }
    for path in &files {
        let img = raster::resize(&raster::load_rgb(path)?, r, r);
        let out = model.transform(&[img])?.remove(0);
        raster::save_png(&out, &a.out_dir.join(file_name(path)))?;
    }
    println!("translated {} images into {}", files.len(), a.out_dir.display());
    Ok(())
}

fn labeled_ground(manifest: &Manifest) -> Result<Vec<(RgbImage, BiomassLabel)>> {
    manifest
        .by_domain(Domain::Ground)
        .filter(|r| r.label.as_ref().is_some_and(|l| l.is_complete(&manifest.schema)))
        .map(|r| Ok((raster::load_rgb(&manifest.resolve(r))?, r.label.clone().unwrap_or_default())))
        .collect()
}

/// Hold out `fraction` of `items` (at least one, at most all but one) after a
/// seeded shuffle.
fn split<T>(mut items: Vec<T>, fraction: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::Config(format!("validation_fraction {fraction} outside [0, 1)")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(7);
    items.shuffle(&mut rng);
    let n_val = if fraction == 0.0 {
        0
    } else {
        ((items.len() as f64 * fraction).round() as usize).clamp(1, items.len().saturating_sub(1))
    };
    let train = items.split_off(n_val);
    Ok((train, items))
}

fn ssl_train(mut config: PipelineConfig, a: SslTrainArgs) -> Result<()> {
    let manifest = Manifest::load(&a.labeled)?;
    if let Some(s) = a.schema {
        if s != manifest.schema.name {
            return Err(Error::Config(format!(
                "--schema {s} does not match the manifest schema {}",
                manifest.schema.name
            )));
        }
    }
    let c = &mut config.ssl.config;
    c.regressor.schema = manifest.schema.name;
    set(&mut c.steps, a.steps);
    set(&mut c.warmup_fraction, a.warmup_fraction);
    set(&mut c.seed, a.seed);
    set(&mut c.regressor.resolution, a.resolution);

    let labeled = labeled_ground(&manifest)?;
    let (train, validation) = match &a.validation {
        Some(path) => {
            let v = Manifest::load(path)?;
            if v.schema != manifest.schema {
                return Err(Error::Config("validation manifest uses a different schema".into()));
            }
            (labeled, labeled_ground(&v)?)
        }
        None => split(labeled, config.ssl.validation_fraction, config.ssl.config.seed)?,
    };
    let unlabeled = match &a.unlabeled {
        Some(dir) => load_all(&raster::list_pngs(dir)?)?,
        None => Vec::new(),
    };
    let trained = ssl::train(
        &config.ssl.config,
        SslData {
            labeled: &train,
            unlabeled: &unlabeled,
            validation: &validation,
        },
    )?;
    let mut inputs: Vec<(&str, &Path)> = vec![("labeled", &a.labeled)];
    if let Some(u) = &a.unlabeled {
        inputs.push(("unlabeled", u));
    }
    if let Some(v) = &a.validation {
        inputs.push(("validation", v));
    }
    let prov = provenance("ssl-train", &config, &inputs);
    trained.student.save(&a.out, config.ssl.config.steps, &provenance_value(&prov))?;
    for w in &trained.report.warnings {
        log::warn!("{w}");
    }
    match trained.report.final_validation_rmse() {
        Some(r) => println!("final validation RMSE {r:.5} (encoded targets); wrote {}", a.out.display()),
        None => println!("wrote {}", a.out.display()),
    }
    write_json(&a.report, &Artifact::<TrainingReport> { provenance: prov, body: trained.report })
}

fn evaluate(mut config: PipelineConfig, a: EvaluateArgs) -> Result<()> {
    crop_settings(&mut config, a.n_crops, a.seed, a.target_edge);
    set(&mut config.evaluate.mode, a.mode.map(Into::into));
    if a.max_crops.is_some() {
        config.evaluate.max_crops = a.max_crops;
    }
    let model = RegressorModel::load(&a.checkpoint)?;
    let mut manifest = Manifest::load(&a.manifest)?;
    match a.domain {
        DomainArg::All => {}
        DomainArg::Ground => manifest.records.retain(|r| r.domain == Domain::Ground),
        DomainArg::Drone => manifest.records.retain(|r| r.domain == Domain::Drone),
    }
    let translator = a.translator.as_deref().map(CUTModel::load).transpose()?;
    let options = EvaluateOptions {
        crop: config.crop.config.clone(),
        mode: config.evaluate.mode,
        max_crops: config.evaluate.max_crops,
        keep_crop_predictions: true,
    };
    let report = metrics::evaluate(
        &model,
        &manifest,
        &options,
        translator.as_ref().map(|t| t as &dyn CropTransform),
    )?;
    let mut inputs: Vec<(&str, &Path)> = vec![("checkpoint", &a.checkpoint), ("manifest", &a.manifest)];
    if let Some(t) = &a.translator {
        inputs.push(("translator", t));
    }
    let prov = provenance("evaluate", &config, &inputs);
    print_summary(&report, model.schema());
    if let Some(dir) = &a.plots {
        plots::write_all(&report, dir)?;
    }
    write_json(&a.out, &Artifact { provenance: prov, body: report })
}

fn print_summary(report: &MetricReport, schema: &TaskSchema) {
    println!("{} samples ({} schema)", report.n_samples, schema.name);
    if let Some(h) = &report.hrmse {
        println!(
            "HRMSE kg DM/ha: total {:.2}, grass {:.2}, clover {:.2}, weeds {:.2}, avg {:.2}",
            h.total, h.grass, h.clover, h.weeds, h.avg
        );
    } else if let Some(t) = report.total_hrmse {
        println!("HRMSE kg DM/ha: total {t:.2}");
    }
    if let Some(r) = report.hre {
        println!("HRE {r:.3}");
    }
    if let Some(h) = report.height_error {
        println!("HE cm {h:.3}");
    }
    if let Some(c) = &report.composition_rmse {
        println!("composition RMSE pp: avg {:.2}", c.avg);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SharpnessRow {
    pub image: String,
    pub sharpness: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub compared: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SharpnessTable {
    pub rows: Vec<SharpnessRow>,
    pub mean: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub compared_mean: Option<f64>,
    /// Share of images whose compared copy is sharper.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub share_sharper: Option<f64>,
}

fn sharpness(a: SharpnessArgs) -> Result<()> {
    let files = raster::list_pngs(&a.input)?;
    if files.is_empty() {
        return Err(Error::Config(format!("no PNG files in {}", a.input.display())));
    }
    let mut rows = Vec::with_capacity(files.len());
    for path in &files {
        let name = file_name(path);
        let compared = match &a.compare {
            Some(dir) => Some(metrics::sharpness(&raster::load_rgb(&dir.join(&name))?)),
            None => None,
        };
        rows.push(SharpnessRow {
            sharpness: metrics::sharpness(&raster::load_rgb(path)?),
            image: name,
            compared,
        });
    }
    let n = rows.len() as f64;
    let mean = rows.iter().map(|r| r.sharpness).sum::<f64>() / n;
    let (compared_mean, share_sharper) = if a.compare.is_some() {
        let m = rows.iter().filter_map(|r| r.compared).sum::<f64>() / n;
        let up = rows.iter().filter(|r| r.compared.is_some_and(|c| c > r.sharpness)).count() as f64 / n;
        (Some(m), Some(up))
    } else {
        (None, None)
    };
    for r in &rows {
        match r.compared {
            Some(c) => println!("{:<32} {:>12.2} {:>12.2}", r.image, r.sharpness, c),
            None => println!("{:<32} {:>12.2}", r.image, r.sharpness),
        }
    }
    match compared_mean {
        Some(c) => println!("{:<32} {mean:>12.2} {c:>12.2}", "mean"),
        None => println!("{:<32} {mean:>12.2}", "mean"),
    }
    if let Some(out) = &a.out {
        write_json(
            out,
            &SharpnessTable {
                rows,
                mean,
                compared_mean,
                share_sharper,
            },
        )?;
    }
    Ok(())
}

fn report(a: ReportArgs) -> Result<()> {
    let artifact: Artifact<MetricReport> = read_json(&a.from)?;
    let written = plots::write_all(&artifact.body, &a.out_dir)?;
    for p in written {
        println!("wrote {}", p.display());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_is_seeded_and_bounded() {
        let items: Vec<usize> = (0..10).collect();
        let (t, v) = split(items.clone(), 0.2, 3).unwrap();
        assert_eq!((t.len(), v.len()), (8, 2));
        assert_eq!(split(items.clone(), 0.2, 3).unwrap(), (t, v));
        let (t, v) = split(vec![1, 2], 0.9, 0).unwrap();
        assert_eq!((t.len(), v.len()), (1, 1));
        assert_eq!(split(items.clone(), 0.0, 0).unwrap().1.len(), 0);
        assert!(split(items, 1.0, 0).is_err());
    }
}
