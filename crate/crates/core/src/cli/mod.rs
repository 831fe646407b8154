//! The `herbage` command-line front end: one subcommand per pipeline stage.
//!
//! Settings come from an optional JSON [`PipelineConfig`]; any flag given on
//! the command line wins over the file. Exit codes: 0 success, 1 usage error,
//! 2 invalid input data, 3 failure while running a stage.

mod commands;
mod config;
mod plots;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::data_model::SchemaName;
use crate::metrics::CropMode;

pub use config::{
    CropSection, ElevationConfig, ElevationMode, EvaluateSection, PipelineConfig, SslSection, SynthSection,
    TranslateSection, CACHE_DIR_ENV,
};
pub use plots::{hre_band, write_crop_histograms, write_hre_plot, HreBand};

pub const EXIT_USAGE: i32 = 1;

#[derive(Debug, Parser)]
#[command(name = "herbage", version, about = "Herbage biomass estimation from ground and drone imagery")]
pub struct Cli {
    /// Pipeline configuration (JSON). Flags override values read from it;
    /// without it the built-in defaults apply.
    #[arg(long, global = true, env = "HERBAGE_CONFIG")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a seeded synthetic ground/drone dataset with its manifest and an
    /// elevation fixture.
    SynthData(SynthDataArgs),
    /// Fill drone altitudes above ground from GPS altitude and terrain height.
    AnnotateAltitude(AnnotateArgs),
    /// Cut altitude-scaled crops out of drone images and upscale them.
    Crop(CropArgs),
    /// Train the drone-to-ground translation network.
    TranslateTrain(TranslateTrainArgs),
    /// Translate every PNG of a directory with a trained network.
    TranslateApply(TranslateApplyArgs),
    /// Train the biomass regressor with labeled ground and unlabeled drone images.
    SslTrain(SslTrainArgs),
    /// Score a regressor on a manifest and write a JSON metric report.
    Evaluate(EvaluateArgs),
    /// Variance-of-Laplacian sharpness of every PNG in a directory.
    Sharpness(SharpnessArgs),
    /// Plot an evaluation report (SVG).
    Report(ReportArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum CropModeArg {
    Random,
    Checkerboard,
}

impl From<CropModeArg> for CropMode {
    fn from(m: CropModeArg) -> Self {
        match m {
            CropModeArg::Random => CropMode::Random,
            CropModeArg::Checkerboard => CropMode::Checkerboard,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DomainArg {
    All,
    Ground,
    Drone,
}

fn parse_schema(s: &str) -> Result<SchemaName, String> {
    s.parse().map_err(|e: crate::Error| e.to_string())
}

#[derive(Debug, Args)]
pub struct SynthDataArgs {
    /// Output directory for images, manifest.json and elevation_fixture.json.
    #[arg(long)]
    pub out: PathBuf,
    /// Generator seed [config: seed, default 0].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of labeled ground images [config: synth.n_ground, default 64].
    #[arg(long)]
    pub n_ground: Option<usize>,
    /// Number of drone images [config: synth.n_drone, default 8].
    #[arg(long)]
    pub n_drone: Option<usize>,
    /// Label schema, irish or grassclover [config: synth.schema, default irish].
    #[arg(long, value_parser = parse_schema)]
    pub schema: Option<SchemaName>,
    /// Ground image edge in px [config: synth.ground_size, default 512].
    #[arg(long)]
    pub ground_size: Option<u32>,
    /// Drone image edge in px [config: synth.drone_size, default 2048].
    #[arg(long)]
    pub drone_size: Option<u32>,
    /// Edge in drone pixels of one ground footprint at the reference
    /// altitude [config: synth.footprint_edge_px, default 256].
    #[arg(long)]
    pub footprint_edge: Option<u32>,
}

#[derive(Debug, Args)]
pub struct AnnotateArgs {
    /// Input manifest; drone records need `gps` and `altitude_asl_m`.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output manifest [default: overwrite the input]. Record paths are kept
    /// as they are, so write it next to the input.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Elevation backend [config: elevation.source, default fixture].
    #[arg(long, value_enum)]
    pub source: Option<ElevationMode>,
    /// Fixture table for `--source fixture` [config: elevation.fixture_file].
    #[arg(long)]
    pub fixture_file: Option<PathBuf>,
    /// Persistent JSON cache [config: elevation.cache_file, else
    /// $HERBAGE_CACHE_DIR/elevation_cache.json].
    #[arg(long)]
    pub cache_file: Option<PathBuf>,
    /// API base URL for `--source http` [config: elevation.endpoint,
    /// default https://api.opentopodata.org].
    #[arg(long)]
    pub endpoint: Option<String>,
    /// Elevation dataset name [config: elevation.dataset, default eudem25m].
    #[arg(long)]
    pub dataset: Option<String>,
}

#[derive(Debug, Args)]
pub struct CropArgs {
    /// Manifest with annotated drone records.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output directory for crops/*.png and crops.json.
    #[arg(long)]
    pub out: PathBuf,
    /// Crop planning [config: crop.mode, default random].
    #[arg(long, value_enum)]
    pub mode: Option<CropModeArg>,
    /// Random crops per image [config: crop.n_random_crops, default 50].
    #[arg(long)]
    pub n_crops: Option<usize>,
    /// Random crop seed [config: crop.rng_seed, default 0].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Edge of the upscaled crops in px [config: crop.target_edge_px, default 2048].
    #[arg(long)]
    pub target_edge: Option<u32>,
    /// Crop edge at the reference altitude [config: crop.base_edge_px, default 256].
    #[arg(long)]
    pub base_edge: Option<u32>,
    /// Reference altitude in m [config: crop.reference_altitude_m, default 6].
    #[arg(long)]
    pub reference_altitude: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TranslateTrainArgs {
    /// Manifest whose ground records form the target domain.
    #[arg(long)]
    pub ground_manifest: PathBuf,
    /// Directory of drone crops (PNG) forming the source domain.
    #[arg(long)]
    pub drone_crops: PathBuf,
    /// Training steps [config: translate.steps, default 200].
    #[arg(long)]
    pub steps: Option<usize>,
    /// Training edge in px [config: translate.train_resolution, default 64].
    #[arg(long)]
    pub resolution: Option<u32>,
    /// Batch-sampling seed [config: seed, default 0].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Snapshot interval [config: translate.checkpoint_every, default 50].
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    /// Output checkpoint (safetensors).
    #[arg(long)]
    pub out: PathBuf,
    /// Optional per-step loss history (JSON).
    #[arg(long)]
    pub history: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TranslateApplyArgs {
    /// Translation checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Directory of PNG crops.
    #[arg(long)]
    pub in_dir: PathBuf,
    /// Output directory; file names are kept.
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Resize crops to this edge before translating [default: the
    /// checkpoint's training resolution].
    #[arg(long)]
    pub resolution: Option<u32>,
}

#[derive(Debug, Args)]
pub struct SslTrainArgs {
    /// Manifest with labeled ground records.
    #[arg(long)]
    pub labeled: PathBuf,
    /// Directory of unlabeled (translated) drone crops.
    #[arg(long)]
    pub unlabeled: Option<PathBuf>,
    /// Held-out validation manifest [default: split off
    /// ssl.validation_fraction of the labeled records].
    #[arg(long)]
    pub validation: Option<PathBuf>,
    /// Label schema [default: the manifest's].
    #[arg(long, value_parser = parse_schema)]
    pub schema: Option<SchemaName>,
    /// Training steps [config: ssl.steps, default 300].
    #[arg(long)]
    pub steps: Option<usize>,
    /// Supervised-only share of the steps [config: ssl.warmup_fraction, default 0.2].
    #[arg(long)]
    pub warmup_fraction: Option<f64>,
    /// Seed [config: ssl.seed, default 0].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Input edge in px [config: ssl.regressor.resolution, default 32].
    #[arg(long)]
    pub resolution: Option<u32>,
    /// Output checkpoint of the student network.
    #[arg(long)]
    pub out: PathBuf,
    /// Training report (JSON).
    #[arg(long)]
    pub report: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Regressor checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Manifest to score; only labeled records are used.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Metric report (JSON).
    #[arg(long)]
    pub out: PathBuf,
    /// Records to score [default: all].
    #[arg(long, value_enum, default_value = "all")]
    pub domain: DomainArg,
    /// Drone crop planning [config: evaluate.mode, default random].
    #[arg(long, value_enum)]
    pub mode: Option<CropModeArg>,
    /// Random crops per drone image [config: crop.n_random_crops, default 50].
    #[arg(long)]
    pub n_crops: Option<usize>,
    /// Keep at most this many checkerboard tiles [config: evaluate.max_crops].
    #[arg(long)]
    pub max_crops: Option<usize>,
    /// Random crop seed [config: crop.rng_seed, default 0].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Edge of the upscaled crops [config: crop.target_edge_px, default 2048].
    #[arg(long)]
    pub target_edge: Option<u32>,
    /// Translation checkpoint applied to drone crops before prediction.
    #[arg(long)]
    pub translator: Option<PathBuf>,
    /// Also write SVG plots into this directory.
    #[arg(long)]
    pub plots: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SharpnessArgs {
    /// Directory of PNG images.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Second directory with same-named images (e.g. translated) to compare against.
    #[arg(long)]
    pub compare: Option<PathBuf>,
    /// Also write the table as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Report written by `evaluate`.
    #[arg(long)]
    pub from: PathBuf,
    /// Output directory for the SVG files.
    #[arg(long)]
    pub out_dir: PathBuf,
}

/// Parse `argv`, run the subcommand and return the process exit code.
pub fn run_subcommand<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match commands::execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("herbage: error: {e}");
            e.exit_code()
        }
    }
}
