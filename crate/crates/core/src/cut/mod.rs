//! Contrastive unpaired translation of upscaled drone crops toward the
//! ground-level image domain.
//!
//! The generator is a global residual network, `G(x) = x + r(x)`: zeroing the
//! output convolution makes it an exact identity. Patch features are tapped
//! half way through the residual stack, projected by a two-layer perceptron
//! and L2-normalised.

mod losses;
mod train;

use std::path::Path;

use candle_core::{DType, Tensor};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::nn::{
    instance_norm, l2_normalize, leaky_relu, scalar, sigmoid, AdamConfig, Conv2d, Linear, Padding, ParamStore,
};
use crate::raster::{self, PixelScale, RgbImage};

pub use losses::{
    adversarial_loss, discriminator_loss, generator_adversarial_loss, patch_contrastive_loss,
    patch_contrastive_loss_scalar,
};
pub use train::{train_cut, CutHistory, CutStepRecord, TrainCutOptions};

pub const CHECKPOINT_KIND: &str = "cut";
const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CUTConfig {
    /// Patches per image in the contrastive loss.
    pub n_patches: usize,
    pub temperature: f64,
    /// Weight of the contrastive term on drone images (source vs translated).
    pub lambda_x: f64,
    /// Weight of the identity contrastive term on ground images.
    pub lambda_y: f64,
    pub generator_blocks: usize,
    /// Channels after the generator stem; doubled after the downsampling.
    pub generator_width: usize,
    pub discriminator_width: usize,
    pub projection_dim: usize,
    pub train_resolution: u32,
    /// 1-based residual block whose output feeds the projection head;
    /// `None` means block `ceil(generator_blocks / 2)`.
    pub feature_tap: Option<usize>,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Start from the identity mapping (output convolution zeroed).
    pub identity_init: bool,
    pub init_seed: u64,
}

impl Default for CUTConfig {
    fn default() -> Self {
        Self::desk_scale()
    }
}

impl CUTConfig {
    /// Small configuration that trains in minutes on one CPU core.
    pub fn desk_scale() -> Self {
        Self {
            n_patches: 64,
            temperature: 0.07,
            lambda_x: 0.5,
            lambda_y: 0.5,
            generator_blocks: 2,
            generator_width: 8,
            discriminator_width: 16,
            projection_dim: 64,
            train_resolution: 64,
            feature_tap: None,
            batch_size: 1,
            adam: AdamConfig::default(),
            identity_init: true,
            init_seed: 0,
        }
    }

    /// Nine residual blocks at 2048 px.
    pub fn full_scale() -> Self {
        Self {
            generator_blocks: 9,
            generator_width: 64,
            discriminator_width: 64,
            projection_dim: 256,
            train_resolution: 2048,
            ..Self::desk_scale()
        }
    }

    pub fn tap_block(&self) -> usize {
        self.feature_tap.unwrap_or(self.generator_blocks.div_ceil(2))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::Config("temperature must be > 0".into()));
        }
        if !(self.lambda_x >= 0.0 && self.lambda_y >= 0.0) {
            return Err(Error::Config("contrastive weights must be >= 0".into()));
        }
        if self.n_patches < 2 {
            return Err(Error::Config("n_patches must be >= 2".into()));
        }
        if self.generator_blocks == 0 || self.generator_width == 0 || self.discriminator_width == 0 {
            return Err(Error::Config("network sizes must be > 0".into()));
        }
        let tap = self.tap_block();
        if tap == 0 || tap > self.generator_blocks {
            return Err(Error::Config(format!(
                "feature_tap {tap} outside 1..={}",
                self.generator_blocks
            )));
        }
        if self.train_resolution < 16 || self.train_resolution % 4 != 0 {
            return Err(Error::Config("train_resolution must be a multiple of 4 and >= 16".into()));
        }
        let positions = (self.train_resolution as usize / 2).pow(2);
        if self.n_patches > positions {
            return Err(Error::Config(format!(
                "{} patches requested but the feature map has {positions} positions",
                self.n_patches
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be > 0".into()));
        }
        Ok(())
    }
}

struct ResBlock {
    conv1: Conv2d,
    conv2: Conv2d,
}

impl ResBlock {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = instance_norm(&self.conv1.forward(x)?, NORM_EPS)?.relu()?;
        let h = instance_norm(&self.conv2.forward(&h)?, NORM_EPS)?;
        Ok((x + h)?)
    }
}

pub struct Generator {
    stem: Conv2d,
    down: Conv2d,
    blocks: Vec<ResBlock>,
    up: Conv2d,
    out: Conv2d,
    tap: usize,
}

impl Generator {
    fn new(store: &mut ParamStore, config: &CUTConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let c = config.generator_width;
        let stem = Conv2d::new(store, "generator.stem", 3, c, 7, 1, Padding::Reflect(3), Conv2d::he_std(3, 7), rng)?;
        let down = Conv2d::new(store, "generator.down", c, 2 * c, 3, 2, Padding::Zeros(1), Conv2d::he_std(c, 3), rng)?;
        let mut blocks = Vec::new();
        for b in 0..config.generator_blocks {
            let name = format!("generator.block{}", b + 1);
            blocks.push(ResBlock {
                conv1: Conv2d::new(store, &format!("{name}.conv1"), 2 * c, 2 * c, 3, 1, Padding::Reflect(1), Conv2d::he_std(2 * c, 3), rng)?,
                conv2: Conv2d::new(store, &format!("{name}.conv2"), 2 * c, 2 * c, 3, 1, Padding::Reflect(1), Conv2d::he_std(2 * c, 3), rng)?,
            });
        }
        let up = Conv2d::new(store, "generator.up", 2 * c, c, 3, 1, Padding::Reflect(1), Conv2d::he_std(2 * c, 3), rng)?;
        let out_std = if config.identity_init { 0.0 } else { 0.02 };
        let out = Conv2d::new(store, "generator.out", c, 3, 7, 1, Padding::Reflect(3), out_std, rng)?;
        Ok(Self {
            stem,
            down,
            blocks,
            up,
            out,
            tap: config.tap_block(),
        })
    }

    fn check_input(x: &Tensor) -> Result<(usize, usize)> {
        let (_, c, h, w) = x.dims4()?;
        if c != 3 || h < 8 || w < 8 || h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Shape(format!(
                "generator needs (N, 3, H, W) with even H, W >= 8, got {:?}",
                x.dims()
            )));
        }
        Ok((h, w))
    }

    fn encode(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let stem = instance_norm(&self.stem.forward(x)?, NORM_EPS)?.relu()?;
        let h = instance_norm(&self.down.forward(&stem)?, NORM_EPS)?.relu()?;
        Ok((stem, h))
    }

    /// Output of residual block `tap`, `(N, 2c, H/2, W/2)`.
    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        Self::check_input(x)?;
        let (_, mut h) = self.encode(x)?;
        for b in &self.blocks[..self.tap] {
            h = b.forward(&h)?;
        }
        Ok(h)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (hh, ww) = Self::check_input(x)?;
        let (stem, mut h) = self.encode(x)?;
        for b in &self.blocks {
            h = b.forward(&h)?;
        }
        let u = h.upsample_nearest2d(hh, ww)?;
        let u = (instance_norm(&self.up.forward(&u)?, NORM_EPS)?.relu()? + stem)?;
        Ok((x + self.out.forward(&u)?)?)
    }

    /// Zero the output convolution, turning `G` into the identity.
    pub fn set_identity(&self) -> Result<()> {
        let w = self.out.weight();
        w.set(&w.as_tensor().zeros_like()?)?;
        if let Some(b) = self.out.bias() {
            b.set(&b.as_tensor().zeros_like()?)?;
        }
        Ok(())
    }
}

/// Patch discriminator: three 4x4 convolutions producing a logit map.
pub struct Discriminator {
    conv1: Conv2d,
    conv2: Conv2d,
    conv3: Conv2d,
}

impl Discriminator {
    fn new(store: &mut ParamStore, width: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let d = width;
        Ok(Self {
            conv1: Conv2d::new(store, "discriminator.conv1", 3, d, 4, 2, Padding::Zeros(1), 0.02, rng)?,
            conv2: Conv2d::new(store, "discriminator.conv2", d, 2 * d, 4, 2, Padding::Zeros(1), 0.02, rng)?,
            conv3: Conv2d::new(store, "discriminator.conv3", 2 * d, 1, 4, 1, Padding::Zeros(1), 0.02, rng)?,
        })
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let h = leaky_relu(&self.conv1.forward(x)?, 0.2)?;
        let h = leaky_relu(&instance_norm(&self.conv2.forward(&h)?, NORM_EPS)?, 0.2)?;
        self.conv3.forward(&h)
    }

    /// Probability scores in (0, 1).
    pub fn scores(&self, x: &Tensor) -> Result<Tensor> {
        sigmoid(&self.logits(x)?)
    }
}

/// Two-layer perceptron onto the unit sphere.
pub struct Projection {
    fc1: Linear,
    fc2: Linear,
}

impl Projection {
    fn new(store: &mut ParamStore, in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(store, "projection.fc1", in_dim, out_dim, (2.0 / in_dim as f64).sqrt(), rng)?,
            fc2: Linear::new(store, "projection.fc2", out_dim, out_dim, (1.0 / out_dim as f64).sqrt(), rng)?,
        })
    }

    /// `(M, C) -> (M, out_dim)` unit rows.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        l2_normalize(&self.fc2.forward(&self.fc1.forward(x)?.relu()?)?, 1)
    }
}

/// Loss values of one evaluation of the translation objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CutLossParts {
    pub adversarial_g: f64,
    pub patch_x: f64,
    pub patch_y: f64,
    pub lambda_x: f64,
    pub lambda_y: f64,
    pub loss_g: f64,
    pub loss_d: f64,
}

pub struct CutLosses {
    pub loss_g: Tensor,
    pub loss_d: Tensor,
    pub parts: CutLossParts,
}

pub struct CUTModel {
    config: CUTConfig,
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub projection: Projection,
    g_store: ParamStore,
    d_store: ParamStore,
    f_store: ParamStore,
    step: usize,
}

impl CUTModel {
    pub fn new(config: &CUTConfig, dtype: DType) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut g_store = ParamStore::new(dtype);
        let mut d_store = ParamStore::new(dtype);
        let mut f_store = ParamStore::new(dtype);
        let generator = Generator::new(&mut g_store, config, &mut rng)?;
        let discriminator = Discriminator::new(&mut d_store, config.discriminator_width, &mut rng)?;
        let projection = Projection::new(&mut f_store, 2 * config.generator_width, config.projection_dim, &mut rng)?;
        Ok(Self {
            config: config.clone(),
            generator,
            discriminator,
            projection,
            g_store,
            d_store,
            f_store,
            step: 0,
        })
    }

    pub fn config(&self) -> &CUTConfig {
        &self.config
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub(crate) fn set_step(&mut self, step: usize) {
        self.step = step;
    }

    pub fn generator_store(&self) -> &ParamStore {
        &self.g_store
    }

    pub fn discriminator_store(&self) -> &ParamStore {
        &self.d_store
    }

    pub fn projection_store(&self) -> &ParamStore {
        &self.f_store
    }

    pub fn stores(&self) -> [&ParamStore; 3] {
        [&self.g_store, &self.d_store, &self.f_store]
    }

    pub fn dtype(&self) -> DType {
        self.g_store.dtype()
    }

    /// Images to a `(N, 3, H, W)` input in [-1, 1].
    pub fn to_input(&self, images: &[&RgbImage]) -> Result<Tensor> {
        raster::to_tensor(images, PixelScale::Symmetric, self.dtype(), self.g_store.device())
    }

    /// Projected, normalised patch features at flat feature-map `locations`:
    /// `(N, P, projection_dim)`.
    pub fn patch_features(&self, x: &Tensor, locations: &[usize]) -> Result<Tensor> {
        let feats = self.generator.features(x)?;
        let (n, c, h, w) = feats.dims4()?;
        if let Some(bad) = locations.iter().find(|&&l| l >= h * w) {
            return Err(Error::Shape(format!("patch location {bad} outside {h}x{w} feature map")));
        }
        let idx = Tensor::new(locations.iter().map(|&l| l as u32).collect::<Vec<_>>(), feats.device())?;
        let picked = feats.reshape((n, c, h * w))?.index_select(&idx, 2)?; // (N, C, P)
        let rows = picked.transpose(1, 2)?.contiguous()?.reshape((n * locations.len(), c))?;
        Ok(self.projection.forward(&rows)?.reshape((n, locations.len(), ()))?)
    }

    /// Contrastive loss between `source` and `translated` at shared locations.
    pub fn patch_loss(&self, source: &Tensor, translated: &Tensor, locations: &[usize]) -> Result<Tensor> {
        let ps = self.patch_features(source, locations)?;
        let pt = self.patch_features(translated, locations)?;
        patch_contrastive_loss(&ps, &pt, self.config.temperature)
    }

    /// Generator and discriminator objectives at fixed patch locations.
    pub fn losses_at(&self, x_l: &Tensor, x_u: &Tensor, locations: &[usize]) -> Result<CutLosses> {
        let fake = self.generator.forward(x_u)?;
        let loss_d = discriminator_loss(
            &self.discriminator.logits(x_l)?,
            &self.discriminator.logits(&fake.detach())?,
        )?;
        let (loss_g, mut parts) = self.generator_objective(x_l, x_u, &fake, locations)?;
        parts.loss_d = scalar(&loss_d)?;
        Ok(CutLosses { loss_g, loss_d, parts })
    }

    /// Generator-side loss given `fake = G(x_u)`; `loss_d` is left at 0.
    pub(crate) fn generator_objective(
        &self,
        x_l: &Tensor,
        x_u: &Tensor,
        fake: &Tensor,
        locations: &[usize],
    ) -> Result<(Tensor, CutLossParts)> {
        let c = &self.config;
        let adv = generator_adversarial_loss(&self.discriminator.logits(fake)?)?;
        let mut loss_g = adv.clone();
        let mut parts = CutLossParts {
            adversarial_g: scalar(&adv)?,
            lambda_x: c.lambda_x,
            lambda_y: c.lambda_y,
            ..Default::default()
        };
        if c.lambda_x > 0.0 {
            let px = self.patch_loss(x_u, fake, locations)?;
            parts.patch_x = scalar(&px)?;
            loss_g = (loss_g + (px * c.lambda_x)?)?;
        }
        if c.lambda_y > 0.0 {
            let idt = self.generator.forward(x_l)?;
            let py = self.patch_loss(x_l, &idt, locations)?;
            parts.patch_y = scalar(&py)?;
            loss_g = (loss_g + (py * c.lambda_y)?)?;
        }
        parts.loss_g = scalar(&loss_g)?;
        Ok((loss_g, parts))
    }

    /// Full objective with freshly sampled patch locations.
    pub fn total_cut_loss(&self, x_l: &Tensor, x_u: &Tensor, rng: &mut impl Rng) -> Result<CutLosses> {
        if x_l.dims() != x_u.dims() {
            return Err(Error::Shape(format!(
                "ground batch {:?} vs drone batch {:?}",
                x_l.dims(),
                x_u.dims()
            )));
        }
        let (_, _, h, w) = x_u.dims4()?;
        let locations = sample_locations(h / 2, w / 2, self.config.n_patches, rng)?;
        self.losses_at(x_l, x_u, &locations)
    }

    /// Matched patch features of `source` and `translated` images.
    pub fn sample_patch_pairs(
        &self,
        source: &RgbImage,
        translated: &RgbImage,
        rng: &mut impl Rng,
    ) -> Result<PatchBatch> {
        if source.dimensions() != translated.dimensions() {
            return Err(Error::Shape(format!(
                "source {:?} vs translated {:?}",
                source.dimensions(),
                translated.dimensions()
            )));
        }
        let (w, h) = source.dimensions();
        let locations = sample_locations(h as usize / 2, w as usize / 2, self.config.n_patches, rng)?;
        let xs = self.to_input(&[source])?;
        let xt = self.to_input(&[translated])?;
        Ok(PatchBatch {
            source: self.patch_features(&xs, &locations)?.squeeze(0)?,
            translated: self.patch_features(&xt, &locations)?.squeeze(0)?,
            locations,
        })
    }

    /// `G(crop)` for each crop, one at a time, clamped to valid pixels.
    pub fn apply_translation(&self, crops: &[RgbImage]) -> Result<Vec<RgbImage>> {
        crops
            .iter()
            .map(|crop| {
                let x = self.to_input(&[crop])?;
                let y = self.generator.forward(&x)?.detach();
                raster::from_tensor(&y.squeeze(0)?, PixelScale::Symmetric)
            })
            .collect()
    }

    /// `provenance` is stored next to the model configuration.
    pub fn save(&self, path: &Path, provenance: &serde_json::Value) -> Result<()> {
        let config = serde_json::json!({ "cut": self.config, "provenance": provenance });
        checkpoint::save(path, CHECKPOINT_KIND, self.step, &config, &self.stores())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = checkpoint::load(path)?;
        ck.expect_kind(CHECKPOINT_KIND)?;
        let config: CUTConfig =
            serde_json::from_value(ck.config["cut"].clone()).map_err(|e| Error::json("cut checkpoint config", e))?;
        let mut model = Self::new(&config, DType::F32)?;
        for store in model.stores() {
            store.load_named(&ck.tensors)?;
        }
        model.step = ck.step;
        Ok(model)
    }
}

/// `n` distinct flat positions of an `h` x `w` map.
pub fn sample_locations(h: usize, w: usize, n: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if n > h * w {
        return Err(Error::Shape(format!("cannot draw {n} distinct patches from {h}x{w}")));
    }
    Ok(index::sample(rng, h * w, n).into_vec())
}

/// Matched unit feature vectors, row `i` of both tensors from location `i`.
pub struct PatchBatch {
    /// `(P, C)` features of the source image.
    pub source: Tensor,
    /// `(P, C)` features of the translated image.
    pub translated: Tensor,
    pub locations: Vec<usize>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::to_f64_vec;
    use rand::Rng;

    fn tiny(dtype: DType) -> CUTModel {
        let cfg = CUTConfig {
            train_resolution: 16,
            generator_width: 4,
            discriminator_width: 4,
            projection_dim: 8,
            n_patches: 16,
            identity_init: false,
            init_seed: 5,
            ..CUTConfig::desk_scale()
        };
        CUTModel::new(&cfg, dtype).unwrap()
    }

    fn noise_image(seed: u64, edge: u32) -> RgbImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RgbImage::from_fn(edge, edge, |_, _| raster::Rgb([rng.random(), rng.random(), rng.random()]))
    }

    #[test]
    fn config_defaults_and_tap() {
        let c = CUTConfig::default();
        assert_eq!((c.n_patches, c.temperature, c.lambda_x, c.lambda_y), (64, 0.07, 0.5, 0.5));
        assert_eq!(c.tap_block(), 1);
        assert_eq!(CUTConfig::full_scale().tap_block(), 5);
        assert!(CUTConfig { temperature: 0.0, ..c.clone() }.validate().is_err());
        assert!(CUTConfig { n_patches: 1, ..c.clone() }.validate().is_err());
        assert!(CUTConfig { feature_tap: Some(3), ..c }.validate().is_err());
    }

    #[test]
    fn generator_keeps_size_and_identity_init_is_exact() {
        let m = tiny(DType::F32);
        for edge in [16u32, 24, 40] {
            let img = noise_image(edge as u64, edge);
            let out = m.apply_translation(&[img.clone()]).unwrap();
            assert_eq!(out[0].dimensions(), (edge, edge));
            assert_ne!(out[0], img);
        }
        m.generator.set_identity().unwrap();
        let img = noise_image(1, 16);
        assert_eq!(m.apply_translation(&[img.clone()]).unwrap()[0], img);
        assert!(m.apply_translation(&[noise_image(1, 15)]).is_err());
        assert!(m.apply_translation(&[]).unwrap().is_empty());
    }

    #[test]
    fn apply_is_deterministic_and_batch_independent() {
        let m = tiny(DType::F32);
        let a = noise_image(3, 16);
        let b = noise_image(4, 16);
        let ab = m.apply_translation(&[a.clone(), b.clone()]).unwrap();
        let ba = m.apply_translation(&[b, a.clone()]).unwrap();
        assert_eq!(ab[0], ba[1]);
        assert_eq!(ab[0], m.apply_translation(&[a]).unwrap()[0]);
    }

    #[test]
    fn patch_pairs_contracts() {
        let m = tiny(DType::F64);
        let img = noise_image(9, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pb = m.sample_patch_pairs(&img, &img, &mut rng).unwrap();
        assert_eq!(pb.source.dims(), &[16, 8]);
        let mut locs = pb.locations.clone();
        locs.sort();
        locs.dedup();
        assert_eq!(locs.len(), 16);
        let norms_s = to_f64_vec(&pb.source.sqr().unwrap().sum(1).unwrap()).unwrap();
        let norms_t = to_f64_vec(&pb.translated.sqr().unwrap().sum(1).unwrap()).unwrap();
        assert!(norms_s.iter().chain(&norms_t).all(|n| (n.sqrt() - 1.0).abs() < 1e-5));
        let pos = to_f64_vec(&(&pb.source * &pb.translated).unwrap().sum(1).unwrap()).unwrap();
        assert!(pos.iter().all(|p| (p - 1.0).abs() < 1e-5));

        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let again = m.sample_patch_pairs(&img, &img, &mut rng).unwrap();
        assert_eq!(again.locations, pb.locations);
        assert!(m.sample_patch_pairs(&img, &noise_image(1, 24), &mut rng).is_err());
    }

    #[test]
    fn loss_parts_resum_and_degenerate_weights() {
        let m = tiny(DType::F64);
        let x_l = m.to_input(&[&noise_image(1, 16)]).unwrap();
        let x_u = m.to_input(&[&noise_image(2, 16)]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let l = m.total_cut_loss(&x_l, &x_u, &mut rng).unwrap();
        let p = l.parts;
        assert!((p.adversarial_g + p.lambda_x * p.patch_x + p.lambda_y * p.patch_y - p.loss_g).abs() < 1e-6);

        let cfg = CUTConfig {
            lambda_x: 0.0,
            lambda_y: 0.0,
            ..m.config().clone()
        };
        let m0 = CUTModel::new(&cfg, DType::F64).unwrap();
        let l0 = m0.total_cut_loss(&x_l, &x_u, &mut rng).unwrap();
        assert_eq!(l0.parts.loss_g, l0.parts.adversarial_g);
    }

    #[test]
    fn identity_generator_identity_term() {
        let m = tiny(DType::F64);
        m.generator.set_identity().unwrap();
        let x_l = m.to_input(&[&noise_image(1, 16)]).unwrap();
        let x_u = m.to_input(&[&noise_image(2, 16)]).unwrap();
        let locations: Vec<usize> = (0..16).map(|i| i * 4).collect();
        let l = m.losses_at(&x_l, &x_u, &locations).unwrap();
        let self_loss = scalar(&m.patch_loss(&x_l, &x_l, &locations).unwrap()).unwrap();
        assert!((l.parts.patch_y - self_loss).abs() < 1e-12);
        // Positives are exact, so the loss sits below the uniform value ln P.
        assert!(l.parts.patch_y < (16f64).ln());
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = tiny(DType::F32);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cut.safetensors");
        m.save(&path, &serde_json::json!({})).unwrap();
        let back = CUTModel::load(&path).unwrap();
        for (a, b) in back.stores().iter().zip(m.stores()) {
            assert!(a.bit_equal(b).unwrap());
        }
        let img = noise_image(2, 16);
        assert_eq!(back.apply_translation(&[img.clone()]).unwrap(), m.apply_translation(&[img]).unwrap());
    }
}
