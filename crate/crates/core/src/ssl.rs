//! Semi-supervised training of the regressor from a few labeled images and
//! many unlabeled ones.
//!
//! After a supervised warmup, every mini-batch mixes labeled items with
//! unlabeled ones whose targets are guessed by an EMA teacher: two flipped
//! views are predicted, mixed with a uniform random weight, rescaled toward
//! the labeled target distribution and projected back onto valid targets.
//! All guessing happens in encoded target space.

use std::collections::VecDeque;

use candle_core::{DType, Tensor};
use log::warn;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data_model::{BiomassLabel, TaskSchema};
use crate::error::{Error, Result};
use crate::metrics::{self, MetricReport};
use crate::nn::{scalar, to_f64_vec, Optimizer, ParamStore, Sgd, SgdConfig};
use crate::raster::{self, RgbImage};
use crate::regressor::{supervised_loss, BackboneKind, LabelCodec, RegressorConfig, RegressorModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Resize to 9/8 of the training edge, then crop a random window.
    pub random_crop: bool,
    pub horizontal_flip: bool,
    pub vertical_flip: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            random_crop: true,
            horizontal_flip: true,
            vertical_flip: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SSLConfig {
    pub batch_size: usize,
    pub labeled_per_batch: usize,
    pub lr: f64,
    pub momentum: f64,
    pub ema_decay: f64,
    /// Mini-batches averaged by the distribution-alignment window.
    pub alignment_window: usize,
    pub alignment: bool,
    /// Random flips on the teacher's two views.
    pub view_flips: bool,
    pub augment: AugmentConfig,
    /// Total optimisation steps, warmup included.
    pub steps: usize,
    /// Share of `steps` spent on supervised-only warmup.
    pub warmup_fraction: f64,
    /// Validation interval in steps; 0 validates only at the end.
    pub eval_every: usize,
    pub seed: u64,
    /// Backbone, heads, input resolution and label codec.
    pub regressor: RegressorConfig,
}

impl Default for SSLConfig {
    fn default() -> Self {
        Self::desk_scale()
    }
}

impl SSLConfig {
    /// Small CNN at 32 px with the standard optimiser settings.
    pub fn desk_scale() -> Self {
        Self {
            batch_size: 32,
            labeled_per_batch: 4,
            lr: 0.03,
            momentum: 0.9,
            ema_decay: 0.99,
            alignment_window: 50,
            alignment: true,
            view_flips: true,
            augment: AugmentConfig::default(),
            steps: 300,
            warmup_fraction: 0.2,
            eval_every: 50,
            seed: 0,
            regressor: RegressorConfig::default(),
        }
    }

    /// ResNet18-shaped backbone at 512 px.
    pub fn full_scale() -> Self {
        Self {
            regressor: RegressorConfig {
                backbone: BackboneKind::Resnet18,
                width: 64,
                resolution: 512,
                ..RegressorConfig::default()
            },
            ..Self::desk_scale()
        }
    }

    pub fn warmup_steps(&self) -> usize {
        ((self.steps as f64 * self.warmup_fraction).round() as usize).min(self.steps)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0 < self.labeled_per_batch && self.labeled_per_batch < self.batch_size) {
            return Err(Error::Config(format!(
                "need 0 < labeled_per_batch ({}) < batch_size ({})",
                self.labeled_per_batch, self.batch_size
            )));
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return Err(Error::Config(format!("ema_decay {} outside (0, 1)", self.ema_decay)));
        }
        if self.alignment_window == 0 {
            return Err(Error::Config("alignment_window must be >= 1".into()));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("invalid learning rate or momentum".into()));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config("warmup_fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// `shadow <- decay * shadow + (1 - decay) * student`, element-wise.
pub fn ema_update(shadow: &ParamStore, student: &ParamStore, decay: f64) -> Result<()> {
    if shadow.named().len() != student.named().len() {
        return Err(Error::Shape("EMA shadow and student differ in parameter count".into()));
    }
    for ((ns, s), (nt, t)) in shadow.named().iter().zip(student.named()) {
        if ns != nt || s.dims() != t.dims() {
            return Err(Error::Shape(format!("EMA parameter `{ns}` does not match `{nt}`")));
        }
        let next = ((s.as_tensor() * decay)? + (t.as_tensor().detach() * (1.0 - decay))?)?;
        s.set(&next)?;
    }
    Ok(())
}

/// Sliding window of mini-batch means of the mixed pseudo-labels, and the
/// labeled target mean they are pulled toward.
#[derive(Clone, Debug)]
pub struct AlignmentState {
    window: usize,
    buffer: VecDeque<Vec<f64>>,
    labeled_mean: Vec<f64>,
}

impl AlignmentState {
    pub fn new(labeled_mean: Vec<f64>, window: usize) -> Self {
        Self {
            window: window.max(1),
            buffer: VecDeque::new(),
            labeled_mean,
        }
    }

    /// Mean of encoded targets over the labeled set.
    pub fn from_targets(targets: &[Vec<f64>], window: usize) -> Result<Self> {
        let first = targets
            .first()
            .ok_or_else(|| Error::Config("alignment needs at least one labeled target".into()))?;
        let mut mean = vec![0.0; first.len()];
        for t in targets {
            for (m, v) in mean.iter_mut().zip(t) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= targets.len() as f64);
        Ok(Self::new(mean, window))
    }

    pub fn labeled_mean(&self) -> &[f64] {
        &self.labeled_mean
    }

    pub fn len(&self) -> usize {
        self.buffer.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buffer.is_empty()
    }

    pub fn sliding_mean(&self) -> Option<Vec<f64>> {
        let first = self.buffer.front()?;
        let mut mean = vec![0.0; first.len()];
        for b in &self.buffer {
            for (m, v) in mean.iter_mut().zip(b) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= self.buffer.len() as f64);
        Some(mean)
    }

    /// `labeled_mean / sliding_mean` per dimension; all ones while the buffer
    /// is empty.
    pub fn factor(&self) -> Vec<f64> {
        match self.sliding_mean() {
            None => vec![1.0; self.labeled_mean.len()],
            Some(s) => self
                .labeled_mean
                .iter()
                .zip(&s)
                .map(|(l, m)| if *m > 0.0 { l / m } else { 1.0 })
                .collect(),
        }
    }

    pub fn push(&mut self, batch_mean: Vec<f64>) {
        if self.buffer.len() == self.window {
            self.buffer.pop_front();
        }
        self.buffer.push_back(batch_mean);
    }
}

/// Pseudo-label for one unlabeled image.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GuessedLabel {
    pub y_prime: Vec<f64>,
    pub y_double_prime: Vec<f64>,
    pub lambda: f64,
    /// `lambda * y' + (1 - lambda) * y''`
    pub mixed: Vec<f64>,
    pub factor: Vec<f64>,
    pub y_tilde: Vec<f64>,
}

/// Mix two teacher predictions, align, renormalise the composition and clamp
/// mass and height to the codec range.
pub fn mix_guess(
    y_prime: &[f64],
    y_double_prime: &[f64],
    lambda: f64,
    factor: &[f64],
    schema: &TaskSchema,
    codec: &LabelCodec,
) -> Result<GuessedLabel> {
    let d = schema.target_dim();
    if y_prime.len() != d || y_double_prime.len() != d || factor.len() != d {
        return Err(Error::Shape(format!("pseudo-label inputs must have {d} entries")));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Domain(format!("mixing weight {lambda} outside [0, 1]")));
    }
    let mixed: Vec<f64> = y_prime
        .iter()
        .zip(y_double_prime)
        .map(|(a, b)| lambda * a + (1.0 - lambda) * b)
        .collect();
    let mut y: Vec<f64> = mixed.iter().zip(factor).map(|(m, f)| m * f).collect();
    let k = schema.n_classes();
    y[..k].iter_mut().for_each(|v| *v = v.max(0.0));
    let sum: f64 = y[..k].iter().sum();
    if sum > 0.0 {
        y[..k].iter_mut().for_each(|v| *v /= sum);
    } else {
        y[..k].iter_mut().for_each(|v| *v = 1.0 / k as f64);
    }
    y[k..].iter_mut().for_each(|v| *v = codec.clamp_target(*v));
    Ok(GuessedLabel {
        y_prime: y_prime.to_vec(),
        y_double_prime: y_double_prime.to_vec(),
        lambda,
        mixed,
        factor: factor.to_vec(),
        y_tilde: y,
    })
}

fn random_flip(img: &RgbImage, rng: &mut impl Rng) -> RgbImage {
    let h = rng.random_bool(0.5);
    let v = rng.random_bool(0.5);
    raster::flip(img, h, v)
}

/// Guess targets for `images` (already at the teacher's resolution). The
/// returned labels carry no autograd history.
pub fn guess_labels(
    teacher: &RegressorModel,
    images: &[RgbImage],
    rng: &mut impl Rng,
    alignment: Option<&AlignmentState>,
    view_flips: bool,
) -> Result<Vec<GuessedLabel>> {
    if images.is_empty() {
        return Ok(Vec::new());
    }
    let mut views = Vec::with_capacity(2 * images.len());
    for img in images {
        for _ in 0..2 {
            views.push(if view_flips { random_flip(img, rng) } else { img.clone() });
        }
    }
    let raw = teacher.predict_raw(&views)?;
    let d = teacher.schema().target_dim();
    let factor = alignment.map(|a| a.factor()).unwrap_or_else(|| vec![1.0; d]);
    let mut out = Vec::with_capacity(images.len());
    for pair in raw.chunks(2) {
        let lambda: f64 = rng.random();
        out.push(mix_guess(&pair[0], &pair[1], lambda, &factor, teacher.schema(), teacher.codec())?);
    }
    Ok(out)
}

/// Single-image form of [`guess_labels`].
pub fn guess_label(
    teacher: &RegressorModel,
    image: &RgbImage,
    rng: &mut impl Rng,
    alignment: Option<&AlignmentState>,
) -> Result<GuessedLabel> {
    let r = teacher.config().resolution;
    let img = raster::resize(image, r, r);
    Ok(guess_labels(teacher, &[img], rng, alignment, true)?.remove(0))
}

struct EpochSampler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl EpochSampler {
    fn new(n: usize, rng: ChaCha8Rng) -> Self {
        Self {
            order: (0..n).collect(),
            pos: n,
            rng,
        }
    }

    fn next(&mut self) -> usize {
        if self.pos == self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

/// Pool indices of one mini-batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MixedBatch {
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
}

/// Draws mixed batches: epochs without replacement over each pool, reshuffled
/// every epoch. A labeled pool smaller than `labeled_per_batch` is sampled
/// with replacement instead.
pub struct BatchSampler {
    labeled: EpochSampler,
    unlabeled: Option<EpochSampler>,
    n_labeled: usize,
    labeled_per_batch: usize,
    unlabeled_per_batch: usize,
    replacement_rng: ChaCha8Rng,
    warning: Option<String>,
}

impl BatchSampler {
    pub fn new(n_labeled: usize, n_unlabeled: usize, config: &SSLConfig, seed: u64) -> Result<Self> {
        if n_labeled == 0 {
            return Err(Error::Config("labeled pool is empty".into()));
        }
        let stream = |s: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(s);
            r
        };
        let warning = (n_labeled < config.labeled_per_batch).then(|| {
            let msg = format!(
                "labeled pool has {n_labeled} items, fewer than labeled_per_batch {}; sampling with replacement",
                config.labeled_per_batch
            );
            warn!("{msg}");
            msg
        });
        Ok(Self {
            labeled: EpochSampler::new(n_labeled, stream(1)),
            unlabeled: (n_unlabeled > 0).then(|| EpochSampler::new(n_unlabeled, stream(2))),
            n_labeled,
            labeled_per_batch: config.labeled_per_batch,
            unlabeled_per_batch: config.batch_size - config.labeled_per_batch,
            replacement_rng: stream(3),
            warning,
        })
    }

    pub fn warning(&self) -> Option<&str> {
        self.warning.as_deref()
    }

    pub fn next_labeled(&mut self) -> Vec<usize> {
        (0..self.labeled_per_batch)
            .map(|_| {
                if self.warning.is_some() {
                    self.replacement_rng.random_range(0..self.n_labeled)
                } else {
                    self.labeled.next()
                }
            })
            .collect()
    }

    pub fn next_batch(&mut self) -> Result<MixedBatch> {
        let labeled = self.next_labeled();
        let unlabeled_per_batch = self.unlabeled_per_batch;
        let sampler = self
            .unlabeled
            .as_mut()
            .ok_or_else(|| Error::Config("unlabeled pool is empty".into()))?;
        let unlabeled = (0..unlabeled_per_batch).map(|_| sampler.next()).collect();
        Ok(MixedBatch { labeled, unlabeled })
    }
}

/// Student inputs and targets for one step. Images are at the model
/// resolution; `labeled_targets` are encoded.
pub struct StepInputs {
    pub labeled_images: Vec<RgbImage>,
    pub labeled_targets: Vec<Vec<f64>>,
    pub unlabeled_images: Vec<RgbImage>,
}

pub struct StepOutcome {
    pub loss: f64,
    pub guesses: Vec<GuessedLabel>,
}

/// One optimisation step: guess targets for the unlabeled items with the
/// teacher, minimise the batch RMSE, then update the EMA teacher and push the
/// mixed pseudo-label mean into the alignment window, in that order.
#[allow(clippy::too_many_arguments)]
pub fn ssl_step(
    student: &RegressorModel,
    teacher: &RegressorModel,
    optimizer: &mut impl Optimizer,
    inputs: &StepInputs,
    alignment: Option<&mut AlignmentState>,
    config: &SSLConfig,
    step: usize,
    rng: &mut impl Rng,
) -> Result<StepOutcome> {
    let guesses = guess_labels(
        teacher,
        &inputs.unlabeled_images,
        rng,
        alignment.as_deref(),
        config.view_flips,
    )?;
    let mut images: Vec<RgbImage> = inputs.labeled_images.clone();
    images.extend(inputs.unlabeled_images.iter().cloned());
    let mut targets: Vec<f64> = inputs.labeled_targets.iter().flatten().copied().collect();
    targets.extend(guesses.iter().flat_map(|g| g.y_tilde.iter().copied()));
    let x = student.prepare(&images)?;
    let d = student.schema().target_dim();
    let t = Tensor::from_vec(targets, (images.len(), d), x.device())?.to_dtype(x.dtype())?;
    let loss = supervised_loss(&student.forward(&x)?, &t)?;
    let value = scalar(&loss)?;
    if !value.is_finite() {
        return Err(Error::NonFinite {
            step,
            detail: format!(
                "batch RMSE {value} with {} labeled and {} unlabeled items",
                inputs.labeled_images.len(),
                inputs.unlabeled_images.len()
            ),
        });
    }
    optimizer.backward_step(&loss)?;
    ema_update(teacher.store(), student.store(), config.ema_decay)?;
    if let Some(a) = alignment {
        if !guesses.is_empty() {
            let mut mean = vec![0.0; d];
            for g in &guesses {
                for (m, v) in mean.iter_mut().zip(&g.mixed) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= guesses.len() as f64);
            a.push(mean);
        }
    }
    Ok(StepOutcome { loss: value, guesses })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Warmup,
    SemiSupervised,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub step: usize,
    pub phase: Phase,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationPoint {
    pub step: usize,
    /// Batch RMSE in encoded target space.
    pub rmse: f64,
    pub metrics: MetricReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub config: SSLConfig,
    pub n_labeled: usize,
    pub n_unlabeled: usize,
    pub n_validation: usize,
    pub warmup_steps: usize,
    pub losses: Vec<StepLoss>,
    pub validation: Vec<ValidationPoint>,
    pub warnings: Vec<String>,
}

impl TrainingReport {
    pub fn final_validation_rmse(&self) -> Option<f64> {
        self.validation.last().map(|v| v.rmse)
    }
}

pub struct SslData<'a> {
    pub labeled: &'a [(RgbImage, BiomassLabel)],
    pub unlabeled: &'a [RgbImage],
    pub validation: &'a [(RgbImage, BiomassLabel)],
}

pub struct TrainedRegressor {
    pub student: RegressorModel,
    pub teacher: RegressorModel,
    pub report: TrainingReport,
}

struct Augmenter {
    edge: u32,
    margin: u32,
    config: AugmentConfig,
}

impl Augmenter {
    fn new(resolution: u32, config: &AugmentConfig) -> Self {
        Self {
            edge: resolution,
            margin: if config.random_crop { resolution / 8 } else { 0 },
            config: config.clone(),
        }
    }

    fn base(&self, img: &RgbImage) -> RgbImage {
        let s = self.edge + self.margin;
        raster::resize(img, s, s)
    }

    fn apply(&self, base: &RgbImage, rng: &mut impl Rng) -> RgbImage {
        let x0 = rng.random_range(0..=self.margin);
        let y0 = rng.random_range(0..=self.margin);
        let h = self.config.horizontal_flip && rng.random_bool(0.5);
        let v = self.config.vertical_flip && rng.random_bool(0.5);
        raster::flip(&raster::crop(base, x0, y0, self.edge), h, v)
    }
}

/// Encoded-space RMSE and physical metrics of `model` on `data`.
pub fn validate(model: &RegressorModel, data: &[(RgbImage, BiomassLabel)], step: usize) -> Result<ValidationPoint> {
    let images: Vec<RgbImage> = data.iter().map(|(i, _)| i.clone()).collect();
    let raw = model.predict_raw(&images)?;
    let mut sq = 0.0;
    let mut count = 0usize;
    for (r, (_, label)) in raw.iter().zip(data) {
        let t = model.codec().encode(label, model.schema())?;
        for (a, b) in r.iter().zip(&t) {
            sq += (a - b) * (a - b);
            count += 1;
        }
    }
    let preds: Vec<BiomassLabel> = raw
        .iter()
        .map(|r| model.codec().decode(r, model.schema()))
        .collect::<Result<_>>()?;
    let gts: Vec<BiomassLabel> = data.iter().map(|(_, l)| l.clone()).collect();
    Ok(ValidationPoint {
        step,
        rmse: (sq / count.max(1) as f64).sqrt(),
        metrics: metrics::label_metrics(&preds, &gts, model.schema())?,
    })
}

/// Warmup on labeled batches, then mixed semi-supervised steps with a teacher
/// copied from the student at the phase boundary.
pub fn train(config: &SSLConfig, data: SslData<'_>) -> Result<TrainedRegressor> {
    config.validate()?;
    let schema = TaskSchema::from_name(config.regressor.schema);
    let codec = config.regressor.codec;
    if data.labeled.is_empty() {
        return Err(Error::Config("no labeled images".into()));
    }
    let warmup = config.warmup_steps();
    let ssl_steps = config.steps - warmup;
    if ssl_steps > 0 && data.unlabeled.is_empty() {
        return Err(Error::Config("semi-supervised steps requested without unlabeled images".into()));
    }
    let mut warnings = Vec::new();
    if warmup == 0 && ssl_steps > 0 {
        warnings.push("no warmup: pseudo-labels come from an untrained teacher".to_string());
    }

    let student = RegressorModel::new(&config.regressor, DType::F32)?;
    let teacher = RegressorModel::new(&config.regressor, DType::F32)?;
    let mut optimizer = Sgd::new(
        student.store().vars(),
        SgdConfig {
            lr: config.lr,
            momentum: config.momentum,
        },
    );

    let aug = Augmenter::new(config.regressor.resolution, &config.augment);
    let labeled_base: Vec<RgbImage> = data.labeled.iter().map(|(i, _)| aug.base(i)).collect();
    let labeled_targets: Vec<Vec<f64>> = data
        .labeled
        .iter()
        .map(|(_, l)| codec.encode(l, &schema))
        .collect::<Result<_>>()?;
    let unlabeled_base: Vec<RgbImage> = data.unlabeled.iter().map(|i| aug.base(i)).collect();
    let r = config.regressor.resolution;
    let validation: Vec<(RgbImage, BiomassLabel)> = data
        .validation
        .iter()
        .map(|(i, l)| (raster::resize(i, r, r), l.clone()))
        .collect();

    let mut sampler = BatchSampler::new(labeled_base.len(), unlabeled_base.len(), config, config.seed)?;
    if let Some(w) = sampler.warning() {
        warnings.push(w.to_string());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut alignment = config
        .alignment
        .then(|| AlignmentState::from_targets(&labeled_targets, config.alignment_window))
        .transpose()?;

    let mut losses = Vec::with_capacity(config.steps);
    let mut points = Vec::new();
    let maybe_validate = |model: &RegressorModel, step: usize, points: &mut Vec<ValidationPoint>| -> Result<()> {
        let due = step == config.steps || (config.eval_every > 0 && step % config.eval_every == 0);
        if due && !validation.is_empty() {
            points.push(validate(model, &validation, step)?);
        }
        Ok(())
    };

    for step in 1..=config.steps {
        let phase = if step <= warmup { Phase::Warmup } else { Phase::SemiSupervised };
        if step == warmup + 1 {
            teacher.store().restore(&student.store().snapshot()?)?;
        }
        let (labeled_idx, unlabeled_idx) = match phase {
            Phase::Warmup => (sampler.next_labeled(), Vec::new()),
            Phase::SemiSupervised => {
                let b = sampler.next_batch()?;
                (b.labeled, b.unlabeled)
            }
        };
        let inputs = StepInputs {
            labeled_images: labeled_idx.iter().map(|&i| aug.apply(&labeled_base[i], &mut rng)).collect(),
            labeled_targets: labeled_idx.iter().map(|&i| labeled_targets[i].clone()).collect(),
            unlabeled_images: unlabeled_idx.iter().map(|&i| aug.apply(&unlabeled_base[i], &mut rng)).collect(),
        };
        let outcome = ssl_step(&student, &teacher, &mut optimizer, &inputs, alignment.as_mut(), config, step, &mut rng)?;
        losses.push(StepLoss {
            step,
            phase,
            loss: outcome.loss,
        });
        maybe_validate(&student, step, &mut points)?;
    }

    let report = TrainingReport {
        config: config.clone(),
        n_labeled: data.labeled.len(),
        n_unlabeled: data.unlabeled.len(),
        n_validation: data.validation.len(),
        warmup_steps: warmup,
        losses,
        validation: points,
        warnings,
    };
    Ok(TrainedRegressor {
        student,
        teacher,
        report,
    })
}

/// Flattened parameter values, handy for bit-level comparisons in tests.
pub fn flat_parameters(store: &ParamStore) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for (_, v) in store.named() {
        out.extend(to_f64_vec(v.as_tensor())?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_model::SchemaName;

    #[test]
    fn ema_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut shadow = ParamStore::new(DType::F64);
        shadow.zeros("w", &[3]).unwrap();
        let mut student = ParamStore::new(DType::F64);
        let w = student.zeros("w", &[3]).unwrap();
        w.set(&(w.as_tensor() + 1.0).unwrap()).unwrap();
        for n in 1..=200 {
            ema_update(&shadow, &student, 0.99).unwrap();
            let expect = 1.0 - 0.99f64.powi(n);
            let got = flat_parameters(&shadow).unwrap();
            assert!(got.iter().all(|g| (g - expect).abs() < 1e-6));
        }
        // Degenerate decay copies the student.
        let mut s2 = ParamStore::new(DType::F64);
        s2.normal("w", &[3], 1.0, &mut rng).unwrap();
        ema_update(&s2, &student, 0.0).unwrap();
        assert_eq!(flat_parameters(&s2).unwrap(), vec![1.0; 3]);
        let mut other = ParamStore::new(DType::F64);
        other.zeros("v", &[3]).unwrap();
        assert!(ema_update(&other, &student, 0.5).is_err());
    }

    #[test]
    fn mixing_alignment_and_normalisation() {
        let s = TaskSchema::irish();
        let c = LabelCodec::default();
        let y = [0.5, 0.3, 0.2, 0.4, 0.3];
        for lambda in [0.0, 0.37, 1.0] {
            let g = mix_guess(&y, &y, lambda, &[1.0; 5], &s, &c).unwrap();
            for (a, b) in g.y_tilde.iter().zip(&y) {
                assert!((a - b).abs() < 1e-15);
            }
        }
        let g = mix_guess(&[0.2, 0.2, 0.1, 0.5, 0.5], &[0.2, 0.2, 0.1, 0.5, 0.5], 0.5, &[1.0; 5], &s, &c).unwrap();
        assert!((g.y_tilde[0] - 0.4).abs() < 1e-15 && (g.y_tilde[2] - 0.2).abs() < 1e-15);
        let g = mix_guess(&y, &y, 0.5, &[1.0, 1.0, 1.0, 3.0, 0.001], &s, &c).unwrap();
        assert_eq!(g.y_tilde[3], 0.99);
        assert_eq!(g.y_tilde[4], 0.01);
        assert!(mix_guess(&y, &y, 1.5, &[1.0; 5], &s, &c).is_err());
    }

    #[test]
    fn alignment_factor() {
        let mut a = AlignmentState::new(vec![0.5, 0.2], 3);
        assert_eq!(a.factor(), vec![1.0, 1.0]);
        a.push(vec![0.25, 0.4]);
        assert_eq!(a.factor(), vec![2.0, 0.5]);
        for _ in 0..5 {
            a.push(vec![0.5, 0.2]);
        }
        assert_eq!(a.len(), 3);
        assert!(a.factor().iter().all(|f| (f - 1.0).abs() < 1e-12));
    }

    #[test]
    fn sampler_contracts() {
        let cfg = SSLConfig::default();
        let mut s = BatchSampler::new(10, 50, &cfg, 4).unwrap();
        assert!(s.warning().is_none());
        let b = s.next_batch().unwrap();
        assert_eq!((b.labeled.len(), b.unlabeled.len()), (4, 28));
        let mut u = b.unlabeled.clone();
        u.sort();
        u.dedup();
        assert_eq!(u.len(), 28);
        // Epochs: ten labeled draws cover the pool exactly once.
        let mut s = BatchSampler::new(10, 50, &cfg, 4).unwrap();
        let mut seen: Vec<usize> = (0..2).flat_map(|_| s.next_batch().unwrap().labeled).collect();
        seen.extend(s.next_labeled().into_iter().take(2));
        seen.sort();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());

        let mut a = BatchSampler::new(10, 50, &cfg, 9).unwrap();
        let mut b = BatchSampler::new(10, 50, &cfg, 9).unwrap();
        for _ in 0..5 {
            assert_eq!(a.next_batch().unwrap(), b.next_batch().unwrap());
        }
        let mut small = BatchSampler::new(2, 50, &cfg, 0).unwrap();
        assert!(small.warning().unwrap().contains("with replacement"));
        assert!(small.next_batch().unwrap().labeled.iter().all(|&i| i < 2));
    }

    #[test]
    fn config_invariants() {
        assert!(SSLConfig::default().validate().is_ok());
        assert_eq!(SSLConfig::default().warmup_steps(), 60);
        assert_eq!(SSLConfig::full_scale().regressor.resolution, 512);
        for bad in [
            SSLConfig { labeled_per_batch: 0, ..Default::default() },
            SSLConfig { labeled_per_batch: 32, ..Default::default() },
            SSLConfig { ema_decay: 1.0, ..Default::default() },
            SSLConfig { alignment_window: 0, ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    fn tiny_config() -> SSLConfig {
        SSLConfig {
            batch_size: 6,
            labeled_per_batch: 2,
            steps: 6,
            eval_every: 3,
            regressor: RegressorConfig {
                schema: SchemaName::Irish,
                width: 2,
                resolution: 16,
                ..Default::default()
            },
            ..SSLConfig::desk_scale()
        }
    }

    fn images(n: usize, seed: u64) -> Vec<RgbImage> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| RgbImage::from_fn(20, 20, |_, _| raster::Rgb([rng.random(), rng.random(), rng.random()])))
            .collect()
    }

    fn labeled(n: usize, seed: u64) -> Vec<(RgbImage, BiomassLabel)> {
        images(n, seed)
            .into_iter()
            .enumerate()
            .map(|(i, img)| {
                let g = 0.5 + 0.04 * i as f64;
                (
                    img,
                    BiomassLabel {
                        composition: Some(vec![g, 0.9 - g, 0.1]),
                        herbage_mass: Some(800.0 + 100.0 * i as f64),
                        height: Some(4.0 + i as f64),
                    },
                )
            })
            .collect()
    }

    #[test]
    fn unlabeled_loss_is_student_teacher_rmse() {
        let cfg = SSLConfig {
            view_flips: false,
            alignment: false,
            ..tiny_config()
        };
        let student = RegressorModel::new(&cfg.regressor, DType::F32).unwrap();
        let teacher = RegressorModel::new(
            &RegressorConfig {
                init_seed: 99,
                ..cfg.regressor.clone()
            },
            DType::F32,
        )
        .unwrap();
        let img = raster::resize(&images(1, 3)[0], 16, 16);
        let s = student.predict_raw(&[img.clone()]).unwrap().remove(0);
        let t = teacher.predict_raw(&[img.clone()]).unwrap().remove(0);
        let expect = (s.iter().zip(&t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / s.len() as f64).sqrt();
        let mut opt = Sgd::new(student.store().vars(), SgdConfig { lr: 0.0, momentum: 0.0 });
        let inputs = StepInputs {
            labeled_images: vec![],
            labeled_targets: vec![],
            unlabeled_images: vec![img],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let teacher_before = flat_parameters(teacher.store()).unwrap();
        let out = ssl_step(&student, &teacher, &mut opt, &inputs, None, &cfg, 1, &mut rng).unwrap();
        assert!((out.loss - expect).abs() < 1e-6, "{} vs {expect}", out.loss);
        // The only change to the teacher is the EMA update.
        let student_now = flat_parameters(student.store()).unwrap();
        let teacher_now = flat_parameters(teacher.store()).unwrap();
        for ((b, s), n) in teacher_before.iter().zip(&student_now).zip(&teacher_now) {
            let expect = (0.99 * *b as f32 as f64) as f32 + (0.01 * *s) as f32;
            assert!((expect as f64 - n).abs() < 1e-6);
        }
    }

    #[test]
    fn training_runs_and_is_deterministic() {
        let cfg = tiny_config();
        let lab = labeled(4, 1);
        let unl = images(8, 2);
        let val = labeled(3, 3);
        let run = || {
            train(
                &cfg,
                SslData {
                    labeled: &lab,
                    unlabeled: &unl,
                    validation: &val,
                },
            )
            .unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.report, b.report);
        assert_eq!(a.report.losses.len(), 6);
        assert_eq!(a.report.warmup_steps, 1);
        assert_eq!(a.report.losses[0].phase, Phase::Warmup);
        assert_eq!(a.report.losses[1].phase, Phase::SemiSupervised);
        assert_eq!(a.report.validation.iter().map(|v| v.step).collect::<Vec<_>>(), vec![3, 6]);
        assert!(a.student.store().bit_equal(b.student.store()).unwrap());
    }

    #[test]
    fn supervised_only_matches_between_modes() {
        // With all steps in warmup no unlabeled data is needed, and the run
        // equals a plain supervised run.
        let cfg = SSLConfig {
            warmup_fraction: 1.0,
            ..tiny_config()
        };
        let lab = labeled(4, 1);
        let r = train(
            &cfg,
            SslData {
                labeled: &lab,
                unlabeled: &[],
                validation: &[],
            },
        )
        .unwrap();
        assert!(r.report.losses.iter().all(|l| l.phase == Phase::Warmup));

        let untrained = SSLConfig {
            warmup_fraction: 0.0,
            ..tiny_config()
        };
        let unl = images(4, 5);
        let r = train(
            &untrained,
            SslData {
                labeled: &lab,
                unlabeled: &unl,
                validation: &[],
            },
        )
        .unwrap();
        assert!(r.report.warnings.iter().any(|w| w.contains("untrained teacher")));
    }
}
