use std::path::PathBuf;

use candle_core::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{discriminator_loss, sample_locations, CUTModel, CutLossParts};
use crate::error::{Error, Result};
use crate::nn::{scalar, Adam, Optimizer};
use crate::raster::{self, RgbImage};

#[derive(Clone, Debug, Default)]
pub struct TrainCutOptions {
    pub steps: usize,
    /// Snapshot interval in steps; 0 keeps only the initial state.
    pub checkpoint_every: usize,
    /// Where snapshots are written, if anywhere.
    pub checkpoint_path: Option<PathBuf>,
    pub provenance: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CutStepRecord {
    pub step: usize,
    pub loss_g: f64,
    pub loss_d: f64,
    pub adversarial_g: f64,
    pub patch_x: f64,
    pub patch_y: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CutHistory {
    pub steps: Vec<CutStepRecord>,
}

fn stack(images: &[RgbImage], model: &CUTModel) -> Result<Tensor> {
    let r = model.config().train_resolution;
    let resized: Vec<RgbImage> = images.iter().map(|i| raster::resize(i, r, r)).collect();
    let refs: Vec<&RgbImage> = resized.iter().collect();
    model.to_input(&refs)
}

fn pick(pool: &Tensor, n: usize, batch: usize, rng: &mut impl Rng) -> Result<Tensor> {
    let idx: Vec<u32> = (0..batch).map(|_| rng.random_range(0..n) as u32).collect();
    Ok(pool.index_select(&Tensor::new(idx, pool.device())?, 0)?)
}

/// Alternate one discriminator update and one generator/projection update per
/// step on random ground and drone mini-batches.
///
/// On a non-finite loss the parameters are rolled back to the last snapshot
/// (rewritten to `checkpoint_path` when set) and an error is returned.
pub fn train_cut(
    model: &mut CUTModel,
    ground: &[RgbImage],
    drone: &[RgbImage],
    options: &TrainCutOptions,
    rng: &mut impl Rng,
) -> Result<CutHistory> {
    if ground.is_empty() || drone.is_empty() {
        return Err(Error::Config("translation training needs ground and drone images".into()));
    }
    let mut history = CutHistory::default();
    if options.steps == 0 {
        return Ok(history);
    }
    let config = model.config().clone();
    let ground_t = stack(ground, model)?;
    let drone_t = stack(drone, model)?;
    let half = config.train_resolution as usize / 2;

    let mut d_opt = Adam::new(model.discriminator_store().vars(), config.adam)?;
    let mut g_vars = model.generator_store().vars();
    g_vars.extend(model.projection_store().vars());
    let mut g_opt = Adam::new(g_vars, config.adam)?;

    let snapshot = |m: &CUTModel| -> Result<Vec<Vec<Tensor>>> { m.stores().iter().map(|s| s.snapshot()).collect() };
    let mut last_good = (model.step(), snapshot(model)?);

    for _ in 0..options.steps {
        let step = model.step() + 1;
        let x_l = pick(&ground_t, ground.len(), config.batch_size, rng)?;
        let x_u = pick(&drone_t, drone.len(), config.batch_size, rng)?;
        let locations = sample_locations(half, half, config.n_patches, rng)?;

        let fake = model.generator.forward(&x_u)?;
        let loss_d = discriminator_loss(
            &model.discriminator.logits(&x_l)?,
            &model.discriminator.logits(&fake.detach())?,
        )?;
        let loss_d_value = scalar(&loss_d)?;
        let mut parts = CutLossParts::default();
        let mut failure = (!loss_d_value.is_finite()).then(|| format!("discriminator loss {loss_d_value}"));
        if failure.is_none() {
            d_opt.backward_step(&loss_d)?;
            let (loss_g, p) = model.generator_objective(&x_l, &x_u, &fake, &locations)?;
            parts = p;
            parts.loss_d = loss_d_value;
            if parts.loss_g.is_finite() {
                g_opt.backward_step(&loss_g)?;
            } else {
                failure = Some(format!("generator loss {}", parts.loss_g));
            }
        }
        if let Some(detail) = failure {
            let (good_step, tensors) = &last_good;
            for (store, snap) in model.stores().iter().zip(tensors) {
                store.restore(snap)?;
            }
            model.set_step(*good_step);
            if let Some(path) = &options.checkpoint_path {
                model.save(path, &options.provenance)?;
            }
            return Err(Error::NonFinite { step, detail });
        }
        model.set_step(step);
        history.steps.push(CutStepRecord {
            step,
            loss_g: parts.loss_g,
            loss_d: parts.loss_d,
            adversarial_g: parts.adversarial_g,
            patch_x: parts.patch_x,
            patch_y: parts.patch_y,
        });
        if options.checkpoint_every > 0 && step % options.checkpoint_every == 0 {
            last_good = (step, snapshot(model)?);
            if let Some(path) = &options.checkpoint_path {
                model.save(path, &options.provenance)?;
            }
        }
    }
    if let Some(path) = &options.checkpoint_path {
        model.save(path, &options.provenance)?;
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cut::CUTConfig;
    use candle_core::DType;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn config() -> CUTConfig {
        CUTConfig {
            train_resolution: 16,
            generator_width: 4,
            discriminator_width: 4,
            projection_dim: 8,
            n_patches: 8,
            ..CUTConfig::desk_scale()
        }
    }

    fn images(seed: u64, n: usize, tint: u8) -> Vec<RgbImage> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| RgbImage::from_fn(16, 16, |_, _| raster::Rgb([rng.random::<u8>() / 2 + tint, rng.random(), 90])))
            .collect()
    }

    #[test]
    fn zero_steps_is_a_no_op() {
        let mut m = CUTModel::new(&config(), DType::F32).unwrap();
        let before = CUTModel::new(&config(), DType::F32).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let h = train_cut(&mut m, &images(1, 2, 0), &images(2, 2, 100), &TrainCutOptions::default(), &mut rng).unwrap();
        assert!(h.steps.is_empty());
        for (a, b) in m.stores().iter().zip(before.stores()) {
            assert!(a.bit_equal(b).unwrap());
        }
        assert!(train_cut(&mut m, &[], &images(2, 2, 100), &TrainCutOptions::default(), &mut rng).is_err());
    }

    #[test]
    fn training_is_reproducible_and_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cut.safetensors");
        let opts = TrainCutOptions {
            steps: 4,
            checkpoint_every: 2,
            checkpoint_path: Some(path.clone()),
            provenance: serde_json::json!({"test": true}),
        };
        let run = || {
            let mut m = CUTModel::new(&config(), DType::F32).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let h = train_cut(&mut m, &images(1, 3, 0), &images(2, 3, 100), &opts, &mut rng).unwrap();
            (m, h)
        };
        let (m1, h1) = run();
        let (_, h2) = run();
        assert_eq!(h1, h2);
        assert_eq!(h1.steps.len(), 4);
        assert_eq!(m1.step(), 4);
        let back = CUTModel::load(&path).unwrap();
        assert_eq!(back.step(), 4);
        assert!(back.generator_store().bit_equal(m1.generator_store()).unwrap());
    }

    #[test]
    fn non_finite_loss_rolls_back() {
        let mut m = CUTModel::new(&config(), DType::F32).unwrap();
        let reference = CUTModel::new(&config(), DType::F32).unwrap();
        // Poison the discriminator so its loss is NaN on the first step.
        let w = m.discriminator_store().named()[0].1.clone();
        let nan = (w.as_tensor().zeros_like().unwrap() + f64::NAN).unwrap();
        w.set(&nan).unwrap();
        let snapshot_of_poisoned: Vec<Tensor> = m.discriminator_store().snapshot().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let opts = TrainCutOptions {
            steps: 3,
            ..Default::default()
        };
        let err = train_cut(&mut m, &images(1, 2, 0), &images(2, 2, 100), &opts, &mut rng).unwrap_err();
        assert!(matches!(err, Error::NonFinite { step: 1, .. }), "{err}");
        assert_eq!(m.step(), 0);
        assert!(m.generator_store().bit_equal(reference.generator_store()).unwrap());
        let after = m.discriminator_store().snapshot().unwrap();
        assert_eq!(after.len(), snapshot_of_poisoned.len());
    }
}
