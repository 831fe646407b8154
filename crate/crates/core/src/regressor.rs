//! Biomass regressor: a convolutional backbone with one head per predicted
//! quantity, and the codec between physical labels and network targets.
//!
//! Targets are laid out as `[composition..., mass?, height?]` following the
//! task schema. Composition goes through a softmax, mass and height through a
//! sigmoid.

use std::path::Path;

use candle_core::{DType, Tensor, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data_model::{BiomassLabel, SchemaName, TaskSchema};
use crate::error::{Error, Result};
use crate::nn::{sigmoid, softmax_last, to_f64_vec, Conv2d, Linear, Padding, ParamStore};
use crate::raster::{self, PixelScale, RgbImage};

pub const CHECKPOINT_KIND: &str = "regressor";

/// Maps herbage mass and height to sigmoid-range targets:
/// `clamp(value / scale + offset)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelCodec {
    pub mass_scale: f64,
    pub height_scale: f64,
    pub offset: f64,
    pub clamp: (f64, f64),
}

impl Default for LabelCodec {
    fn default() -> Self {
        Self {
            mass_scale: 4000.0,
            height_scale: 20.0,
            offset: 0.2,
            clamp: (0.01, 0.99),
        }
    }
}

impl LabelCodec {
    pub fn clamp_target(&self, v: f64) -> f64 {
        v.clamp(self.clamp.0, self.clamp.1)
    }

    pub fn encode_mass(&self, mass: f64) -> f64 {
        self.clamp_target(mass / self.mass_scale + self.offset)
    }

    pub fn encode_height(&self, height: f64) -> f64 {
        self.clamp_target(height / self.height_scale + self.offset)
    }

    pub fn decode_mass(&self, raw: f64) -> f64 {
        ((raw - self.offset) * self.mass_scale).max(0.0)
    }

    pub fn decode_height(&self, raw: f64) -> f64 {
        ((raw - self.offset) * self.height_scale).max(0.0)
    }

    /// Target vector for a label that carries every quantity the schema
    /// predicts.
    pub fn encode(&self, label: &BiomassLabel, schema: &TaskSchema) -> Result<Vec<f64>> {
        let comp = label
            .composition
            .as_ref()
            .ok_or_else(|| Error::Domain("label has no composition".into()))?;
        if comp.len() != schema.n_classes() {
            return Err(Error::Shape(format!(
                "composition has {} entries, schema expects {}",
                comp.len(),
                schema.n_classes()
            )));
        }
        let mut out = comp.clone();
        if schema.has_mass_head {
            let m = label
                .herbage_mass
                .ok_or_else(|| Error::Domain("label has no herbage mass".into()))?;
            if !(m >= 0.0) {
                return Err(Error::Domain(format!("negative herbage mass {m}")));
            }
            out.push(self.encode_mass(m));
        }
        if schema.has_height_head {
            let h = label
                .height
                .ok_or_else(|| Error::Domain("label has no height".into()))?;
            if !(h >= 0.0) {
                return Err(Error::Domain(format!("negative height {h}")));
            }
            out.push(self.encode_height(h));
        }
        Ok(out)
    }

    pub fn decode(&self, raw: &[f64], schema: &TaskSchema) -> Result<BiomassLabel> {
        if raw.len() != schema.target_dim() {
            return Err(Error::Shape(format!(
                "raw output has {} values, schema expects {}",
                raw.len(),
                schema.target_dim()
            )));
        }
        let k = schema.n_classes();
        let mut label = BiomassLabel {
            composition: Some(raw[..k].to_vec()),
            herbage_mass: None,
            height: None,
        };
        let mut i = k;
        if schema.has_mass_head {
            label.herbage_mass = Some(self.decode_mass(raw[i]));
            i += 1;
        }
        if schema.has_height_head {
            label.height = Some(self.decode_height(raw[i]));
        }
        Ok(label)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    /// Four stride-2 conv blocks and global average pooling.
    SmallCnn,
    /// ResNet18 layout (2-2-2-2 basic blocks), without batch normalisation.
    Resnet18,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegressorConfig {
    pub schema: SchemaName,
    pub backbone: BackboneKind,
    /// Channels of the first block; later blocks widen from here.
    pub width: usize,
    /// Square input edge in pixels.
    pub resolution: u32,
    pub init_seed: u64,
    pub codec: LabelCodec,
}

impl Default for RegressorConfig {
    fn default() -> Self {
        Self {
            schema: SchemaName::Irish,
            backbone: BackboneKind::SmallCnn,
            width: 8,
            resolution: 32,
            init_seed: 0,
            codec: LabelCodec::default(),
        }
    }
}

struct BasicBlock {
    conv1: Conv2d,
    conv2: Conv2d,
    shortcut: Option<Conv2d>,
}

impl BasicBlock {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.conv2.forward(&self.conv1.forward(x)?.relu()?)?;
        let skip = match &self.shortcut {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok((skip + y)?.relu()?)
    }
}

enum Backbone {
    Small(Vec<Conv2d>),
    Resnet { stem: Conv2d, blocks: Vec<BasicBlock> },
}

impl Backbone {
    fn small(store: &mut ParamStore, width: usize, rng: &mut ChaCha8Rng) -> Result<(Self, usize)> {
        let chans = [3, width, 2 * width, 2 * width, 4 * width];
        let mut convs = Vec::new();
        for i in 0..4 {
            convs.push(Conv2d::new(
                store,
                &format!("backbone.block{i}"),
                chans[i],
                chans[i + 1],
                3,
                2,
                Padding::Zeros(1),
                Conv2d::he_std(chans[i], 3),
                rng,
            )?);
        }
        Ok((Backbone::Small(convs), chans[4]))
    }

    fn resnet18(store: &mut ParamStore, width: usize, rng: &mut ChaCha8Rng) -> Result<(Self, usize)> {
        let stem = Conv2d::new(store, "backbone.stem", 3, width, 3, 1, Padding::Zeros(1), Conv2d::he_std(3, 3), rng)?;
        let mut blocks = Vec::new();
        let mut cin = width;
        for stage in 0..4 {
            let cout = width << stage;
            for b in 0..2 {
                let stride = if stage > 0 && b == 0 { 2 } else { 1 };
                let name = format!("backbone.layer{}.{b}", stage + 1);
                let conv1 = Conv2d::new(
                    store,
                    &format!("{name}.conv1"),
                    cin,
                    cout,
                    3,
                    stride,
                    Padding::Zeros(1),
                    Conv2d::he_std(cin, 3),
                    rng,
                )?;
                // Residual branches start small so the un-normalised stack
                // stays well conditioned.
                let conv2 = Conv2d::new(
                    store,
                    &format!("{name}.conv2"),
                    cout,
                    cout,
                    3,
                    1,
                    Padding::Zeros(1),
                    0.1 * Conv2d::he_std(cout, 3),
                    rng,
                )?;
                let shortcut = if stride != 1 || cin != cout {
                    Some(Conv2d::new(
                        store,
                        &format!("{name}.shortcut"),
                        cin,
                        cout,
                        1,
                        stride,
                        Padding::Zeros(0),
                        Conv2d::he_std(cin, 1),
                        rng,
                    )?)
                } else {
                    None
                };
                blocks.push(BasicBlock { conv1, conv2, shortcut });
                cin = cout;
            }
        }
        Ok((Backbone::Resnet { stem, blocks }, cin))
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        match self {
            Backbone::Small(convs) => {
                for c in convs {
                    h = c.forward(&h)?.relu()?;
                }
            }
            Backbone::Resnet { stem, blocks } => {
                h = stem.forward(&h)?.relu()?;
                for b in blocks {
                    h = b.forward(&h)?;
                }
            }
        }
        Ok(h.mean((2, 3))?)
    }
}

pub struct RegressorModel {
    config: RegressorConfig,
    schema: TaskSchema,
    store: ParamStore,
    backbone: Backbone,
    composition_head: Linear,
    mass_head: Option<Linear>,
    height_head: Option<Linear>,
}

impl RegressorModel {
    pub fn new(config: &RegressorConfig, dtype: DType) -> Result<Self> {
        if config.width == 0 {
            return Err(Error::Config("regressor width must be > 0".into()));
        }
        if config.resolution < 16 {
            return Err(Error::Config(format!(
                "regressor resolution must be >= 16, got {}",
                config.resolution
            )));
        }
        let schema = TaskSchema::from_name(config.schema);
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut store = ParamStore::new(dtype);
        let (backbone, feat) = match config.backbone {
            BackboneKind::SmallCnn => Backbone::small(&mut store, config.width, &mut rng)?,
            BackboneKind::Resnet18 => Backbone::resnet18(&mut store, config.width, &mut rng)?,
        };
        let std = (1.0 / feat as f64).sqrt();
        let composition_head = Linear::new(&mut store, "head.composition", feat, schema.n_classes(), std, &mut rng)?;
        let mass_head = if schema.has_mass_head {
            Some(Linear::new(&mut store, "head.mass", feat, 1, std, &mut rng)?)
        } else {
            None
        };
        let height_head = if schema.has_height_head {
            Some(Linear::new(&mut store, "head.height", feat, 1, std, &mut rng)?)
        } else {
            None
        };
        Ok(Self {
            config: config.clone(),
            schema,
            store,
            backbone,
            composition_head,
            mass_head,
            height_head,
        })
    }

    pub fn config(&self) -> &RegressorConfig {
        &self.config
    }

    pub fn schema(&self) -> &TaskSchema {
        &self.schema
    }

    pub fn codec(&self) -> &LabelCodec {
        &self.config.codec
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// `(N, 3, R, R) -> (N, target_dim)` raw outputs.
    pub fn forward(&self, images: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = images.dims4()?;
        let r = self.config.resolution as usize;
        if c != 3 || h != r || w != r {
            return Err(Error::Shape(format!(
                "regressor expects (N, 3, {r}, {r}), got {:?}",
                images.dims()
            )));
        }
        let f = self.backbone.forward(images)?;
        let mut parts = vec![softmax_last(&self.composition_head.forward(&f)?)?];
        if let Some(head) = &self.mass_head {
            parts.push(sigmoid(&head.forward(&f)?)?);
        }
        if let Some(head) = &self.height_head {
            parts.push(sigmoid(&head.forward(&f)?)?);
        }
        Ok(Tensor::cat(&parts, D::Minus1)?)
    }

    /// Resize to the configured resolution and stack into an input batch.
    pub fn prepare(&self, images: &[RgbImage]) -> Result<Tensor> {
        let r = self.config.resolution;
        let resized: Vec<RgbImage> = images.iter().map(|i| raster::resize(i, r, r)).collect();
        let refs: Vec<&RgbImage> = resized.iter().collect();
        raster::to_tensor(&refs, PixelScale::Standardized, self.store.dtype(), self.store.device())
    }

    /// Raw outputs per image, in chunks to bound memory.
    pub fn predict_raw(&self, images: &[RgbImage]) -> Result<Vec<Vec<f64>>> {
        let dim = self.schema.target_dim();
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(64) {
            let y = to_f64_vec(&self.forward(&self.prepare(chunk)?)?)?;
            out.extend(y.chunks(dim).map(|r| r.to_vec()));
        }
        Ok(out)
    }

    pub fn predict(&self, images: &[RgbImage]) -> Result<Vec<BiomassLabel>> {
        self.predict_raw(images)?
            .iter()
            .map(|r| self.config.codec.decode(r, &self.schema))
            .collect()
    }

    /// `provenance` is stored next to the model configuration.
    pub fn save(&self, path: &Path, step: usize, provenance: &serde_json::Value) -> Result<()> {
        let config = serde_json::json!({ "regressor": self.config, "provenance": provenance });
        checkpoint::save(path, CHECKPOINT_KIND, step, &config, &[&self.store])
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = checkpoint::load(path)?;
        ck.expect_kind(CHECKPOINT_KIND)?;
        let config: RegressorConfig = serde_json::from_value(ck.config["regressor"].clone())
            .map_err(|e| Error::json("regressor checkpoint config", e))?;
        let model = Self::new(&config, DType::F32)?;
        model.store.load_named(&ck.tensors)?;
        Ok(model)
    }
}

/// Root of the mean squared error over every element of the `(N, D)` batch.
pub fn supervised_loss(outputs: &Tensor, targets: &Tensor) -> Result<Tensor> {
    if outputs.dims() != targets.dims() {
        return Err(Error::Shape(format!(
            "outputs {:?} vs targets {:?}",
            outputs.dims(),
            targets.dims()
        )));
    }
    Ok((outputs - targets)?.sqr()?.mean_all()?.sqrt()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::scalar;
    use candle_core::Device;
    use proptest::prelude::*;
    use rand::Rng;

    fn irish_label(mass: f64, height: f64) -> BiomassLabel {
        BiomassLabel {
            composition: Some(vec![0.7, 0.2, 0.1]),
            herbage_mass: Some(mass),
            height: Some(height),
        }
    }

    #[test]
    fn encode_examples() {
        let c = LabelCodec::default();
        let s = TaskSchema::irish();
        assert!((c.encode(&irish_label(0.0, 0.0), &s).unwrap()[3] - 0.2).abs() < 1e-15);
        assert!((c.encode(&irish_label(2000.0, 0.0), &s).unwrap()[3] - 0.7).abs() < 1e-15);
        assert_eq!(c.encode(&irish_label(4000.0, 0.0), &s).unwrap()[3], 0.99);
        let t = c.encode(&irish_label(1000.0, 5.0), &s).unwrap();
        assert_eq!(&t[..3], &[0.7, 0.2, 0.1]);
        assert!((t[4] - 0.45).abs() < 1e-15);
        assert!(c.encode(&irish_label(-1.0, 0.0), &s).is_err());
    }

    #[test]
    fn decode_examples() {
        let c = LabelCodec::default();
        let s = TaskSchema::irish();
        let l = c.decode(&[0.6, 0.3, 0.1, 0.7, 0.45], &s).unwrap();
        assert!((l.herbage_mass.unwrap() - 2000.0).abs() < 1e-9);
        assert!((l.height.unwrap() - 5.0).abs() < 1e-9);
        assert_eq!(c.decode(&[0.6, 0.3, 0.1, 0.15, 0.1], &s).unwrap().herbage_mass, Some(0.0));

        let gc = TaskSchema::grassclover();
        let l = c.decode(&[0.5, 0.2, 0.2, 0.1], &gc).unwrap();
        assert!((l.total_clover(&gc).unwrap() - 0.4).abs() < 1e-15);
        assert!(l.herbage_mass.is_none());
    }

    fn tiny_model(schema: SchemaName, dtype: DType) -> RegressorModel {
        let cfg = RegressorConfig {
            schema,
            width: 2,
            resolution: 16,
            init_seed: 3,
            ..Default::default()
        };
        RegressorModel::new(&cfg, dtype).unwrap()
    }

    fn random_batch(n: usize, r: usize, seed: u64, dtype: DType) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..n * 3 * r * r).map(|_| rng.random_range(-2.0..2.0)).collect();
        Tensor::from_vec(data, (n, 3, r, r), &Device::Cpu).unwrap().to_dtype(dtype).unwrap()
    }

    #[test]
    fn forward_contracts() {
        for schema in [SchemaName::Irish, SchemaName::Grassclover] {
            let m = tiny_model(schema, DType::F64);
            let x = random_batch(3, 16, 1, DType::F64);
            let y: Vec<Vec<f64>> = m.forward(&x).unwrap().to_vec2().unwrap();
            let k = m.schema().n_classes();
            for row in &y {
                assert_eq!(row.len(), m.schema().target_dim());
                assert!((row[..k].iter().sum::<f64>() - 1.0).abs() < 1e-6);
                assert!(row[k..].iter().all(|v| *v > 0.0 && *v < 1.0));
            }
            // Permuting the batch permutes the outputs.
            let perm = Tensor::new(&[2u32, 0, 1], &Device::Cpu).unwrap();
            let yp: Vec<Vec<f64>> = m.forward(&x.index_select(&perm, 0).unwrap()).unwrap().to_vec2().unwrap();
            assert_eq!(yp[0], y[2]);
            assert_eq!(yp[1], y[0]);
        }
        let m = tiny_model(SchemaName::Irish, DType::F64);
        assert!(m.forward(&random_batch(1, 24, 1, DType::F64)).is_err());
    }

    #[test]
    fn resnet_backbone_runs() {
        let cfg = RegressorConfig {
            backbone: BackboneKind::Resnet18,
            width: 2,
            resolution: 16,
            ..Default::default()
        };
        let m = RegressorModel::new(&cfg, DType::F32).unwrap();
        let y = m.forward(&random_batch(2, 16, 4, DType::F32)).unwrap();
        assert_eq!(y.dims(), &[2, 5]);
        // 1 stem + 8 blocks * 2 convs + 3 projections, each weight and bias
        assert_eq!(m.store().named().len(), 2 * (1 + 16 + 3) + 6);
    }

    #[test]
    fn loss_examples_and_oracle() {
        let dev = Device::Cpu;
        let t = Tensor::new(&[[0.3f64, 0.5, 0.2], [0.1, 0.1, 0.8]], &dev).unwrap();
        assert_eq!(scalar(&supervised_loss(&t, &t).unwrap()).unwrap(), 0.0);
        let shifted = (&t + 0.1).unwrap();
        assert!((scalar(&supervised_loss(&shifted, &t).unwrap()).unwrap() - 0.1).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a: Vec<f64> = (0..40).map(|_| rng.random()).collect();
        let b: Vec<f64> = (0..40).map(|_| rng.random()).collect();
        let mut sq = 0.0;
        for i in 0..40 {
            sq += (a[i] - b[i]) * (a[i] - b[i]);
        }
        let oracle = (sq / 40.0).sqrt();
        let ta = Tensor::from_vec(a, (8, 5), &dev).unwrap();
        let tb = Tensor::from_vec(b, (8, 5), &dev).unwrap();
        assert!((scalar(&supervised_loss(&ta, &tb).unwrap()).unwrap() - oracle).abs() < 1e-7);
        assert!(supervised_loss(&ta, &t).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = tiny_model(SchemaName::Irish, DType::F32);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.safetensors");
        m.save(&path, 5, &serde_json::json!({"seed": 1})).unwrap();
        let back = RegressorModel::load(&path).unwrap();
        assert!(back.store().bit_equal(m.store()).unwrap());
        assert_eq!(back.config(), m.config());
    }

    proptest! {
        #[test]
        fn codec_round_trip(mass in 0.0f64..3000.0, height in 0.0f64..15.0) {
            let c = LabelCodec::default();
            let s = TaskSchema::irish();
            let l = irish_label(mass, height);
            let back = c.decode(&c.encode(&l, &s).unwrap(), &s).unwrap();
            prop_assert!((back.herbage_mass.unwrap() - mass).abs() < 1e-4 * c.mass_scale);
            prop_assert!((back.height.unwrap() - height).abs() < 1e-4 * c.height_scale);
        }

        #[test]
        fn decode_never_negative(raw_m in 0.0f64..1.0, raw_h in 0.0f64..1.0) {
            let c = LabelCodec::default();
            let l = c.decode(&[0.5, 0.3, 0.2, raw_m, raw_h], &TaskSchema::irish()).unwrap();
            prop_assert!(l.herbage_mass.unwrap() >= 0.0 && l.height.unwrap() >= 0.0);
        }

        #[test]
        fn softmax_shift_invariant(shift in -50.0f64..50.0) {
            let dev = Device::Cpu;
            let logits = Tensor::new(&[[0.3f64, -1.2, 2.0]], &dev).unwrap();
            let a: Vec<Vec<f64>> = softmax_last(&logits).unwrap().to_vec2().unwrap();
            let b: Vec<Vec<f64>> = softmax_last(&(&logits + shift).unwrap()).unwrap().to_vec2().unwrap();
            for (x, y) in a[0].iter().zip(&b[0]) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
