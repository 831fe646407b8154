//! Self-describing model archives: a safetensors file whose header carries
//! the model kind, training step and full configuration as JSON.

use std::borrow::Cow;
use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use safetensors::tensor::{Dtype as StDtype, SafeTensors, View};
use serde::{Deserialize, Serialize};

use crate::data_model::write_text;
use crate::error::{Error, Result};
use crate::nn::ParamStore;

const METADATA_KEY: &str = "herbage";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    kind: String,
    step: usize,
    config: serde_json::Value,
}

#[derive(Debug)]
pub struct Checkpoint {
    pub kind: String,
    pub step: usize,
    pub config: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

struct RawTensor {
    dtype: StDtype,
    shape: Vec<usize>,
    bytes: Vec<u8>,
}

impl View for &RawTensor {
    fn dtype(&self) -> StDtype {
        self.dtype
    }
    fn shape(&self) -> &[usize] {
        &self.shape
    }
    fn data(&self) -> Cow<'_, [u8]> {
        Cow::Borrowed(&self.bytes)
    }
    fn data_len(&self) -> usize {
        self.bytes.len()
    }
}

fn to_raw(t: &Tensor) -> Result<RawTensor> {
    let flat = t.flatten_all()?;
    let (dtype, bytes) = match t.dtype() {
        DType::F64 => (
            StDtype::F64,
            flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        ),
        _ => (
            StDtype::F32,
            flat.to_dtype(DType::F32)?
                .to_vec1::<f32>()?
                .iter()
                .flat_map(|v| v.to_le_bytes())
                .collect(),
        ),
    };
    Ok(RawTensor {
        dtype,
        shape: t.dims().to_vec(),
        bytes,
    })
}

/// Write every parameter of `stores` plus a header to `path`.
pub fn save(path: &Path, kind: &str, step: usize, config: &impl Serialize, stores: &[&ParamStore]) -> Result<()> {
    let header = Header {
        format_version: FORMAT_VERSION,
        kind: kind.to_string(),
        step,
        config: serde_json::to_value(config).map_err(|e| Error::json("serializing config", e))?,
    };
    let header = serde_json::to_string(&header).map_err(|e| Error::json("serializing header", e))?;
    let mut raws = Vec::new();
    for store in stores {
        for (name, var) in store.named() {
            raws.push((name.clone(), to_raw(var.as_tensor())?));
        }
    }
    let bytes = safetensors::tensor::serialize(
        raws.iter().map(|(n, r)| (n.as_str(), r)),
        Some(HashMap::from([(METADATA_KEY.to_string(), header)])),
    )
    .map_err(|e| Error::Checkpoint(e.to_string()))?;
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, meta) = SafeTensors::read_metadata(&bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let header = meta
        .metadata()
        .as_ref()
        .and_then(|m| m.get(METADATA_KEY))
        .ok_or_else(|| Error::Checkpoint(format!("{} is not a herbage checkpoint", path.display())))?;
    let header: Header = serde_json::from_str(header).map_err(|e| Error::json("parsing checkpoint header", e))?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint format {}",
            header.format_version
        )));
    }
    let st = SafeTensors::deserialize(&bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut tensors = Vec::new();
    let mut names: Vec<String> = st.names().into_iter().map(String::from).collect();
    names.sort();
    for name in names {
        let view = st.tensor(&name).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let data = view.data();
        let t = match view.dtype() {
            StDtype::F64 => {
                let v: Vec<f64> = data
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                Tensor::from_vec(v, view.shape(), &Device::Cpu)?
            }
            StDtype::F32 => {
                let v: Vec<f32> = data
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                Tensor::from_vec(v, view.shape(), &Device::Cpu)?
            }
            other => return Err(Error::Checkpoint(format!("unsupported dtype {other:?} for `{name}`"))),
        };
        tensors.push((name, t));
    }
    Ok(Checkpoint {
        kind: header.kind,
        step: header.step,
        config: header.config,
        tensors,
    })
}

impl Checkpoint {
    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Checkpoint(format!(
                "expected a `{kind}` checkpoint, found `{}`",
                self.kind
            )));
        }
        Ok(())
    }

    pub fn config_as<T: for<'de> Deserialize<'de>>(&self) -> Result<T> {
        serde_json::from_value(self.config.clone()).map_err(|e| Error::json("checkpoint config", e))
    }
}

/// Write a JSON document with a trailing newline.
pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::json(format!("writing {}", path.display()), e))?;
    text.push('\n');
    write_text(path, &text)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(format!("parsing {}", path.display()), e))
}
