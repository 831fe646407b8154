//! Small neural-network toolkit on top of `candle-core`: a named parameter
//! store with seeded initialisation, the layers the two networks need, and
//! the optimizers.

mod gradcheck;
mod layers;
mod optim;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

pub use layers::{
    instance_norm, l2_normalize, leaky_relu, log_sigmoid, reflect_pad2d, sigmoid, softmax_last, Conv2d,
    Linear, Padding,
};
pub use gradcheck::{gradient_check, GradCheckEntry, GradCheckReport};
pub use optim::{Adam, AdamConfig, Optimizer, Sgd, SgdConfig};

/// Ordered collection of named trainable tensors.
///
/// Initialisation draws from a caller-supplied RNG so model construction is
/// reproducible; candle's own random constructors are not seedable on CPU.
#[derive(Debug)]
pub struct ParamStore {
    dtype: DType,
    device: Device,
    entries: Vec<(String, Var)>,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self {
            dtype,
            device: Device::Cpu,
            entries: Vec::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn insert(&mut self, name: String, data: Vec<f64>, shape: &[usize]) -> Result<Var> {
        if self.entries.iter().any(|(n, _)| *n == name) {
            return Err(Error::Shape(format!("duplicate parameter `{name}`")));
        }
        let t = Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        self.entries.push((name, var.clone()));
        Ok(var)
    }

    pub fn normal(&mut self, name: impl Into<String>, shape: &[usize], std: f64, rng: &mut impl Rng) -> Result<Var> {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
        let data = (0..n).map(|_| dist.sample(rng)).collect();
        self.insert(name.into(), data, shape)
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        self.insert(name.into(), vec![0.0; n], shape)
    }

    pub fn named(&self) -> &[(String, Var)] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    pub fn vars(&self) -> Vec<Var> {
        self.entries.iter().map(|(_, v)| v.clone()).collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, v)| v.elem_count()).sum()
    }

    /// Detached copies of every parameter, in store order.
    pub fn snapshot(&self) -> Result<Vec<Tensor>> {
        self.entries
            .iter()
            .map(|(_, v)| Ok(v.as_tensor().detach().copy()?))
            .collect()
    }

    pub fn restore(&self, snapshot: &[Tensor]) -> Result<()> {
        if snapshot.len() != self.entries.len() {
            return Err(Error::Shape(format!(
                "snapshot holds {} tensors, store has {}",
                snapshot.len(),
                self.entries.len()
            )));
        }
        for ((name, var), t) in self.entries.iter().zip(snapshot) {
            if var.dims() != t.dims() {
                return Err(Error::Shape(format!("`{name}`: {:?} vs {:?}", var.dims(), t.dims())));
            }
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }

    /// Overwrite parameters by name; every parameter must be present.
    pub fn load_named(&self, tensors: &[(String, Tensor)]) -> Result<()> {
        for (name, var) in &self.entries {
            let t = tensors
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
            if t.dims() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }

    /// Element-wise equality with another store of the same layout.
    pub fn bit_equal(&self, other: &ParamStore) -> Result<bool> {
        if self.entries.len() != other.entries.len() {
            return Ok(false);
        }
        for ((na, a), (nb, b)) in self.entries.iter().zip(&other.entries) {
            if na != nb || a.dims() != b.dims() {
                return Ok(false);
            }
            let x = a.as_tensor().to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
            let y = b.as_tensor().to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
            if x.iter().zip(&y).any(|(p, q)| p.to_bits() != q.to_bits()) {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

/// Read a scalar tensor as `f64`.
pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Flatten any tensor into an `f64` vector.
pub fn to_f64_vec(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
}
