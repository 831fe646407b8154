use candle_core::{Tensor, Var, D};
use rand::Rng;

use super::ParamStore;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Zeros(usize),
    Reflect(usize),
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    weight: Var,
    bias: Option<Var>,
    stride: usize,
    padding: Padding,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
        init_std: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let weight = store.normal(
            format!("{name}.weight"),
            &[out_channels, in_channels, kernel, kernel],
            init_std,
            rng,
        )?;
        let bias = Some(store.zeros(format!("{name}.bias"), &[out_channels])?);
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    /// He-normal initialisation for a layer followed by a ReLU.
    pub fn he_std(in_channels: usize, kernel: usize) -> f64 {
        (2.0 / (in_channels * kernel * kernel) as f64).sqrt()
    }

    pub fn weight(&self) -> &Var {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Var> {
        self.bias.as_ref()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (x, pad) = match self.padding {
            Padding::Zeros(p) => (x.clone(), p),
            Padding::Reflect(0) => (x.clone(), 0),
            Padding::Reflect(p) => (reflect_pad2d(x, p)?, 0),
        };
        let y = x.conv2d(self.weight.as_tensor(), pad, self.stride, 1, 1)?;
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(&b.as_tensor().reshape((1, (), 1, 1))?)?),
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    weight: Var,
    bias: Var,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_features: usize,
        out_features: usize,
        init_std: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let weight = store.normal(format!("{name}.weight"), &[out_features, in_features], init_std, rng)?;
        let bias = store.zeros(format!("{name}.bias"), &[out_features])?;
        Ok(Self { weight, bias })
    }

    /// `(N, in) -> (N, out)`
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight.as_tensor().t()?)?.broadcast_add(self.bias.as_tensor())?)
    }
}

/// Per-sample, per-channel normalisation over the spatial dimensions.
pub fn instance_norm(x: &Tensor, eps: f64) -> Result<Tensor> {
    let mean = x.mean_keepdim((2, 3))?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim((2, 3))?;
    Ok(centered.broadcast_div(&(var + eps)?.sqrt()?)?)
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(x.maximum(&(x * slope)?)?)
}

/// Logistic function written through `tanh`, which stays finite (with finite
/// gradients) for arbitrarily large inputs.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((((x * 0.5)?.tanh()? + 1.0)? * 0.5)?)
}

/// `log(sigmoid(x)) = -softplus(-x)` with `softplus(z) = relu(z) + ln(1 + e^{-|z|})`.
pub fn log_sigmoid(x: &Tensor) -> Result<Tensor> {
    let z = x.neg()?;
    let softplus = (z.relu()? + (z.abs()?.neg()?.exp()? + 1.0)?.log()?)?;
    Ok(softplus.neg()?)
}

pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

/// Divide by the L2 norm along `dim`.
pub fn l2_normalize(x: &Tensor, dim: usize) -> Result<Tensor> {
    let norm = (x.sqr()?.sum_keepdim(dim)? + 1e-12)?.sqrt()?;
    Ok(x.broadcast_div(&norm)?)
}

fn reflect_indices(n: usize, pad: usize) -> Result<Vec<u32>> {
    if pad >= n {
        return Err(Error::Shape(format!("reflect padding {pad} needs a dimension larger than {n}")));
    }
    let mut idx = Vec::with_capacity(n + 2 * pad);
    idx.extend((1..=pad).rev().map(|i| i as u32));
    idx.extend((0..n).map(|i| i as u32));
    idx.extend((0..pad).map(|i| (n - 2 - i) as u32));
    Ok(idx)
}

/// Mirror padding (edge pixel not repeated) on the last two dimensions of an
/// `(N, C, H, W)` tensor.
pub fn reflect_pad2d(x: &Tensor, pad: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let dev = x.device();
    let rows = Tensor::new(reflect_indices(h, pad)?, dev)?;
    let cols = Tensor::new(reflect_indices(w, pad)?, dev)?;
    Ok(x.index_select(&rows, 2)?.index_select(&cols, 3)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn reflect_pad_matches_numpy_reflect() {
        let x = Tensor::arange(0f64, 12.0, &Device::Cpu).unwrap().reshape((1, 1, 3, 4)).unwrap();
        let p = reflect_pad2d(&x, 1).unwrap();
        assert_eq!(p.dims(), &[1, 1, 5, 6]);
        let rows: Vec<Vec<f64>> = p.squeeze(0).unwrap().squeeze(0).unwrap().to_vec2().unwrap();
        assert_eq!(rows[0], vec![5., 4., 5., 6., 7., 6.]);
        assert_eq!(rows[1], vec![1., 0., 1., 2., 3., 2.]);
        assert_eq!(rows[4], vec![5., 4., 5., 6., 7., 6.]);
    }

    #[test]
    fn sigmoid_and_log_sigmoid_are_finite_at_extremes() {
        let x = Tensor::new(&[-1000f32, -20., 0., 20., 1000.], &Device::Cpu).unwrap();
        let s: Vec<f32> = sigmoid(&x).unwrap().to_vec1().unwrap();
        assert_eq!(s[2], 0.5);
        assert!(s[0] >= 0.0 && s[4] <= 1.0);
        let ls: Vec<f32> = log_sigmoid(&x).unwrap().to_vec1().unwrap();
        assert!(ls.iter().all(|v| v.is_finite()));
        assert!((ls[0] + 1000.0).abs() < 1e-3);
        assert!(ls[4].abs() < 1e-6);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::new(&[[1f64, 2., 3.], [100., 100., -50.]], &Device::Cpu).unwrap();
        let s: Vec<Vec<f64>> = softmax_last(&x).unwrap().to_vec2().unwrap();
        for row in s {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn instance_norm_zero_mean_unit_var() {
        let x = Tensor::arange(0f64, 32.0, &Device::Cpu).unwrap().reshape((1, 2, 4, 4)).unwrap();
        let y = instance_norm(&x, 0.0).unwrap();
        let m: Vec<f64> = y.mean((2, 3)).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert!(m.iter().all(|v| v.abs() < 1e-12));
        let v: Vec<f64> = y.sqr().unwrap().mean((2, 3)).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert!(v.iter().all(|v| (v - 1.0).abs() < 1e-12));
    }
}
