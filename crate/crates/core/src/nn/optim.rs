use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::Result;

pub trait Optimizer {
    /// Apply one update from `grads`; parameters without a gradient are left
    /// untouched.
    fn step(&mut self, grads: &GradStore) -> Result<()>;

    fn backward_step(&mut self, loss: &Tensor) -> Result<()> {
        let grads = loss.backward()?;
        self.step(&grads)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

pub struct Adam {
    config: AdamConfig,
    slots: Vec<(Var, Tensor, Tensor)>,
    t: i32,
}

impl Adam {
    pub fn new(vars: Vec<Var>, config: AdamConfig) -> Result<Self> {
        let slots = vars
            .into_iter()
            .map(|v| {
                let m = v.zeros_like()?;
                let s = v.zeros_like()?;
                Ok((v, m, s))
            })
            .collect::<Result<_>>()?;
        Ok(Self { config, slots, t: 0 })
    }
}

impl Optimizer for Adam {
    fn step(&mut self, grads: &GradStore) -> Result<()> {
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t);
        let bc2 = 1.0 - c.beta2.powi(self.t);
        for (var, m, v) in &mut self.slots {
            let Some(g) = grads.get(var.as_tensor()) else { continue };
            *m = ((&*m * c.beta1)? + (g * (1.0 - c.beta1))?)?;
            *v = ((&*v * c.beta2)? + (g.sqr()? * (1.0 - c.beta2))?)?;
            let m_hat = (&*m / bc1)?;
            let v_hat = (&*v / bc2)?;
            let update = (m_hat / (v_hat.sqrt()? + c.eps)?)?;
            var.set(&var.as_tensor().sub(&(update * c.lr)?)?)?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
}

/// Stochastic gradient descent with heavy-ball momentum:
/// `buf = momentum * buf + grad; w -= lr * buf`.
pub struct Sgd {
    config: SgdConfig,
    slots: Vec<(Var, Option<Tensor>)>,
}

impl Sgd {
    pub fn new(vars: Vec<Var>, config: SgdConfig) -> Self {
        Self {
            config,
            slots: vars.into_iter().map(|v| (v, None)).collect(),
        }
    }
}

impl Optimizer for Sgd {
    fn step(&mut self, grads: &GradStore) -> Result<()> {
        let c = self.config;
        for (var, buf) in &mut self.slots {
            let Some(g) = grads.get(var.as_tensor()) else { continue };
            let next = match buf.take() {
                Some(b) if c.momentum != 0.0 => ((b * c.momentum)? + g)?,
                _ => g.clone(),
            };
            var.set(&var.as_tensor().sub(&(&next * c.lr)?)?)?;
            *buf = Some(next);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn sgd_momentum_matches_hand_iteration() {
        let w = Var::new(&[1.0f64], &Device::Cpu).unwrap();
        let mut opt = Sgd::new(vec![w.clone()], SgdConfig { lr: 0.1, momentum: 0.9 });
        // loss = w^2, grad = 2w
        let mut expect_w = 1.0f64;
        let mut buf = 0.0f64;
        for i in 0..5 {
            let loss = w.as_tensor().sqr().unwrap().sum_all().unwrap();
            opt.backward_step(&loss).unwrap();
            let g = 2.0 * expect_w;
            buf = if i == 0 { g } else { 0.9 * buf + g };
            expect_w -= 0.1 * buf;
            let got: Vec<f64> = w.as_tensor().to_vec1().unwrap();
            assert!((got[0] - expect_w).abs() < 1e-12);
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let w = Var::new(&[3.0f64, -2.0], &Device::Cpu).unwrap();
        let mut opt = Adam::new(vec![w.clone()], AdamConfig { lr: 0.01, ..Default::default() }).unwrap();
        let loss = w.as_tensor().sqr().unwrap().sum_all().unwrap();
        opt.backward_step(&loss).unwrap();
        let got: Vec<f64> = w.as_tensor().to_vec1().unwrap();
        assert!((got[0] - 2.99).abs() < 1e-6);
        assert!((got[1] + 1.99).abs() < 1e-6);
    }
}
