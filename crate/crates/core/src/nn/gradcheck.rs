use candle_core::{Tensor, Var};
use rand::seq::index;
use rand::Rng;
use serde::Serialize;

use super::{scalar, to_f64_vec};
use crate::error::{Error, Result};

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckEntry {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub max_rel_error: f64,
}

fn set_element(var: &Var, index: usize, value: f64) -> Result<()> {
    let mut flat = to_f64_vec(var.as_tensor())?;
    flat[index] = value;
    let t = Tensor::from_vec(flat, var.dims(), var.device())?.to_dtype(var.dtype())?;
    var.set(&t)?;
    Ok(())
}

/// Compare backprop gradients of `loss` with central differences
/// `(L(w + eps) - L(w - eps)) / 2 eps` on `n` scalars drawn uniformly from
/// `params`. The relative error is `|a - n| / max(|a|, |n|, floor)`; the
/// floor keeps gradients that are zero up to round-off from dominating.
pub fn gradient_check(
    loss: impl Fn() -> Result<Tensor>,
    params: &[(String, Var)],
    n: usize,
    eps: f64,
    floor: f64,
    rng: &mut impl Rng,
) -> Result<GradCheckReport> {
    let sizes: Vec<usize> = params.iter().map(|(_, v)| v.elem_count()).collect();
    let total: usize = sizes.iter().sum();
    if n > total {
        return Err(Error::Config(format!("cannot check {n} of {total} parameters")));
    }
    let grads = loss()?.backward()?;
    let mut picks = index::sample(rng, total, n).into_vec();
    picks.sort_unstable();

    let mut entries = Vec::with_capacity(n);
    for flat_index in picks {
        let mut offset = flat_index;
        let mut which = 0;
        while offset >= sizes[which] {
            offset -= sizes[which];
            which += 1;
        }
        let (name, var) = &params[which];
        let analytic = match grads.get(var.as_tensor()) {
            Some(g) => to_f64_vec(g)?[offset],
            None => 0.0,
        };
        let w = to_f64_vec(var.as_tensor())?[offset];
        set_element(var, offset, w + eps)?;
        let up = scalar(&loss()?)?;
        set_element(var, offset, w - eps)?;
        let down = scalar(&loss()?)?;
        set_element(var, offset, w)?;
        let numeric = (up - down) / (2.0 * eps);
        let rel_error = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor);
        entries.push(GradCheckEntry {
            param: name.clone(),
            index: offset,
            analytic,
            numeric,
            rel_error,
        });
    }
    let max_rel_error = entries.iter().map(|e| e.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport { entries, max_rel_error })
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cubic_gradient() {
        let w = Var::new(&[0.5f64, -1.5, 2.0], &Device::Cpu).unwrap();
        let params = vec![("w".to_string(), w.clone())];
        let loss = || Ok(w.as_tensor().powf(3.0)?.sum_all()?);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = gradient_check(loss, &params, 3, 1e-5, 1e-8, &mut rng).unwrap();
        assert_eq!(r.entries.len(), 3);
        assert!(r.max_rel_error < 1e-8, "{r:?}");
        // Parameters are restored afterwards.
        assert_eq!(to_f64_vec(w.as_tensor()).unwrap(), vec![0.5, -1.5, 2.0]);
    }
}
