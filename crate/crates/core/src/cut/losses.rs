use candle_core::{Tensor, D};

use crate::error::{Error, Result};
use crate::nn::log_sigmoid;

/// The adversarial objective exactly as printed for contrastive unpaired
/// translation: `mean(log D(x_l)) + mean(1 - log D(G(x_u)))`, on probability
/// scores. Training uses the non-saturating pair in [`discriminator_loss`] and
/// [`generator_adversarial_loss`] instead.
pub fn adversarial_loss(real_scores: &[f64], fake_scores: &[f64]) -> Result<f64> {
    if real_scores.is_empty() || fake_scores.is_empty() {
        return Err(Error::Domain("adversarial loss needs at least one real and one fake score".into()));
    }
    for &s in real_scores.iter().chain(fake_scores) {
        if !(s > 0.0 && s < 1.0) {
            return Err(Error::Domain(format!("discriminator score {s} outside (0, 1)")));
        }
    }
    let real = real_scores.iter().map(|s| s.ln()).sum::<f64>() / real_scores.len() as f64;
    let fake = fake_scores.iter().map(|s| 1.0 - s.ln()).sum::<f64>() / fake_scores.len() as f64;
    Ok(real + fake)
}

/// `-mean(log σ(real)) - mean(log(1 - σ(fake)))` on discriminator logits.
pub fn discriminator_loss(real_logits: &Tensor, fake_logits: &Tensor) -> Result<Tensor> {
    let real = log_sigmoid(real_logits)?.mean_all()?;
    let fake = log_sigmoid(&fake_logits.neg()?)?.mean_all()?;
    Ok((real + fake)?.neg()?)
}

/// `-mean(log σ(fake))`: the generator side of the non-saturating game.
pub fn generator_adversarial_loss(fake_logits: &Tensor) -> Result<Tensor> {
    Ok(log_sigmoid(fake_logits)?.mean_all()?.neg()?)
}

/// Patch contrastive loss on `(B, P, C)` unit vectors: for every query
/// `p'_i` (translated) the positive is `p_i` (source, same location) and the
/// other `P - 1` source patches of the same image are negatives. The
/// denominator sums over all `k`, the positive included. Averaged over `i`
/// and over the batch.
pub fn patch_contrastive_loss(source: &Tensor, translated: &Tensor, temperature: f64) -> Result<Tensor> {
    if source.dims() != translated.dims() {
        return Err(Error::Shape(format!(
            "patch features {:?} vs {:?}",
            source.dims(),
            translated.dims()
        )));
    }
    if !(temperature > 0.0) {
        return Err(Error::Config(format!("temperature must be > 0, got {temperature}")));
    }
    let (_, p, _) = source.dims3()?;
    if p < 2 {
        return Err(Error::Config(format!("need at least 2 patches, got {p}")));
    }
    // logits[b, i, k] = <p'_i, p_k> / τ
    let logits = (translated.matmul(&source.transpose(1, 2)?.contiguous()?)? / temperature)?;
    let max = logits.max_keepdim(D::Minus1)?.detach();
    let lse = (logits.broadcast_sub(&max)?.exp()?.sum_keepdim(D::Minus1)?.log()? + &max)?;
    let positive = (source * translated)?.sum_keepdim(D::Minus1)?.affine(1.0 / temperature, 0.0)?;
    Ok((lse - positive)?.mean_all()?)
}

/// Scalar reference for one image: `pos[i][k] = <p_k, p'_i>`.
pub fn patch_contrastive_loss_scalar(source: &[Vec<f64>], translated: &[Vec<f64>], temperature: f64) -> f64 {
    let p = source.len();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut total = 0.0;
    for i in 0..p {
        let logits: Vec<f64> = (0..p).map(|k| dot(&source[k], &translated[i]) / temperature).collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
        total += lse - logits[i];
    }
    total / p as f64
}
