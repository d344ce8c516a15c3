//! Similarity mining: erase attended regions by soft-masking, re-encode the
//! masked images with the same parameters, and penalize the model's remaining
//! ability to satisfy the similarity criterion.
//!
//! With `detach_attention = false` (the default) the returned loss reaches
//! the parameters both through the masked forward pass and through attention
//! generation itself, i.e. training differentiates through the gradient
//! computation (second order).

use serde::{Deserialize, Serialize};

use crate::attention::{explain, Arch, ExplainOptions};
use crate::encoder::{encode, EncoderConfig, ModelParams};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Soft-masking gate parameters for `sigma(Z) = sigmoid(alpha * (Z - beta))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskingConfig {
    /// Gate steepness.
    pub alpha_slope: f64,
    /// Gate midpoint on the (normalized) attention map.
    pub beta_threshold: f64,
    /// Min-max normalize the upsampled map to [0,1] before gating.
    pub normalize_before_mask: bool,
    /// Treat the attention map as a constant input to the masked pass.
    pub detach_attention: bool,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        Self {
            alpha_slope: 10.0,
            beta_threshold: 0.5,
            normalize_before_mask: true,
            detach_attention: false,
        }
    }
}

impl MaskingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha_slope <= 0.0 {
            return Err(Error::Config(format!(
                "masking alpha_slope must be positive, got {}",
                self.alpha_slope
            )));
        }
        if !(0.0 < self.beta_threshold && self.beta_threshold < 1.0) {
            return Err(Error::Config(format!(
                "masking beta_threshold must lie in (0,1), got {}",
                self.beta_threshold
            )));
        }
        Ok(())
    }
}

/// `x_hat = x ⊙ (1 - sigmoid(alpha * (M - beta)))`, broadcast over channels.
///
/// The map is min-max normalized first when the config asks for it, and
/// detached from the graph when `detach_attention` is set.
pub fn soft_mask(image: &Tensor, m_up: &Tensor, cfg: &MaskingConfig) -> Result<Tensor> {
    cfg.validate()?;
    let (h, w, c) = match *image.shape() {
        [h, w, c] => (h, w, c),
        _ => {
            return Err(Error::InvalidShape {
                op: "soft_mask",
                expected: "[h,w,c]",
                got: image.shape().to_vec(),
            })
        }
    };
    if m_up.shape() != [h, w] {
        return Err(Error::ShapeMismatch {
            op: "soft_mask",
            lhs: image.shape().to_vec(),
            rhs: m_up.shape().to_vec(),
        });
    }
    let m = if cfg.detach_attention { m_up.detach() } else { m_up.clone() };
    let m = if cfg.normalize_before_mask { m.minmax_normalize()? } else { m };
    let gate = m
        .add_scalar(-cfg.beta_threshold)?
        .scale(cfg.alpha_slope)?
        .sigmoid()?;
    let keep = gate.neg()?.add_scalar(1.0)?;
    image.mul(&keep.channel_broadcast(c)?)
}

/// `| ||fa - fp|| - ||fa - fn|| |` on masked embeddings; non-negative.
pub fn mining_loss_triplet(fa: &Tensor, fp: &Tensor, fn_: &Tensor) -> Result<Tensor> {
    let d_ap = fa.sub(fp)?.euclidean_norm()?;
    let d_an = fa.sub(fn_)?.euclidean_norm()?;
    d_ap.sub(&d_an)?.abs()
}

/// `-||f1 - f2||` on masked embeddings; non-positive. Maximizing the masked
/// distance drives the pair apart once their shared evidence is erased.
pub fn mining_loss_pair(f1: &Tensor, f2: &Tensor) -> Result<Tensor> {
    f1.sub(f2)?.euclidean_norm()?.neg()
}

/// Sum of the triplet mining loss over `(fa,fp,fn1)` and `(fa,fp,fn2)`.
pub fn mining_loss_quadruplet(
    fa: &Tensor,
    fp: &Tensor,
    fn1: &Tensor,
    fn2: &Tensor,
) -> Result<Tensor> {
    let t1 = mining_loss_triplet(fa, fp, fn1)?;
    let t2 = mining_loss_triplet(fa, fp, fn2)?;
    t1.add(&t2)
}

/// Full mining pipeline for one tuple: explain, upsample, soft-mask, re-encode
/// with the same parameters, and evaluate the arch-appropriate mining loss.
///
/// `same_class` is required for the siamese arch (it selects the pair-weight
/// rule during attention generation).
pub fn mining_forward(
    config: &EncoderConfig,
    params: &ModelParams,
    images: &[Tensor],
    arch: Arch,
    same_class: Option<bool>,
    cfg: &MaskingConfig,
    detach_weights: bool,
) -> Result<Tensor> {
    cfg.validate()?;
    let opts = ExplainOptions {
        detach_weights,
        create_graph: !cfg.detach_attention,
    };
    let maps = explain(config, params, images, arch, same_class, &opts)?;

    let mut masked = Vec::with_capacity(images.len());
    for (image, map) in images.iter().zip(&maps) {
        let (h, w) = (image.shape()[0], image.shape()[1]);
        let m_up = map.upsample(h, w)?;
        let x_hat = soft_mask(image, &m_up, cfg)?;
        masked.push(encode(config, params, &x_hat)?.embedding);
    }

    match arch {
        Arch::Siamese => mining_loss_pair(&masked[0], &masked[1]),
        Arch::Triplet => mining_loss_triplet(&masked[0], &masked[1], &masked[2]),
        Arch::Quadruplet => {
            mining_loss_quadruplet(&masked[0], &masked[1], &masked[2], &masked[3])
        }
    }
}
