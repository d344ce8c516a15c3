//! Similarity attention: explain why a set of inputs satisfies a similarity
//! criterion, using only the learned embedding.
//!
//! From the embeddings of a pair/triplet/quadruplet we build a per-dimension
//! weight vector `w` highlighting the dimensions that keep positives close
//! and negatives far, score each image as `s = w . f`, and turn the gradient
//! of the score with respect to an intermediate feature map into a
//! non-negative spatial attention map: channel weights are the spatial means
//! of the gradient, and the map is `relu(sum_k alpha_k * A_k)`.

use serde::{Deserialize, Serialize};

use crate::encoder::{encode_batch, EncoderConfig, ModelParams};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Similarity architecture, i.e. the tuple arity of the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Siamese,
    Triplet,
    Quadruplet,
}

impl Arch {
    pub fn arity(&self) -> usize {
        match self {
            Arch::Siamese => 2,
            Arch::Triplet => 3,
            Arch::Quadruplet => 4,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Arch::Siamese => "siamese",
            Arch::Triplet => "triplet",
            Arch::Quadruplet => "quadruplet",
        }
    }
}

impl std::str::FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Arch> {
        match s {
            "siamese" => Ok(Arch::Siamese),
            "triplet" => Ok(Arch::Triplet),
            "quadruplet" => Ok(Arch::Quadruplet),
            other => Err(Error::Config(format!(
                "unknown arch '{other}' (expected siamese, triplet, or quadruplet)"
            ))),
        }
    }
}

/// Which sample score an attention map was derived from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreRole {
    Image1,
    Image2,
    Anchor,
    Positive,
    Negative,
    Negative1,
    Negative2,
}

/// The intermediate difference weights retained for inspection.
#[derive(Clone)]
pub enum WeightParts {
    Pair { same_class: bool },
    Triplet { positive: Tensor, negative: Tensor },
    Quadruplet { positive: Tensor, negative1: Tensor, negative2: Tensor },
}

/// Per-dimension importance vector `w` plus its constituent parts.
#[derive(Clone)]
pub struct WeightVector {
    pub values: Tensor,
    pub parts: WeightParts,
}

fn check_dims(op: &'static str, embeddings: &[&Tensor]) -> Result<()> {
    let first = embeddings[0];
    if first.shape().len() != 1 {
        return Err(Error::InvalidShape {
            op,
            expected: "a vector",
            got: first.shape().to_vec(),
        });
    }
    for e in &embeddings[1..] {
        if e.shape() != first.shape() {
            return Err(Error::ShapeMismatch {
                op,
                lhs: first.shape().to_vec(),
                rhs: e.shape().to_vec(),
            });
        }
    }
    Ok(())
}

fn one_minus(t: &Tensor) -> Result<Tensor> {
    t.neg()?.add_scalar(1.0)
}

/// Pair weights: `1 - |f1 - f2|` for same-class pairs, `|f1 - f2|` otherwise.
pub fn pair_weight(f1: &Tensor, f2: &Tensor, same_class: bool) -> Result<WeightVector> {
    check_dims("pair_weight", &[f1, f2])?;
    let diff = f1.sub(f2)?.abs()?;
    let values = if same_class { one_minus(&diff)? } else { diff };
    Ok(WeightVector {
        values,
        parts: WeightParts::Pair { same_class },
    })
}

/// Triplet weights: `w = (1 - |fa - fp|) ⊙ |fa - fn|`.
pub fn triplet_weight(fa: &Tensor, fp: &Tensor, fn_: &Tensor) -> Result<WeightVector> {
    check_dims("triplet_weight", &[fa, fp, fn_])?;
    let positive = one_minus(&fa.sub(fp)?.abs()?)?;
    let negative = fa.sub(fn_)?.abs()?;
    let values = positive.mul(&negative)?;
    Ok(WeightVector {
        values,
        parts: WeightParts::Triplet { positive, negative },
    })
}

/// Quadruplet weights: `w = (1 - |fa - fp|) ⊙ |fa - fn1| ⊙ |fa - fn2|`.
pub fn quadruplet_weight(
    fa: &Tensor,
    fp: &Tensor,
    fn1: &Tensor,
    fn2: &Tensor,
) -> Result<WeightVector> {
    check_dims("quadruplet_weight", &[fa, fp, fn1, fn2])?;
    let positive = one_minus(&fa.sub(fp)?.abs()?)?;
    let negative1 = fa.sub(fn1)?.abs()?;
    let negative2 = fa.sub(fn2)?.abs()?;
    let values = positive.mul(&negative1)?.mul(&negative2)?;
    Ok(WeightVector {
        values,
        parts: WeightParts::Quadruplet { positive, negative1, negative2 },
    })
}

/// Sample score `s = w . f`. Differentiable; the graph reaches the encoder
/// through `f`, and through `w` unless the weights were detached.
pub fn sample_score(w: &WeightVector, f: &Tensor) -> Result<Tensor> {
    w.values.dot(f)
}

/// A non-negative spatial attention map tied to one sample score.
#[derive(Clone)]
pub struct AttentionMap {
    values: Tensor,
    channel_weights: Tensor,
    role: ScoreRole,
    score_value: f64,
}

impl AttentionMap {
    /// Raw map `[m,n]`, entries >= 0. Carries graph state per the mode it
    /// was computed under.
    pub fn values(&self) -> &Tensor {
        &self.values
    }

    /// Per-channel weights (spatial means of the score gradient).
    pub fn channel_weights(&self) -> &Tensor {
        &self.channel_weights
    }

    pub fn role(&self) -> ScoreRole {
        self.role
    }

    pub fn score_value(&self) -> f64 {
        self.score_value
    }

    /// Corner-aligned bilinear upsampling of the raw map.
    pub fn upsample(&self, h: usize, w: usize) -> Result<Tensor> {
        self.values.upsample_bilinear(h, w)
    }

    /// Min-max normalized copy of the raw data for visualization only; the
    /// raw map is what feeds the mining path. A constant map yields zeros.
    pub fn viz_normalized(&self) -> Vec<f64> {
        let data = self.values.data();
        let lo = data.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if hi - lo < 1e-12 {
            return vec![0.0; data.len()];
        }
        data.iter().map(|v| (v - lo) / (hi - lo)).collect()
    }
}

/// Compute the attention map for `score` against `feature_map` (`[m,n,c]`).
///
/// With `create_graph` the map stays differentiable through the gradient
/// computation itself, which is what lets a mining loss backpropagate through
/// attention generation.
pub fn attention_map(
    score: &Tensor,
    feature_map: &Tensor,
    role: ScoreRole,
    create_graph: bool,
) -> Result<AttentionMap> {
    let (m, n, _c) = match *feature_map.shape() {
        [m, n, c] => (m, n, c),
        _ => {
            return Err(Error::InvalidShape {
                op: "attention_map",
                expected: "[m,n,c]",
                got: feature_map.shape().to_vec(),
            })
        }
    };
    let grads = score.backward(create_graph)?;
    let grad_a = grads.grad(feature_map).ok_or(Error::DisconnectedGraph)?;
    let channel_weights = grad_a.global_average_pool()?;
    let weighted = feature_map.mul(&channel_weights.spatial_broadcast(m, n)?)?;
    let values = weighted.channel_sum()?.relu()?;
    Ok(AttentionMap {
        values,
        channel_weights,
        role,
        score_value: score.value(),
    })
}

/// Options controlling attention generation.
#[derive(Debug, Clone, Copy)]
pub struct ExplainOptions {
    /// Treat `w` as a constant when scoring instead of a function of the
    /// embeddings.
    pub detach_weights: bool,
    /// Keep the attention maps differentiable through gradient generation.
    pub create_graph: bool,
}

impl Default for ExplainOptions {
    fn default() -> Self {
        Self { detach_weights: false, create_graph: false }
    }
}

fn roles(arch: Arch) -> &'static [ScoreRole] {
    match arch {
        Arch::Siamese => &[ScoreRole::Image1, ScoreRole::Image2],
        Arch::Triplet => &[ScoreRole::Anchor, ScoreRole::Positive, ScoreRole::Negative],
        Arch::Quadruplet => &[
            ScoreRole::Anchor,
            ScoreRole::Positive,
            ScoreRole::Negative1,
            ScoreRole::Negative2,
        ],
    }
}

/// Build the arch-appropriate weight vector from embeddings.
pub fn weight_for(arch: Arch, embeddings: &[Tensor], same_class: Option<bool>) -> Result<WeightVector> {
    match arch {
        Arch::Siamese => {
            let same = same_class.ok_or_else(|| Error::InvalidArgument {
                op: "explain",
                msg: "siamese requires same_class".into(),
            })?;
            pair_weight(&embeddings[0], &embeddings[1], same)
        }
        Arch::Triplet => triplet_weight(&embeddings[0], &embeddings[1], &embeddings[2]),
        Arch::Quadruplet => quadruplet_weight(
            &embeddings[0],
            &embeddings[1],
            &embeddings[2],
            &embeddings[3],
        ),
    }
}

/// Encode a tuple of images, build the weight vector, and return one
/// attention map per image.
pub fn explain(
    config: &EncoderConfig,
    params: &ModelParams,
    images: &[Tensor],
    arch: Arch,
    same_class: Option<bool>,
    opts: &ExplainOptions,
) -> Result<Vec<AttentionMap>> {
    if images.len() != arch.arity() {
        return Err(Error::InvalidArgument {
            op: "explain",
            msg: format!(
                "{} expects {} images, got {}",
                arch.name(),
                arch.arity(),
                images.len()
            ),
        });
    }
    let encodings = encode_batch(config, params, images)?;
    let embeddings: Vec<Tensor> = encodings.iter().map(|e| e.embedding.clone()).collect();
    let mut weight = weight_for(arch, &embeddings, same_class)?;
    if opts.detach_weights {
        weight.values = weight.values.detach();
    }
    roles(arch)
        .iter()
        .zip(&encodings)
        .map(|(&role, enc)| {
            let score = sample_score(&weight, &enc.embedding)?;
            attention_map(&score, &enc.feature_map, role, opts.create_graph)
        })
        .collect()
}
