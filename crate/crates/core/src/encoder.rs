//! A small convolutional encoder mapping an image to an intermediate feature
//! map (used for attention) and a unit-norm embedding.
//!
//! Architecture: repeated blocks of conv3x3 (same padding) -> relu ->
//! maxpool2, followed by global average pooling, a linear head, and L2
//! normalization. The post-relu activation of a configurable block is exposed
//! as the attention feature map.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Input spatial size (square images).
    pub input_hw: usize,
    /// 1 (grayscale) or 3 (rgb).
    pub input_channels: usize,
    /// Output channels of each conv block.
    pub conv_channels: Vec<usize>,
    /// Kernel size (odd, same padding).
    pub kernel: usize,
    /// Embedding dimensionality.
    pub embed_dim: usize,
    /// Index of the conv block whose post-relu output is the feature map.
    pub attention_layer: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_hw: 64,
            input_channels: 1,
            conv_channels: vec![8, 16, 32, 32],
            kernel: 3,
            embed_dim: 64,
            attention_layer: 3,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.conv_channels.is_empty() {
            return fail("conv_channels must be non-empty".into());
        }
        if self.embed_dim < 2 {
            return fail(format!("embed_dim must be >= 2, got {}", self.embed_dim));
        }
        if self.attention_layer >= self.conv_channels.len() {
            return fail(format!(
                "attention_layer {} out of range for {} blocks",
                self.attention_layer,
                self.conv_channels.len()
            ));
        }
        if self.input_channels != 1 && self.input_channels != 3 {
            return fail(format!("input_channels must be 1 or 3, got {}", self.input_channels));
        }
        if self.kernel % 2 == 0 || self.kernel == 0 {
            return fail(format!("kernel must be odd, got {}", self.kernel));
        }
        // Each block halves the spatial size; every stage must stay even.
        if self.input_hw == 0 || self.input_hw % (1 << self.conv_channels.len()) != 0 {
            return fail(format!(
                "input_hw {} must be divisible by 2^{} for {} pooling stages",
                self.input_hw,
                self.conv_channels.len(),
                self.conv_channels.len()
            ));
        }
        Ok(())
    }

    /// Spatial size of the feature map at the attention layer (post-relu,
    /// before that block's pool).
    pub fn attention_hw(&self) -> usize {
        self.input_hw >> self.attention_layer
    }

    /// Channel count of the feature map at the attention layer.
    pub fn attention_channels(&self) -> usize {
        self.conv_channels[self.attention_layer]
    }

    fn last_channels(&self) -> usize {
        *self.conv_channels.last().expect("non-empty conv_channels")
    }
}

/// Ordered, named parameter tensors. All tensors are gradient leaves.
#[derive(Clone)]
pub struct ModelParams {
    tensors: IndexMap<String, Tensor>,
}

impl ModelParams {
    pub fn from_tensors(tensors: IndexMap<String, Tensor>) -> Self {
        Self { tensors }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar parameter count.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// A copy with one named tensor replaced (same shape enforced).
    pub fn with_replaced(&self, name: &str, tensor: Tensor) -> Result<ModelParams> {
        let mut tensors = self.tensors.clone();
        match tensors.get_mut(name) {
            Some(slot) => {
                if slot.shape() != tensor.shape() {
                    return Err(Error::ShapeMismatch {
                        op: "with_replaced",
                        lhs: slot.shape().to_vec(),
                        rhs: tensor.shape().to_vec(),
                    });
                }
                *slot = tensor;
            }
            None => {
                return Err(Error::InvalidArgument {
                    op: "with_replaced",
                    msg: format!("unknown parameter {name}"),
                })
            }
        }
        Ok(ModelParams { tensors })
    }
}

/// Kaiming-style fan-in scaled uniform init from a deterministic generator.
/// Identical seeds produce bitwise identical parameters.
pub fn init_params(config: &EncoderConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = SplitMix64::new(seed);
    let mut tensors = IndexMap::new();
    let k = config.kernel;

    let mut c_in = config.input_channels;
    for (i, &c_out) in config.conv_channels.iter().enumerate() {
        let fan_in = (k * k * c_in) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let weight: Vec<f64> = (0..k * k * c_in * c_out)
            .map(|_| rng.uniform(-bound, bound))
            .collect();
        tensors.insert(
            format!("conv{i}.weight"),
            Tensor::new(&[k, k, c_in, c_out], weight)?.with_grad(),
        );
        tensors.insert(format!("conv{i}.bias"), Tensor::zeros(&[c_out]).with_grad());
        c_in = c_out;
    }

    let fan_in = config.last_channels() as f64;
    let bound = (6.0 / fan_in).sqrt();
    let weight: Vec<f64> = (0..config.embed_dim * config.last_channels())
        .map(|_| rng.uniform(-bound, bound))
        .collect();
    tensors.insert(
        "head.weight".to_string(),
        Tensor::new(&[config.embed_dim, config.last_channels()], weight)?.with_grad(),
    );
    tensors.insert(
        "head.bias".to_string(),
        Tensor::zeros(&[config.embed_dim]).with_grad(),
    );

    Ok(ModelParams { tensors })
}

/// Result of one forward pass.
pub struct Encoding {
    /// Post-relu activation of the attention block, `[m,n,c]`.
    pub feature_map: Tensor,
    /// Unit-norm embedding, `[d]`.
    pub embedding: Tensor,
}

/// Forward pass. `image` is `[h,w,c]` with pixel values in [0,1].
pub fn encode(config: &EncoderConfig, params: &ModelParams, image: &Tensor) -> Result<Encoding> {
    let expected = [config.input_hw, config.input_hw, config.input_channels];
    if image.shape() != expected {
        return Err(Error::ShapeMismatch {
            op: "encode",
            lhs: expected.to_vec(),
            rhs: image.shape().to_vec(),
        });
    }
    if image.data().iter().any(|&v| !(-1e-9..=1.0 + 1e-9).contains(&v)) {
        return Err(Error::InvalidArgument {
            op: "encode",
            msg: "pixel values must lie in [0,1]".into(),
        });
    }

    let pad = (config.kernel - 1) / 2;
    let mut x = image.clone();
    let mut feature_map = None;
    for i in 0..config.conv_channels.len() {
        let weight = named(params, &format!("conv{i}.weight"))?;
        let bias = named(params, &format!("conv{i}.bias"))?;
        let conv = x.conv2d(weight, 1, pad)?;
        let (m, n) = (conv.shape()[0], conv.shape()[1]);
        let act = conv.add(&bias.spatial_broadcast(m, n)?)?.relu()?;
        if i == config.attention_layer {
            feature_map = Some(act.clone());
        }
        x = act.max_pool2()?;
    }

    let pooled = x.global_average_pool()?;
    let head_w = named(params, "head.weight")?;
    let head_b = named(params, "head.bias")?;
    let embedding = head_w.matvec(&pooled)?.add(head_b)?.l2_normalize()?;

    Ok(Encoding {
        feature_map: feature_map.expect("attention_layer within range"),
        embedding,
    })
}

/// `encode` applied per image, order-preserving.
pub fn encode_batch(
    config: &EncoderConfig,
    params: &ModelParams,
    images: &[Tensor],
) -> Result<Vec<Encoding>> {
    images.iter().map(|img| encode(config, params, img)).collect()
}

fn named<'p>(params: &'p ModelParams, name: &str) -> Result<&'p Tensor> {
    params.get(name).ok_or_else(|| Error::InvalidArgument {
        op: "encode",
        msg: format!("missing parameter {name}"),
    })
}
