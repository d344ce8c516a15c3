//! SGD and Adam parameter updates over named gradient vectors.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::encoder::ModelParams;
use crate::error::{Error, Result};
use crate::tensor::{GradientSet, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::Config(format!("unknown optimizer '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimConfig {
    pub fn sgd(learning_rate: f64) -> Self {
        Self { kind: OptimizerKind::Sgd, learning_rate, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn adam(learning_rate: f64) -> Self {
        Self { kind: OptimizerKind::Adam, learning_rate, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

/// Optimizer state: Adam's step counter and per-parameter moments. Empty for
/// SGD.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct OptimizerState {
    pub step: u64,
    pub first_moment: IndexMap<String, Vec<f64>>,
    pub second_moment: IndexMap<String, Vec<f64>>,
}

/// Dense per-parameter gradients in parameter order.
#[derive(Debug, Clone)]
pub struct ParamGrads {
    grads: IndexMap<String, Vec<f64>>,
}

impl ParamGrads {
    pub fn zeros_like(params: &ModelParams) -> Self {
        let grads = params
            .iter()
            .map(|(name, t)| (name.clone(), vec![0.0; t.numel()]))
            .collect();
        Self { grads }
    }

    /// Extract gradients for every parameter from a backward pass. Errors if
    /// any parameter is missing from the set.
    pub fn from_gradient_set(params: &ModelParams, set: &GradientSet) -> Result<Self> {
        let mut grads = IndexMap::with_capacity(params.len());
        for (name, t) in params.iter() {
            let g = set.grad(t).ok_or_else(|| Error::InvalidArgument {
                op: "optimizer_step",
                msg: format!("missing gradient for parameter {name}"),
            })?;
            grads.insert(name.clone(), g.data().to_vec());
        }
        Ok(Self { grads })
    }

    pub fn accumulate(&mut self, other: &ParamGrads) {
        for (name, acc) in self.grads.iter_mut() {
            let src = &other.grads[name];
            for (a, s) in acc.iter_mut().zip(src) {
                *a += s;
            }
        }
    }

    pub fn scale(&mut self, k: f64) {
        for g in self.grads.values_mut() {
            for v in g.iter_mut() {
                *v *= k;
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.grads.get(name).map(Vec::as_slice)
    }

    /// True if every entry is exactly zero.
    pub fn is_all_zero(&self) -> bool {
        self.grads.values().all(|g| g.iter().all(|&v| v == 0.0))
    }
}

/// One optimizer update. Returns fresh leaf parameters; `state` advances for
/// Adam and is untouched for SGD.
pub fn optimizer_step(
    params: &ModelParams,
    grads: &ParamGrads,
    state: &mut OptimizerState,
    cfg: &OptimConfig,
) -> Result<ModelParams> {
    cfg.validate()?;
    let mut updated = IndexMap::with_capacity(params.len());
    match cfg.kind {
        OptimizerKind::Sgd => {
            for (name, p) in params.iter() {
                let g = grads.get(name).ok_or_else(|| missing(name))?;
                let data: Vec<f64> = p
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(v, gv)| v - cfg.learning_rate * gv)
                    .collect();
                updated.insert(name.clone(), Tensor::new(p.shape(), data)?.with_grad());
            }
        }
        OptimizerKind::Adam => {
            state.step += 1;
            let t = state.step;
            let bc1 = 1.0 - cfg.beta1.powi(t as i32);
            let bc2 = 1.0 - cfg.beta2.powi(t as i32);
            for (name, p) in params.iter() {
                let g = grads.get(name).ok_or_else(|| missing(name))?;
                let m = state
                    .first_moment
                    .entry(name.clone())
                    .or_insert_with(|| vec![0.0; p.numel()]);
                let v = state
                    .second_moment
                    .entry(name.clone())
                    .or_insert_with(|| vec![0.0; p.numel()]);
                let mut data = Vec::with_capacity(p.numel());
                for i in 0..p.numel() {
                    m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                    v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                    let m_hat = m[i] / bc1;
                    let v_hat = v[i] / bc2;
                    data.push(p.data()[i] - cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.eps));
                }
                updated.insert(name.clone(), Tensor::new(p.shape(), data)?.with_grad());
            }
        }
    }
    Ok(ModelParams::from_tensors(updated))
}

fn missing(name: &str) -> Error {
    Error::InvalidArgument {
        op: "optimizer_step",
        msg: format!("missing gradient for parameter {name}"),
    }
}
