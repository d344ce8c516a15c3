//! Training loop: sample tuples, evaluate the metric loss and (when weighted)
//! the mining loss, and update parameters.
//!
//! Per-tuple losses and gradients are computed in parallel; each tuple owns a
//! private graph over the shared read-only parameters, and gradient reduction
//! runs in fixed tuple order so results are independent of thread scheduling.
//! Parameter updates are strictly serialized.

use rayon::prelude::*;
use serde::Serialize;

use crate::attention::Arch;
use crate::checkpoint::{Checkpoint, FORMAT_VERSION};
use crate::data::{sample_tuples, DatasetRecord, TupleSet};
use crate::encoder::{encode, init_params, EncoderConfig, ModelParams};
use crate::error::{Error, Result};
use crate::losses::{contrastive_loss, quadruplet_loss, total_loss, triplet_loss, LossConfig};
use crate::mining::{mining_forward, MaskingConfig};
use crate::optim::{optimizer_step, OptimConfig, OptimizerKind, OptimizerState, ParamGrads};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub encoder: EncoderConfig,
    pub loss: LossConfig,
    pub masking: MaskingConfig,
    /// Treat the weight vector as constant during attention generation.
    pub detach_weights: bool,
    pub epochs: usize,
    pub batch_tuples: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub adam_betas: (f64, f64),
    pub adam_eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            loss: LossConfig::default(),
            masking: MaskingConfig::default(),
            detach_weights: false,
            epochs: 20,
            batch_tuples: 16,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            adam_betas: (0.9, 0.999),
            adam_eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn arch(&self) -> Arch {
        self.loss.arch
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.loss.validate()?;
        self.masking.validate()?;
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_tuples == 0 {
            return Err(Error::Config("batch_tuples must be >= 1".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        Ok(())
    }

    fn optim_config(&self) -> OptimConfig {
        OptimConfig {
            kind: self.optimizer,
            learning_rate: self.learning_rate,
            beta1: self.adam_betas.0,
            beta2: self.adam_betas.1,
            eps: self.adam_eps,
        }
    }
}

/// Per-epoch means of the loss terms. Serializes to the stable one-line JSON
/// log schema.
#[derive(Debug, Clone, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub l_ml: f64,
    pub l_sm: f64,
    pub l_total: f64,
}

impl EpochMetrics {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("metrics serialize")
    }
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<EpochMetrics>,
    /// Number of `mining_forward` invocations across the run.
    pub mining_calls: u64,
}

struct TupleResult {
    l_ml: f64,
    l_sm: f64,
    grads: ParamGrads,
    mined: bool,
}

/// Loss and gradients for a single tuple. `l_sm` stays a constant zero when
/// gamma is zero (mining is never invoked) and for non-positive siamese pairs.
fn tuple_step(
    cfg: &TrainConfig,
    params: &ModelParams,
    images: &[&Tensor],
    same_class: Option<bool>,
) -> Result<TupleResult> {
    let embed = |img: &Tensor| -> Result<Tensor> {
        Ok(encode(&cfg.encoder, params, img)?.embedding)
    };

    let l_ml = match cfg.arch() {
        Arch::Siamese => {
            let pair = (embed(images[0])?, embed(images[1])?, same_class.unwrap());
            contrastive_loss(&[pair], cfg.loss.contrastive_margin)?
        }
        Arch::Triplet => {
            let t = (embed(images[0])?, embed(images[1])?, embed(images[2])?);
            triplet_loss(&[t], cfg.loss.margin)?
        }
        Arch::Quadruplet => {
            let q = (
                embed(images[0])?,
                embed(images[1])?,
                embed(images[2])?,
                embed(images[3])?,
            );
            quadruplet_loss(&[q], cfg.loss.quad_margins.0, cfg.loss.quad_margins.1)?
        }
    };

    // Mining applies to every triplet/quadruplet tuple; for siamese it is
    // only meaningful on positive pairs (erasing shared evidence).
    let mine = cfg.loss.gamma > 0.0 && same_class != Some(false);
    let owned: Vec<Tensor>;
    let l_sm = if mine {
        owned = images.iter().map(|&t| t.clone()).collect();
        mining_forward(
            &cfg.encoder,
            params,
            &owned,
            cfg.arch(),
            same_class,
            &cfg.masking,
            cfg.detach_weights,
        )?
    } else {
        Tensor::scalar(0.0)
    };

    let loss = total_loss(&l_ml, &l_sm, cfg.loss.gamma)?;
    let grads = if loss.has_node() {
        ParamGrads::from_gradient_set(params, &loss.backward(false)?)?
    } else {
        // A fully inactive hinge on a detached path cannot happen with live
        // parameters, but keep the zero fallback for robustness.
        ParamGrads::zeros_like(params)
    };

    Ok(TupleResult {
        l_ml: l_ml.value(),
        l_sm: l_sm.value(),
        grads,
        mined: mine,
    })
}

fn gather_tuple_images<'d>(
    records: &'d [DatasetRecord],
    tuples: &TupleSet,
) -> Vec<(Vec<&'d Tensor>, Option<bool>)> {
    match tuples {
        TupleSet::Pairs(pairs) => pairs
            .iter()
            .map(|p| {
                (
                    vec![&records[p.a].image, &records[p.b].image],
                    Some(p.same_class),
                )
            })
            .collect(),
        TupleSet::Triplets(ts) => ts
            .iter()
            .map(|t| {
                (
                    vec![
                        &records[t.anchor].image,
                        &records[t.positive].image,
                        &records[t.negative].image,
                    ],
                    None,
                )
            })
            .collect(),
        TupleSet::Quadruplets(qs) => qs
            .iter()
            .map(|q| {
                (
                    vec![
                        &records[q.anchor].image,
                        &records[q.positive].image,
                        &records[q.negative1].image,
                        &records[q.negative2].image,
                    ],
                    None,
                )
            })
            .collect(),
    }
}

/// Train from scratch on `records`. Deterministic in the config seed: two
/// identical runs produce identical checkpoints and logs.
pub fn train(records: &[DatasetRecord], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut rng = SplitMix64::new(cfg.seed);
    let init_seed = rng.next_u64();
    let mut params = init_params(&cfg.encoder, init_seed)?;
    let mut opt_state = OptimizerState::default();
    let optim_cfg = cfg.optim_config();

    let steps_per_epoch = records.len().div_ceil(cfg.batch_tuples);
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut mining_calls = 0u64;

    for epoch in 0..cfg.epochs {
        let mut epoch_ml = 0.0;
        let mut epoch_sm = 0.0;
        let mut epoch_total = 0.0;

        for step in 0..steps_per_epoch {
            let tuples = sample_tuples(records, cfg.arch(), cfg.batch_tuples, &mut rng)?;
            let tuple_inputs = gather_tuple_images(records, &tuples);

            let results: Vec<Result<TupleResult>> = tuple_inputs
                .par_iter()
                .map(|(images, same_class)| tuple_step(cfg, &params, images, *same_class))
                .collect();

            let mut batch_grads = ParamGrads::zeros_like(&params);
            let mut batch_ml = 0.0;
            let mut batch_sm = 0.0;
            let k = results.len() as f64;
            for r in results {
                let r = r.map_err(|e| {
                    Error::Training(format!("epoch {epoch} step {step}: {e}"))
                })?;
                batch_grads.accumulate(&r.grads);
                batch_ml += r.l_ml;
                batch_sm += r.l_sm;
                if r.mined {
                    mining_calls += 1;
                }
            }
            batch_grads.scale(1.0 / k);
            batch_ml /= k;
            batch_sm /= k;
            let batch_total = batch_ml + cfg.loss.gamma * batch_sm;
            if !batch_total.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite loss at epoch {epoch} step {step}"
                )));
            }

            params = optimizer_step(&params, &batch_grads, &mut opt_state, &optim_cfg)?;
            epoch_ml += batch_ml;
            epoch_sm += batch_sm;
            epoch_total += batch_total;
        }

        metrics.push(EpochMetrics {
            epoch,
            l_ml: epoch_ml / steps_per_epoch as f64,
            l_sm: epoch_sm / steps_per_epoch as f64,
            l_total: epoch_total / steps_per_epoch as f64,
        });
    }

    let checkpoint = Checkpoint {
        version: FORMAT_VERSION,
        encoder: cfg.encoder.clone(),
        params,
        optimizer_kind: cfg.optimizer,
        optimizer_state: opt_state,
        rng_state: rng.state(),
        epoch: cfg.epochs as u32,
    };

    Ok(TrainOutcome { checkpoint, metrics, mining_calls })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::encode_checkpoint;
    use crate::data::generate_synthetic;

    fn tiny_train_config(arch: Arch, gamma: f64, epochs: usize) -> TrainConfig {
        TrainConfig {
            encoder: EncoderConfig {
                input_hw: 16,
                input_channels: 1,
                conv_channels: vec![4, 8],
                kernel: 3,
                embed_dim: 8,
                attention_layer: 1,
            },
            loss: LossConfig { arch, gamma, ..LossConfig::default() },
            epochs,
            batch_tuples: 4,
            learning_rate: 1e-3,
            seed: 7,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn gamma_zero_never_mines() {
        let records = generate_synthetic(3, 4, 16, 1).unwrap();
        let cfg = tiny_train_config(Arch::Triplet, 0.0, 1);
        let out = train(&records, &cfg).unwrap();
        assert_eq!(out.mining_calls, 0);
        assert!(out.metrics.iter().all(|m| m.l_sm == 0.0));
    }

    #[test]
    fn gamma_positive_mines_every_tuple() {
        let records = generate_synthetic(3, 4, 16, 1).unwrap();
        let cfg = tiny_train_config(Arch::Triplet, 0.25, 1);
        let out = train(&records, &cfg).unwrap();
        let steps = records.len().div_ceil(cfg.batch_tuples) as u64;
        assert_eq!(out.mining_calls, steps * cfg.batch_tuples as u64);
    }

    #[test]
    fn identical_seeds_identical_checkpoints_and_logs() {
        let records = generate_synthetic(3, 4, 16, 2).unwrap();
        let cfg = tiny_train_config(Arch::Triplet, 0.25, 2);
        let a = train(&records, &cfg).unwrap();
        let b = train(&records, &cfg).unwrap();
        assert_eq!(encode_checkpoint(&a.checkpoint), encode_checkpoint(&b.checkpoint));
        let log_a: Vec<String> = a.metrics.iter().map(|m| m.to_json_line()).collect();
        let log_b: Vec<String> = b.metrics.iter().map(|m| m.to_json_line()).collect();
        assert_eq!(log_a, log_b);
    }

    #[test]
    fn every_parameter_moves_in_a_sanity_epoch() {
        // Adam leaves a parameter untouched only if its gradient was zero at
        // every step; all-params-moved implies a fully live graph.
        let records = generate_synthetic(3, 4, 16, 3).unwrap();
        let cfg = tiny_train_config(Arch::Triplet, 0.0, 1);
        let out = train(&records, &cfg).unwrap();
        let mut probe_rng = SplitMix64::new(cfg.seed);
        let initial = init_params(&cfg.encoder, probe_rng.next_u64()).unwrap();
        for (name, before) in initial.iter() {
            let after = out.checkpoint.params.get(name).unwrap();
            assert_ne!(
                before.data(),
                after.data(),
                "{name} received no gradient during the sanity epoch"
            );
        }
    }

    #[test]
    fn loss_log_schema_is_stable() {
        let m = EpochMetrics { epoch: 3, l_ml: 0.5, l_sm: -0.25, l_total: 0.4375 };
        assert_eq!(
            m.to_json_line(),
            r#"{"epoch":3,"l_ml":0.5,"l_sm":-0.25,"l_total":0.4375}"#
        );
    }

    #[test]
    fn siamese_and_quadruplet_archs_train() {
        let records = generate_synthetic(3, 4, 16, 5).unwrap();
        for arch in [Arch::Siamese, Arch::Quadruplet] {
            let cfg = tiny_train_config(arch, 0.25, 1);
            let out = train(&records, &cfg).unwrap();
            assert_eq!(out.metrics.len(), 1);
            assert!(out.metrics[0].l_total.is_finite());
            if arch == Arch::Siamese {
                // Only positive pairs mine.
                assert!(out.mining_calls > 0);
                let steps = records.len().div_ceil(cfg.batch_tuples) as u64;
                assert!(out.mining_calls < steps * cfg.batch_tuples as u64);
            }
        }
    }

    #[test]
    fn training_loss_decreases_on_easy_data() {
        let records = generate_synthetic(2, 8, 16, 8).unwrap();
        let mut cfg = tiny_train_config(Arch::Triplet, 0.0, 6);
        cfg.learning_rate = 3e-3;
        let out = train(&records, &cfg).unwrap();
        let first = out.metrics.first().unwrap().l_ml;
        let last = out.metrics.last().unwrap().l_ml;
        assert!(last < first, "l_ml did not drop: {first} -> {last}");
    }
}
