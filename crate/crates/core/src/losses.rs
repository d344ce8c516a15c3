//! Standard metric-learning objectives and the combined training objective
//! `L = L_ml + gamma * L_sm`.

use serde::{Deserialize, Serialize};

use crate::attention::Arch;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub arch: Arch,
    /// Triplet hinge margin.
    pub margin: f64,
    /// Contrastive (pair) margin.
    pub contrastive_margin: f64,
    /// Quadruplet margins (anchor-negative hinge, negative-negative hinge).
    pub quad_margins: (f64, f64),
    /// Weight of the mining loss in the combined objective.
    pub gamma: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            arch: Arch::Triplet,
            margin: 0.5,
            contrastive_margin: 1.0,
            quad_margins: (0.5, 0.25),
            gamma: 0.25,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.margin <= 0.0 || self.contrastive_margin <= 0.0 {
            return Err(Error::Config("margins must be positive".into()));
        }
        if self.quad_margins.0 <= 0.0 || self.quad_margins.1 <= 0.0 {
            return Err(Error::Config("quadruplet margins must be positive".into()));
        }
        if self.gamma < 0.0 {
            return Err(Error::Config(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        Ok(())
    }
}

fn distance(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.sub(b)?.euclidean_norm()
}

fn mean_of(terms: Vec<Tensor>, op: &'static str) -> Result<Tensor> {
    let mut iter = terms.into_iter();
    let first = iter.next().ok_or_else(|| Error::InvalidArgument {
        op,
        msg: "empty batch".into(),
    })?;
    let mut count = 1usize;
    let total = iter.try_fold(first, |acc, t| {
        count += 1;
        acc.add(&t)
    })?;
    total.scale(1.0 / count as f64)
}

/// Mean hinge `max(||fa-fp|| - ||fa-fn|| + margin, 0)` over a triplet batch.
pub fn triplet_loss(triplets: &[(Tensor, Tensor, Tensor)], margin: f64) -> Result<Tensor> {
    let terms = triplets
        .iter()
        .map(|(fa, fp, fnn)| {
            distance(fa, fp)?
                .sub(&distance(fa, fnn)?)?
                .add_scalar(margin)?
                .relu()
        })
        .collect::<Result<Vec<_>>>()?;
    mean_of(terms, "triplet_loss")
}

/// Mean contrastive loss `y*d^2 + (1-y)*max(margin-d, 0)^2` over pairs,
/// with `y = 1` for same-class pairs.
pub fn contrastive_loss(pairs: &[(Tensor, Tensor, bool)], margin: f64) -> Result<Tensor> {
    let terms = pairs
        .iter()
        .map(|(f1, f2, same)| {
            let d = distance(f1, f2)?;
            if *same {
                d.mul(&d)
            } else {
                let hinge = d.neg()?.add_scalar(margin)?.relu()?;
                hinge.mul(&hinge)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    mean_of(terms, "contrastive_loss")
}

/// Mean two-hinge quadruplet loss:
/// `max(d_ap - d_an1 + a1, 0) + max(d_ap - d_n1n2 + a2, 0)`.
pub fn quadruplet_loss(
    quadruplets: &[(Tensor, Tensor, Tensor, Tensor)],
    margin1: f64,
    margin2: f64,
) -> Result<Tensor> {
    let terms = quadruplets
        .iter()
        .map(|(fa, fp, fn1, fn2)| {
            let d_ap = distance(fa, fp)?;
            let h1 = d_ap.sub(&distance(fa, fn1)?)?.add_scalar(margin1)?.relu()?;
            let h2 = d_ap.sub(&distance(fn1, fn2)?)?.add_scalar(margin2)?.relu()?;
            h1.add(&h2)
        })
        .collect::<Result<Vec<_>>>()?;
    mean_of(terms, "quadruplet_loss")
}

/// `l_ml + gamma * l_sm`.
pub fn total_loss(l_ml: &Tensor, l_sm: &Tensor, gamma: f64) -> Result<Tensor> {
    l_ml.add(&l_sm.scale(gamma)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;
    use crate::tensor::gradcheck::finite_diff_check;

    fn vec_t(v: &[f64]) -> Tensor {
        Tensor::new(&[v.len()], v.to_vec()).unwrap()
    }

    fn random_unit(d: usize, rng: &mut SplitMix64) -> Tensor {
        let v: Vec<f64> = (0..d).map(|_| rng.uniform(-1.0, 1.0)).collect();
        vec_t(&v).l2_normalize().unwrap()
    }

    #[test]
    fn triplet_hinge_inactive() {
        let fa = vec_t(&[1.0, 0.0]);
        let fnn = vec_t(&[0.0, 1.0]);
        let loss = triplet_loss(&[(fa.clone(), fa, fnn)], 0.5).unwrap();
        assert_eq!(loss.value(), 0.0);
    }

    #[test]
    fn triplet_equal_distances_give_margin() {
        let fa = vec_t(&[1.0, 0.0]);
        let fp = vec_t(&[0.0, 1.0]);
        let fnn = vec_t(&[0.0, -1.0]);
        let loss = triplet_loss(&[(fa, fp, fnn)], 0.5).unwrap();
        assert!((loss.value() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn triplet_empty_batch_is_an_error() {
        assert!(triplet_loss(&[], 0.5).is_err());
    }

    #[test]
    fn triplet_mixed_batch_matches_plain_loop() {
        let mut rng = SplitMix64::new(15);
        let margin = 0.5;
        let batch: Vec<_> = (0..2)
            .map(|_| {
                (
                    random_unit(6, &mut rng),
                    random_unit(6, &mut rng),
                    random_unit(6, &mut rng),
                )
            })
            .collect();
        let loss = triplet_loss(&batch, margin).unwrap().value();

        let norm = |a: &Tensor, b: &Tensor| -> f64 {
            let s: f64 = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
            (s + 1e-12).sqrt()
        };
        let expect: f64 = batch
            .iter()
            .map(|(fa, fp, fnn)| (norm(fa, fp) - norm(fa, fnn) + margin).max(0.0))
            .sum::<f64>()
            / batch.len() as f64;
        assert!((loss - expect).abs() < 1e-12);
    }

    #[test]
    fn contrastive_same_class_identical_is_zero() {
        let f = vec_t(&[0.6, 0.8]);
        let loss = contrastive_loss(&[(f.clone(), f, true)], 1.0).unwrap();
        assert!(loss.value() < 1e-11);
    }

    #[test]
    fn contrastive_far_negatives_are_free() {
        let f1 = vec_t(&[1.0, 0.0]);
        let f2 = vec_t(&[-1.0, 0.0]);
        let loss = contrastive_loss(&[(f1, f2, false)], 1.0).unwrap();
        assert_eq!(loss.value(), 0.0);
    }

    #[test]
    fn contrastive_coincident_negatives_cost_squared_margin() {
        let f = vec_t(&[0.6, 0.8]);
        let loss = contrastive_loss(&[(f.clone(), f, false)], 1.0).unwrap();
        assert!((loss.value() - 1.0).abs() < 1e-5);
    }

    #[test]
    fn quadruplet_inactive_hinges() {
        let fa = vec_t(&[1.0, 0.0]);
        let fp = vec_t(&[1.0, 0.0]);
        let fn1 = vec_t(&[0.0, 1.0]);
        let fn2 = vec_t(&[0.0, -1.0]);
        let loss = quadruplet_loss(&[(fa, fp, fn1, fn2)], 0.5, 0.25).unwrap();
        assert_eq!(loss.value(), 0.0);
    }

    #[test]
    fn quadruplet_equal_distances_sum_margins() {
        // d_ap = d_an1 = d_n1n2 = sqrt(2) on axis vectors.
        let fa = vec_t(&[1.0, 0.0, 0.0]);
        let fp = vec_t(&[0.0, 1.0, 0.0]);
        let fn1 = vec_t(&[0.0, 0.0, 1.0]);
        let fn2 = vec_t(&[0.0, -1.0, 0.0]);
        let loss = quadruplet_loss(&[(fa, fp, fn1, fn2)], 0.5, 0.25).unwrap();
        assert!((loss.value() - 0.75).abs() < 1e-12);
    }

    #[test]
    fn total_loss_weighting() {
        let l_ml = Tensor::scalar(1.0);
        let l_sm = Tensor::scalar(2.0);
        assert_eq!(total_loss(&l_ml, &l_sm, 0.25).unwrap().value(), 1.5);
        assert_eq!(total_loss(&l_ml, &l_sm, 0.0).unwrap().value(), 1.0);
    }

    #[test]
    fn losses_are_nonnegative_on_random_batches() {
        let mut rng = SplitMix64::new(8);
        for _ in 0..20 {
            let t = vec![(
                random_unit(5, &mut rng),
                random_unit(5, &mut rng),
                random_unit(5, &mut rng),
            )];
            assert!(triplet_loss(&t, 0.5).unwrap().value() >= 0.0);
            let p = vec![(random_unit(5, &mut rng), random_unit(5, &mut rng), rng.flip())];
            assert!(contrastive_loss(&p, 1.0).unwrap().value() >= 0.0);
            let q = vec![(
                random_unit(5, &mut rng),
                random_unit(5, &mut rng),
                random_unit(5, &mut rng),
                random_unit(5, &mut rng),
            )];
            assert!(quadruplet_loss(&q, 0.5, 0.25).unwrap().value() >= 0.0);
        }
    }

    #[test]
    fn triplet_loss_is_rotation_invariant() {
        // Distances are preserved by an orthogonal map; build one for R^2.
        let theta = 0.83f64;
        let rotate = |t: &Tensor| {
            let d = t.data();
            vec_t(&[
                theta.cos() * d[0] - theta.sin() * d[1],
                theta.sin() * d[0] + theta.cos() * d[1],
            ])
        };
        let mut rng = SplitMix64::new(30);
        let batch: Vec<_> = (0..4)
            .map(|_| {
                (
                    random_unit(2, &mut rng),
                    random_unit(2, &mut rng),
                    random_unit(2, &mut rng),
                )
            })
            .collect();
        let rotated: Vec<_> = batch
            .iter()
            .map(|(a, p, n)| (rotate(a), rotate(p), rotate(n)))
            .collect();
        let l = triplet_loss(&batch, 0.5).unwrap().value();
        let lr = triplet_loss(&rotated, 0.5).unwrap().value();
        assert!((l - lr).abs() < 1e-12);
    }

    #[test]
    fn loss_gradients_match_fd_away_from_hinges() {
        let mut rng = SplitMix64::new(44);
        let fp = random_unit(4, &mut rng);
        let fnn = random_unit(4, &mut rng);
        let point = random_unit(4, &mut rng);
        let err = finite_diff_check(
            |fa| triplet_loss(&[(fa.clone(), fp.clone(), fnn.clone())], 0.5),
            &point,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "triplet fd error {err}");

        let err = finite_diff_check(
            |f1| contrastive_loss(&[(f1.clone(), fp.clone(), true)], 1.0),
            &point,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "contrastive fd error {err}");

        let fn2 = random_unit(4, &mut rng);
        let err = finite_diff_check(
            |fa| quadruplet_loss(&[(fa.clone(), fp.clone(), fnn.clone(), fn2.clone())], 0.5, 0.25),
            &point,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "quadruplet fd error {err}");
    }

    #[test]
    fn config_validation() {
        let mut cfg = LossConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.gamma = -0.1;
        assert!(cfg.validate().is_err());
        cfg.gamma = 0.25;
        cfg.margin = 0.0;
        assert!(cfg.validate().is_err());
    }
}
