//! Contrastive objective and learning-rate schedule.
//!
//! Per pair, with `d2 = ||f(x1) - f(x2)||^2`:
//!
//! ```text
//! loss = (1 - y) * d2 + y * max(0, m - d2)
//! ```
//!
//! `y = 0` marks an anchor-neighbor pair (same label) and `y = 1` an
//! anchor-distant pair. Note the hinge acts on the *squared* distance, not on
//! the distance as in the more common `max(0, m - d)^2` form. Batch loss is the
//! sum of the per-pair terms.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Result};
use crate::layer::{LayerGrads, Mode};
use crate::network::Network;
use crate::tensor::Tensor;
use crate::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairLabel {
    /// Same label, `y = 0`.
    Neighbor,
    /// Different labels, `y = 1`.
    Distant,
}

impl PairLabel {
    pub fn y(self) -> u8 {
        match self {
            PairLabel::Neighbor => 0,
            PairLabel::Distant => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub margin: f64,
    pub initial_lr: f64,
    pub decay_steps: u64,
    pub decay_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Share of each batch made of anchor-neighbor pairs.
    pub similar_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            margin: 0.9,
            initial_lr: 0.01,
            decay_steps: 10_000,
            decay_rate: 0.9,
            batch_size: 16,
            epochs: 300,
            seed: 0,
            similar_fraction: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        use crate::Error::Config;
        if !(self.margin > 0.0) {
            return Err(Config(format!("margin must be positive, got {}", self.margin)));
        }
        if !(self.initial_lr > 0.0) {
            return Err(Config(format!("initial_lr must be positive, got {}", self.initial_lr)));
        }
        if self.decay_steps == 0 {
            return Err(Config("decay_steps must be positive".into()));
        }
        if !(self.decay_rate > 0.0 && self.decay_rate <= 1.0) {
            return Err(Config(format!("decay_rate must lie in (0, 1], got {}", self.decay_rate)));
        }
        if self.batch_size == 0 {
            return Err(Config("batch_size must be positive".into()));
        }
        if !(self.similar_fraction > 0.0 && self.similar_fraction < 1.0) {
            return Err(Config(format!(
                "similar_fraction must lie in (0, 1), got {}",
                self.similar_fraction
            )));
        }
        Ok(())
    }
}

/// Loss of one pair and its gradients with respect to both embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct PairLoss<T> {
    pub loss: T,
    pub grad_v1: Vec<T>,
    pub grad_v2: Vec<T>,
}

pub fn contrastive_loss<T: Scalar>(v1: &[T], v2: &[T], label: PairLabel, margin: T) -> Result<PairLoss<T>> {
    if v1.len() != v2.len() {
        return Err(dim_err!("embedding axis: lengths {} and {} differ", v1.len(), v2.len()));
    }
    let diff: Vec<T> = v1.iter().zip(v2).map(|(&a, &b)| a - b).collect();
    let d2: T = diff.iter().map(|&d| d * d).sum();
    let two = T::lit(2.0);
    let (loss, scale) = match label {
        PairLabel::Neighbor => (d2, two),
        PairLabel::Distant if margin - d2 > T::zero() => (margin - d2, -two),
        PairLabel::Distant => (T::zero(), T::zero()),
    };
    let grad_v1: Vec<T> = diff.iter().map(|&d| scale * d).collect();
    let grad_v2 = grad_v1.iter().map(|&g| -g).collect();
    Ok(PairLoss { loss, grad_v1, grad_v2 })
}

/// `initial_lr * decay_rate^(step / decay_steps)` with a real-valued exponent.
pub fn lr_at(step: u64, cfg: &TrainConfig) -> f64 {
    cfg.initial_lr * cfg.decay_rate.powf(step as f64 / cfg.decay_steps as f64)
}

/// Loss of one pair and the parameter gradient summed over both twin passes.
pub fn pair_gradients<T: Scalar, R: Rng + ?Sized>(
    network: &Network<T>,
    x1: &Tensor<T>,
    x2: &Tensor<T>,
    label: PairLabel,
    margin: T,
    mode: Mode,
    rng: &mut R,
) -> Result<(T, Vec<Tensor<T>>)> {
    let (v1, trace1) = network.forward_traced(x1, mode, rng)?;
    let (v2, trace2) = network.forward_traced(x2, mode, rng)?;
    let term = contrastive_loss(&v1, &v2, label, margin)?;
    let LayerGrads { grad_params: mut total, .. } = network.backward(&trace1, &term.grad_v1)?;
    let second = network.backward(&trace2, &term.grad_v2)?;
    for (acc, g) in total.iter_mut().zip(&second.grad_params) {
        acc.add_assign(g)?;
    }
    Ok((term.loss, total))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{numeric_gradient, relative_error};
    use proptest::prelude::*;

    #[test]
    fn unit_values() {
        let z = [0.3f64, -0.2];
        let same = contrastive_loss(&z, &z, PairLabel::Neighbor, 0.9).unwrap();
        assert_eq!(same.loss, 0.0);
        assert!(same.grad_v1.iter().chain(&same.grad_v2).all(|&g| g == 0.0));

        let hinge = contrastive_loss(&z, &z, PairLabel::Distant, 0.9).unwrap();
        assert!((hinge.loss - 0.9).abs() < 1e-12);

        let far = contrastive_loss(&[1.0, 0.0], &[0.0, 0.0], PairLabel::Distant, 0.9).unwrap();
        assert_eq!(far.loss, 0.0);
        assert!(far.grad_v1.iter().chain(&far.grad_v2).all(|&g| g == 0.0));

        let near = contrastive_loss(&[0.5f64, 0.0], &[0.0, 0.0], PairLabel::Neighbor, 0.9).unwrap();
        assert!((near.loss - 0.25).abs() < 1e-12);
    }

    #[test]
    fn length_mismatch() {
        assert!(contrastive_loss(&[1.0], &[1.0, 2.0], PairLabel::Neighbor, 0.9).is_err());
    }

    #[test]
    fn schedule_values() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(0, &cfg), 0.01);
        assert!((lr_at(10_000, &cfg) - 0.009).abs() < 1e-15);
        assert!((lr_at(20_000, &cfg) - 0.0081).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            similar_fraction: 1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            decay_rate: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    fn loss_of(v: &[f64], n: usize, label: PairLabel, m: f64) -> f64 {
        contrastive_loss(&v[..n], &v[n..], label, m).unwrap().loss
    }

    proptest! {
        #[test]
        fn loss_is_bounded(v1 in prop::collection::vec(-2.0f64..2.0, 3), v2 in prop::collection::vec(-2.0f64..2.0, 3), m in 0.01f64..3.0) {
            let near = contrastive_loss(&v1, &v2, PairLabel::Neighbor, m).unwrap();
            let far = contrastive_loss(&v1, &v2, PairLabel::Distant, m).unwrap();
            prop_assert!(near.loss >= 0.0);
            prop_assert!(far.loss >= 0.0 && far.loss <= m);
        }

        #[test]
        fn gradients_match_central_differences(
            v1 in prop::collection::vec(-1.0f64..1.0, 4),
            v2 in prop::collection::vec(-1.0f64..1.0, 4),
            distant in any::<bool>(),
        ) {
            let m = 0.9;
            let label = if distant { PairLabel::Distant } else { PairLabel::Neighbor };
            let d2: f64 = v1.iter().zip(&v2).map(|(a, b)| (a - b) * (a - b)).sum();
            prop_assume!((d2 - m).abs() > 1e-3);
            // relative error is meaningless for vanishing gradient components
            prop_assume!(v1.iter().zip(&v2).all(|(a, b)| (a - b).abs() > 1e-3));
            let term = contrastive_loss(&v1, &v2, label, m).unwrap();
            let joined: Vec<f64> = v1.iter().chain(&v2).copied().collect();
            let numeric = numeric_gradient(|v| loss_of(v, 4, label, m), &joined, 1e-5);
            for (a, n) in term.grad_v1.iter().chain(&term.grad_v2).zip(&numeric) {
                prop_assert!(relative_error(*a, *n) <= 1e-6, "analytic {} numeric {}", a, n);
            }
        }

        #[test]
        fn lr_is_non_increasing(step in 0u64..1_000_000, delta in 1u64..100_000) {
            let cfg = TrainConfig::default();
            prop_assert!(lr_at(step + delta, &cfg) <= lr_at(step, &cfg));
        }
    }
}
