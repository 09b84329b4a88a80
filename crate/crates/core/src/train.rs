//! Plain SGD over the contrastive objective.
//!
//! Per-pair gradients are computed in parallel, then summed in pair order by
//! the single writer before the update, so runs are bit-reproducible for a
//! given seed regardless of thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::contrastive::{lr_at, pair_gradients, TrainConfig};
use crate::data::{PatchRecord, Split};
use crate::error::{Error, Result};
use crate::layer::Mode;
use crate::network::{build_network, Network, NetworkConfig};
use crate::pairs::{PairBatch, PairSampler};
use crate::tensor::Tensor;
use crate::Scalar;

const PAIR_STREAM: u64 = 0x9a1f_0000_0000_0001;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean per-pair loss of each epoch.
    pub loss_history: Vec<f64>,
    /// Learning rate in effect at the end of each epoch.
    pub lr_history: Vec<f64>,
    pub steps: u64,
    pub final_lr: f64,
}

impl TrainReport {
    /// `epoch,mean_loss,lr` with 1-based epochs.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,mean_loss,lr\n");
        for (i, (loss, lr)) in self.loss_history.iter().zip(&self.lr_history).enumerate() {
            out.push_str(&format!("{},{loss},{lr}\n", i + 1));
        }
        out
    }
}

/// Progress notifications. Returning an error from the observer aborts
/// training with that error.
pub enum TrainEvent<'a, T> {
    Batch {
        step: u64,
        batch: &'a PairBatch,
        /// The training set the batch indexes into.
        records: &'a [PatchRecord<T>],
    },
    EpochEnd {
        /// 1-based.
        epoch: usize,
        mean_loss: f64,
        lr: f64,
        network: &'a Network<T>,
    },
}

fn mix(seed: u64, step: u64, index: u64) -> u64 {
    // splitmix64 finalizer over the combined key
    let mut z = seed ^ step.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ index.wrapping_mul(0xd1b5_4a32_d192_ed03);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn train<T: Scalar>(data: &[PatchRecord<T>], net_cfg: &NetworkConfig, cfg: &TrainConfig) -> Result<(Network<T>, TrainReport)> {
    train_with_observer(data, net_cfg, cfg, |_| Ok(()))
}

/// Trains on the records whose split is [`Split::Train`]; others are ignored.
pub fn train_with_observer<T: Scalar>(
    data: &[PatchRecord<T>],
    net_cfg: &NetworkConfig,
    cfg: &TrainConfig,
    mut observer: impl FnMut(TrainEvent<'_, T>) -> Result<()>,
) -> Result<(Network<T>, TrainReport)> {
    cfg.validate()?;
    let mut network = build_network::<T>(net_cfg, cfg.seed)?;
    let train_set: Vec<PatchRecord<T>> = data.iter().filter(|r| r.split == Split::Train).cloned().collect();
    if let Some(r) = train_set.iter().find(|r| r.label.is_uncertain()) {
        return Err(Error::Protocol(format!("uncertain record {} is marked for training", r.patch_id)));
    }
    for r in &train_set {
        network.check_input(&r.pixels)?;
    }
    let mut report = TrainReport {
        loss_history: Vec::with_capacity(cfg.epochs),
        lr_history: Vec::with_capacity(cfg.epochs),
        steps: 0,
        final_lr: lr_at(0, cfg),
    };
    if cfg.epochs == 0 {
        return Ok((network, report));
    }

    let sampler = PairSampler::new(&train_set)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ PAIR_STREAM);
    let margin = T::lit(cfg.margin);
    network.set_mode(Mode::Training);
    let mut step = 0u64;

    for epoch in 1..=cfg.epochs {
        let mut loss_sum = 0.0;
        let mut n_pairs = 0usize;
        for batch in sampler.epoch(cfg.batch_size, cfg.similar_fraction, &mut rng) {
            observer(TrainEvent::Batch {
                step,
                batch: &batch,
                records: &train_set,
            })?;
            let net = &network;
            let per_pair: Vec<(T, Vec<Tensor<T>>)> = batch
                .pairs
                .par_iter()
                .enumerate()
                .map(|(i, p)| {
                    let mut pair_rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, step, i as u64));
                    pair_gradients(
                        net,
                        &train_set[p.anchor].pixels,
                        &train_set[p.partner].pixels,
                        p.label,
                        margin,
                        Mode::Training,
                        &mut pair_rng,
                    )
                })
                .collect::<Result<_>>()?;

            let mut iter = per_pair.into_iter();
            let (first_loss, mut grads) = iter.next().expect("batches are non-empty");
            let mut batch_loss = first_loss;
            for (loss, g) in iter {
                batch_loss += loss;
                for (acc, gi) in grads.iter_mut().zip(&g) {
                    acc.add_assign(gi)?;
                }
            }
            if !batch_loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::Numeric(format!("non-finite loss or gradient at step {step}")));
            }
            let lr = T::lit(lr_at(step, cfg));
            for (param, g) in network.params_mut().into_iter().zip(&grads) {
                param.add_scaled(g, -lr)?;
            }
            loss_sum += batch_loss.as_f64();
            n_pairs += batch.pairs.len();
            step += 1;
        }
        let mean_loss = loss_sum / n_pairs as f64;
        let lr = lr_at(step, cfg);
        report.loss_history.push(mean_loss);
        report.lr_history.push(lr);
        observer(TrainEvent::EpochEnd {
            epoch,
            mean_loss,
            lr,
            network: &network,
        })?;
    }

    network.set_mode(Mode::Inference);
    report.steps = step;
    report.final_lr = lr_at(step, cfg);
    Ok((network, report))
}
