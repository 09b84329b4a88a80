use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::contrastive::PairLabel;
use crate::data::{Label, PatchRecord};
use crate::error::{Error, Result};
use crate::Scalar;

/// Two records of the training set, by index, and whether their labels agree.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Pair {
    pub anchor: usize,
    pub partner: usize,
    pub label: PairLabel,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairBatch {
    pub pairs: Vec<Pair>,
}

/// Draws anchor-neighbor and anchor-distant pairs from a labeled set.
///
/// One epoch visits every record exactly once as an anchor, in shuffled
/// order; each partner is drawn uniformly from the matching (or
/// non-matching) label group.
#[derive(Clone, Debug)]
pub struct PairSampler {
    labels: Vec<u32>,
    groups: BTreeMap<u32, Vec<usize>>,
}

impl PairSampler {
    pub fn new<T: Scalar>(records: &[PatchRecord<T>]) -> Result<Self> {
        let mut labels = Vec::with_capacity(records.len());
        let mut groups: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, r) in records.iter().enumerate() {
            match r.label {
                Label::Class(c) => {
                    labels.push(c);
                    groups.entry(c).or_default().push(i);
                }
                Label::Uncertain => {
                    return Err(Error::Data(format!(
                        "uncertain record {} cannot be used for pair sampling",
                        r.patch_id
                    )))
                }
            }
        }
        if records.len() < 2 || groups.len() < 2 {
            return Err(Error::Data(format!(
                "pair sampling needs at least 2 records and 2 classes, got {} records in {} class(es)",
                records.len(),
                groups.len()
            )));
        }
        Ok(Self { labels, groups })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn label(&self, index: usize) -> u32 {
        self.labels[index]
    }

    fn partner<R: Rng + ?Sized>(&self, anchor: usize, similar: bool, rng: &mut R) -> usize {
        let own = self.labels[anchor];
        if similar {
            let group = &self.groups[&own];
            if group.len() == 1 {
                return anchor;
            }
            loop {
                let candidate = *group.choose(rng).expect("non-empty group");
                if candidate != anchor {
                    return candidate;
                }
            }
        } else {
            let others = self.labels.len() - self.groups[&own].len();
            let mut pick = rng.gen_range(0..others);
            for (&label, members) in &self.groups {
                if label == own {
                    continue;
                }
                if pick < members.len() {
                    return members[pick];
                }
                pick -= members.len();
            }
            unreachable!("pick indexes into the other groups")
        }
    }

    /// Pairs for a given list of anchors: the first `round(n * similar_fraction)`
    /// are anchor-neighbor pairs, the rest anchor-distant.
    pub fn batch_for<R: Rng + ?Sized>(&self, anchors: &[usize], similar_fraction: f64, rng: &mut R) -> PairBatch {
        let n_similar = (anchors.len() as f64 * similar_fraction).round() as usize;
        let pairs = anchors
            .iter()
            .enumerate()
            .map(|(i, &anchor)| {
                let similar = i < n_similar;
                Pair {
                    anchor,
                    partner: self.partner(anchor, similar, rng),
                    label: if similar { PairLabel::Neighbor } else { PairLabel::Distant },
                }
            })
            .collect();
        PairBatch { pairs }
    }

    /// One pass over the set with every record as anchor once.
    pub fn epoch<R: Rng + ?Sized>(&self, batch_size: usize, similar_fraction: f64, rng: &mut R) -> Vec<PairBatch> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(rng);
        order
            .chunks(batch_size.max(1))
            .map(|chunk| self.batch_for(chunk, similar_fraction, rng))
            .collect()
    }
}

/// A single batch of `b` pairs with anchors drawn without replacement
/// (reshuffling once the set is exhausted).
pub fn sample_pairs<T: Scalar, R: Rng + ?Sized>(
    train_set: &[PatchRecord<T>],
    b: usize,
    similar_fraction: f64,
    rng: &mut R,
) -> Result<PairBatch> {
    let sampler = PairSampler::new(train_set)?;
    let mut anchors = Vec::with_capacity(b);
    while anchors.len() < b {
        let mut order: Vec<usize> = (0..sampler.len()).collect();
        order.shuffle(rng);
        anchors.extend(order.into_iter().take(b - anchors.len()));
    }
    Ok(sampler.batch_for(&anchors, similar_fraction, rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, Split};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn binary_set(n: usize) -> Vec<PatchRecord<f64>> {
        synth_generate::<f64>(n, (16, 16), 5)
            .unwrap()
            .into_iter()
            .filter(|r| !r.label.is_uncertain())
            .collect()
    }

    #[test]
    fn counts_follow_fraction() {
        let set = binary_set(6);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batch = sample_pairs(&set, 16, 0.5, &mut rng).unwrap();
        assert_eq!(batch.pairs.len(), 16);
        assert_eq!(batch.pairs.iter().filter(|p| p.label.y() == 0).count(), 8);
        assert_eq!(batch.pairs.iter().filter(|p| p.label.y() == 1).count(), 8);
    }

    #[test]
    fn deterministic_for_seed() {
        let set = binary_set(6);
        let a = sample_pairs(&set, 16, 0.5, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = sample_pairs(&set, 16, 0.5, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_single_class_and_uncertain() {
        let set: Vec<_> = binary_set(4).into_iter().filter(|r| r.label == Label::Class(0)).collect();
        assert!(matches!(PairSampler::new(&set), Err(Error::Data(_))));
        let mut set = binary_set(4);
        set[0].label = Label::Uncertain;
        set[0].split = Split::Holdout;
        assert!(matches!(PairSampler::new(&set), Err(Error::Data(_))));
    }

    #[test]
    fn epoch_visits_each_anchor_once() {
        let set = binary_set(9);
        let sampler = PairSampler::new(&set).unwrap();
        let batches = sampler.epoch(4, 0.5, &mut ChaCha8Rng::seed_from_u64(1));
        let mut anchors: Vec<usize> = batches.iter().flat_map(|b| b.pairs.iter().map(|p| p.anchor)).collect();
        anchors.sort_unstable();
        assert_eq!(anchors, (0..18).collect::<Vec<_>>());
        for p in batches.iter().flat_map(|b| &b.pairs) {
            let same = set[p.anchor].label == set[p.partner].label;
            assert_eq!(same, p.label == PairLabel::Neighbor);
            if p.label == PairLabel::Neighbor {
                assert_ne!(p.anchor, p.partner);
            }
        }
    }
}
