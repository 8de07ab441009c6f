use rand::seq::SliceRandom;
use rand::Rng;

use crate::corpus::SampleView;
use crate::error::{Error, Result};

/// `n` same-class pairs with pairwise-distinct classes. Rows `2p` and
/// `2p + 1` of every per-batch matrix belong to pair `p`; `2p` is the anchor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairBatch {
    /// Bundle sample indices, `2n` long.
    pub indices: Vec<usize>,
    pub class_of_pair: Vec<usize>,
    /// Whether each image may feed the concept loss.
    pub supervised_flags: Vec<bool>,
}

impl PairBatch {
    pub fn n_pairs(&self) -> usize {
        self.class_of_pair.len()
    }

    /// Class label per row.
    pub fn row_classes(&self) -> Vec<usize> {
        self.class_of_pair.iter().flat_map(|&c| [c, c]).collect()
    }
}

/// Train samples grouped by class, restricted to classes with at least two
/// samples.
#[derive(Clone, Debug)]
pub struct PairSampler {
    groups: Vec<(usize, Vec<usize>)>,
    labeled: Vec<bool>,
}

impl PairSampler {
    pub fn new(view: &SampleView<'_>) -> Self {
        let groups = view
            .by_class()
            .into_iter()
            .enumerate()
            .filter(|(_, members)| members.len() >= 2)
            .collect();
        PairSampler {
            groups,
            labeled: view.bundle().labeled_mask.clone(),
        }
    }

    pub fn eligible_classes(&self) -> usize {
        self.groups.len()
    }

    /// Draws `n` classes without replacement (partial Fisher–Yates), then two
    /// distinct samples from each.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<PairBatch> {
        if n == 0 || n > self.groups.len() {
            return Err(Error::InsufficientClasses {
                needed: n.max(1),
                available: self.groups.len(),
            });
        }
        let mut order: Vec<usize> = (0..self.groups.len()).collect();
        let (chosen, _) = order.partial_shuffle(rng, n);
        let mut indices = Vec::with_capacity(2 * n);
        let mut class_of_pair = Vec::with_capacity(n);
        for &g in chosen.iter() {
            let (class, members) = &self.groups[g];
            let picks = rand::seq::index::sample(rng, members.len(), 2);
            indices.push(members[picks.index(0)]);
            indices.push(members[picks.index(1)]);
            class_of_pair.push(*class);
        }
        let supervised_flags = indices.iter().map(|&i| self.labeled[i]).collect();
        Ok(PairBatch {
            indices,
            class_of_pair,
            supervised_flags,
        })
    }
}

pub fn sample_pair_batch<R: Rng + ?Sized>(
    view: &SampleView<'_>,
    n: usize,
    rng: &mut R,
) -> Result<PairBatch> {
    PairSampler::new(view).sample(n, rng)
}
