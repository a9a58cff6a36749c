//! Balanced mini-batches: `N` categories × `M` instances, each instance
//! contributing both modality views.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CcsError, Result};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchSpec {
    /// Categories per batch.
    #[serde(rename = "N")]
    pub n: usize,
    /// Instances per category.
    #[serde(rename = "M")]
    pub m: usize,
}

impl Default for BatchSpec {
    fn default() -> Self {
        BatchSpec { n: 4, m: 4 }
    }
}

impl BatchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n < 2 || self.m < 2 {
            return Err(CcsError::Config(format!(
                "batch needs N >= 2 and M >= 2, got N = {}, M = {}",
                self.n, self.m
            )));
        }
        Ok(())
    }

    pub fn instances(&self) -> usize {
        self.n * self.m
    }

    pub fn views(&self) -> usize {
        2 * self.instances()
    }
}

/// Positions of a pool of instances grouped by label.
#[derive(Clone, Debug)]
pub struct LabelIndex {
    labels: Vec<usize>,
    groups: Vec<(usize, Vec<usize>)>,
}

impl LabelIndex {
    /// `labels[i]` is the label of pool position `i`.
    pub fn new(labels: &[usize]) -> Self {
        let mut groups: Vec<(usize, Vec<usize>)> = Vec::new();
        let mut sorted: Vec<usize> = labels.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        for c in sorted {
            let members = (0..labels.len()).filter(|&i| labels[i] == c).collect();
            groups.push((c, members));
        }
        LabelIndex {
            labels: labels.to_vec(),
            groups,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_categories(&self) -> usize {
        self.groups.len()
    }

    pub fn label(&self, pos: usize) -> usize {
        self.labels[pos]
    }
}

/// Pool positions and labels of one batch, grouped by category.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Batch {
    pub positions: Vec<usize>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn instances(&self) -> usize {
        self.positions.len()
    }

    pub fn views(&self) -> usize {
        2 * self.positions.len()
    }
}

/// Draws one batch from `index` using `rng`.
pub fn draw_batch<R: Rng + ?Sized>(
    index: &LabelIndex,
    spec: BatchSpec,
    rng: &mut R,
) -> Result<Batch> {
    spec.validate()?;
    if index.n_categories() < spec.n {
        return Err(CcsError::Config(format!(
            "batch needs {} categories, the pool has {}",
            spec.n,
            index.n_categories()
        )));
    }
    let chosen: Vec<&(usize, Vec<usize>)> = index.groups.choose_multiple(rng, spec.n).collect();
    let mut positions = Vec::with_capacity(spec.instances());
    let mut labels = Vec::with_capacity(spec.instances());
    for (label, members) in chosen {
        if members.len() >= spec.m {
            positions.extend(members.choose_multiple(rng, spec.m).copied());
        } else {
            for _ in 0..spec.m {
                positions.push(*members.choose(rng).expect("nonempty group"));
            }
        }
        labels.extend(std::iter::repeat_n(*label, spec.m));
    }
    Ok(Batch { positions, labels })
}

/// Stateful batch source.
pub struct Sampler {
    spec: BatchSpec,
    rng: ChaCha8Rng,
}

impl Sampler {
    pub fn new(spec: BatchSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        Ok(Sampler {
            spec,
            rng: seed::stream(seed, &[]),
        })
    }

    pub fn next_batch(&mut self, index: &LabelIndex) -> Result<Batch> {
        draw_batch(index, self.spec, &mut self.rng)
    }
}

/// The batches of one epoch: `⌈pool / (N·M)⌉` of them, drawn from a stream
/// keyed by `(base_seed, epoch)`.
pub fn epoch_plan(
    index: &LabelIndex,
    spec: BatchSpec,
    base_seed: u64,
    epoch: usize,
) -> Result<Vec<Batch>> {
    spec.validate()?;
    let count = index.len().div_ceil(spec.instances());
    let mut rng = seed::stream(base_seed, &[seed::TAG_EPOCH, epoch as u64]);
    let mut plan: Vec<Batch> = (0..count)
        .map(|_| draw_batch(index, spec, &mut rng))
        .collect::<Result<_>>()?;
    plan.shuffle(&mut rng);
    Ok(plan)
}
