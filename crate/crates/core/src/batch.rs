//! Class-balanced minibatches over paired partition sets.
//!
//! A batch holds one slice per class `y`. Every member of slice `y` is
//! trained toward target `y`, and losses average first within each nonempty
//! slice and then across slices.

use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub slices: Vec<Vec<usize>>,
}

impl Batch {
    /// Every member of `first[y]` and `second[y]`, for each class.
    pub fn full(first: &[Vec<usize>], second: &[Vec<usize>]) -> Self {
        Batch {
            slices: first
                .iter()
                .zip(second)
                .map(|(a, b)| a.iter().chain(b).copied().collect())
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.slices.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(record index, target class, weight)` with weights summing to one.
    pub fn weighted(&self) -> Result<Vec<(usize, usize, f64)>> {
        let present = self.slices.iter().filter(|s| !s.is_empty()).count();
        if present == 0 {
            return Err(Error::EmptyBatch);
        }
        let mut out = Vec::with_capacity(self.len());
        for (y, slice) in self.slices.iter().enumerate() {
            let w = 1.0 / (present * slice.len().max(1)) as f64;
            out.extend(slice.iter().map(|&i| (i, y, w)));
        }
        Ok(out)
    }
}

/// Per-slot quotas `[cor_0, other_0, cor_1, other_1, ...]` summing to
/// `batch_size`; the remainder goes to the lowest slots.
pub fn slot_quotas(batch_size: usize, num_classes: usize) -> Vec<usize> {
    let slots = 2 * num_classes;
    let base = batch_size / slots;
    let extra = batch_size - base * slots;
    (0..slots).map(|s| base + usize::from(s < extra)).collect()
}

fn draw(set: &[usize], count: usize, rng: &mut impl Rng, out: &mut Vec<usize>) {
    if count == 0 || set.is_empty() {
        return;
    }
    if set.len() >= count {
        out.extend(index::sample(rng, set.len(), count).into_iter().map(|k| set[k]));
    } else {
        out.extend((0..count).map(|_| set[rng.random_range(0..set.len())]));
    }
}

/// Draws a balanced batch: for each class, its quota from `correct[y]` and
/// the same from `other[y]`, with replacement only when a set is too small.
/// When one of the two sets is empty the class takes both quotas from the
/// other; when both are empty the class is absent from the batch.
pub fn sample_balanced(
    correct: &[Vec<usize>],
    other: &[Vec<usize>],
    batch_size: usize,
    rng: &mut impl Rng,
) -> Batch {
    let quotas = slot_quotas(batch_size, correct.len());
    let slices = correct
        .iter()
        .zip(other)
        .enumerate()
        .map(|(y, (cor, oth))| {
            let (qa, qb) = (quotas[2 * y], quotas[2 * y + 1]);
            let mut slice = Vec::with_capacity(qa + qb);
            match (cor.is_empty(), oth.is_empty()) {
                (false, false) => {
                    draw(cor, qa, rng, &mut slice);
                    draw(oth, qb, rng, &mut slice);
                }
                (false, true) => draw(cor, qa + qb, rng, &mut slice),
                (true, false) => draw(oth, qa + qb, rng, &mut slice),
                (true, true) => {}
            }
            slice
        })
        .collect();
    Batch { slices }
}
