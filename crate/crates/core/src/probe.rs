//! Probe-set selection and the per-class prediction partitions.
//!
//! Selection sorts every class by loss, splits it into a low-loss and a
//! high-loss half, and keeps the most confident (lowest entropy) fraction of
//! each half. Partition membership is decided only by the head's argmax.

use std::cmp::Ordering;
use std::fmt::Write as _;

use crate::dataset::EmbeddingDataset;
use crate::error::{Error, Result};
use crate::head::{argmax, cross_entropy, output_entropy, LinearHead};

/// Where one class was split and how many samples each half contributed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassSplit {
    pub class: usize,
    pub class_size: usize,
    pub low_half: usize,
    pub per_half_quota: usize,
    pub selected_low: usize,
    pub selected_high: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeSelection {
    pub indices: Vec<usize>,
    pub ratio: Option<f64>,
    pub splits: Vec<ClassSplit>,
}

impl ProbeSelection {
    /// A probe set chosen by other means, without selection provenance.
    pub fn from_indices(mut indices: Vec<usize>) -> Self {
        indices.sort_unstable();
        indices.dedup();
        ProbeSelection {
            indices,
            ratio: None,
            splits: Vec::new(),
        }
    }
}

/// Score of one candidate record: its loss and output entropy under the head.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeScore {
    pub index: usize,
    pub loss: f64,
    pub entropy: f64,
}

fn by_key_then_index(a: f64, ai: usize, b: f64, bi: usize) -> Ordering {
    a.total_cmp(&b).then(ai.cmp(&bi))
}

pub fn validate_ratio(ratio: f64) -> Result<()> {
    if !(ratio > 0.0 && ratio <= 0.5) {
        return Err(Error::InvalidArgument(format!("probe ratio r must be in (0, 0.5], got {ratio}")));
    }
    Ok(())
}

/// Selects from one class. Returns the chosen indices (unsorted) and the split.
pub fn select_class(scores: &[ProbeScore], ratio: f64) -> Result<(Vec<usize>, usize, usize)> {
    validate_ratio(ratio)?;
    if scores.is_empty() {
        return Err(Error::InvalidDataset("empty class in probe source".into()));
    }
    let n = scores.len();
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| by_key_then_index(a.loss, a.index, b.loss, b.index));
    let low_len = n.div_ceil(2);
    let quota = (ratio * n as f64).ceil() as usize;
    let (low, high) = sorted.split_at(low_len);
    let mut chosen = Vec::new();
    for half in [low, high] {
        let mut half = half.to_vec();
        half.sort_by(|a, b| by_key_then_index(a.entropy, a.index, b.entropy, b.index));
        chosen.extend(half.iter().take(quota).map(|s| s.index));
    }
    Ok((chosen, low_len, quota))
}

pub fn build_probe_set(
    dataset: &EmbeddingDataset,
    head: &LinearHead,
    ratio: f64,
) -> Result<ProbeSelection> {
    validate_ratio(ratio)?;
    head.check_dataset(dataset)?;
    let mut indices = Vec::new();
    let mut splits = Vec::new();
    for (class, members) in dataset.class_indices().into_iter().enumerate() {
        if members.is_empty() {
            return Err(Error::InvalidDataset(format!("class {class} has no samples in the probe source")));
        }
        let scores: Vec<ProbeScore> = members
            .iter()
            .map(|&i| {
                let z = head.logits_unchecked(dataset.embedding(i));
                Ok(ProbeScore {
                    index: i,
                    loss: cross_entropy(&z, class)?,
                    entropy: output_entropy(&z),
                })
            })
            .collect::<Result<_>>()?;
        let (chosen, low_half, quota) = select_class(&scores, ratio)?;
        splits.push(ClassSplit {
            class,
            class_size: members.len(),
            low_half,
            per_half_quota: quota,
            selected_low: quota.min(low_half),
            selected_high: quota.min(members.len() - low_half),
        });
        indices.extend(chosen);
    }
    indices.sort_unstable();
    Ok(ProbeSelection {
        indices,
        ratio: Some(ratio),
        splits,
    })
}

/// Per-class index sets over the probe set.
///
/// * `correct[y]`: label y, predicted y.
/// * `predicted_as[y]`: label other than y, predicted y.
/// * `misclassified[y]`: label y, predicted something else.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbePartitions {
    pub probe: ProbeSelection,
    pub correct: Vec<Vec<usize>>,
    pub predicted_as: Vec<Vec<usize>>,
    pub misclassified: Vec<Vec<usize>>,
}

impl ProbePartitions {
    pub fn num_classes(&self) -> usize {
        self.correct.len()
    }

    pub fn report(&self) -> String {
        let mut out = String::from("class\tcor\tpre\tmis\n");
        for y in 0..self.num_classes() {
            let _ = writeln!(
                out,
                "{y}\t{}\t{}\t{}",
                self.correct[y].len(),
                self.predicted_as[y].len(),
                self.misclassified[y].len()
            );
        }
        out
    }
}

pub fn partition(
    probe: &ProbeSelection,
    dataset: &EmbeddingDataset,
    head: &LinearHead,
) -> Result<ProbePartitions> {
    head.check_dataset(dataset)?;
    let c = dataset.num_classes();
    let mut correct = vec![Vec::new(); c];
    let mut predicted_as = vec![Vec::new(); c];
    let mut misclassified = vec![Vec::new(); c];
    for &i in &probe.indices {
        if i >= dataset.len() {
            return Err(Error::InvalidArgument(format!(
                "probe index {i} out of range for {} records",
                dataset.len()
            )));
        }
        let pred = argmax(&head.logits_unchecked(dataset.embedding(i)));
        let label = dataset.label(i);
        if pred == label {
            correct[label].push(i);
        } else {
            predicted_as[pred].push(i);
            misclassified[label].push(i);
        }
    }
    Ok(ProbePartitions {
        probe: probe.clone(),
        correct,
        predicted_as,
        misclassified,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::EmbeddingRecord;
    use nalgebra::{DMatrix, DVector};

    fn scores(losses: &[f64], entropies: &[f64]) -> Vec<ProbeScore> {
        losses
            .iter()
            .zip(entropies)
            .enumerate()
            .map(|(index, (&loss, &entropy))| ProbeScore { index, loss, entropy })
            .collect()
    }

    #[test]
    fn hand_traced_selection() {
        let s = scores(&[0.1, 0.2, 0.9, 1.4], &[0.3, 0.1, 0.6, 0.2]);
        let (mut chosen, low, quota) = select_class(&s, 0.25).unwrap();
        chosen.sort_unstable();
        assert_eq!(chosen, vec![1, 3]);
        assert_eq!((low, quota), (2, 1));
    }

    #[test]
    fn full_ratio_takes_everything() {
        for n in 1..9 {
            let s = scores(&vec![0.5; n], &vec![0.1; n]);
            let (chosen, _, _) = select_class(&s, 0.5).unwrap();
            assert_eq!(chosen.len(), n);
        }
    }

    #[test]
    fn equal_losses_split_by_index() {
        let s = scores(&[0.7; 6], &[0.9, 0.8, 0.7, 0.3, 0.2, 0.1]);
        let (chosen, low, _) = select_class(&s, 0.1).unwrap();
        assert_eq!(low, 3);
        // low half = {0,1,2}, high half = {3,4,5}; one from each
        assert_eq!(chosen, vec![2, 5]);
        assert_eq!(select_class(&s, 0.1).unwrap().0, chosen);
    }

    #[test]
    fn ratio_bounds() {
        let s = scores(&[0.1], &[0.1]);
        assert!(select_class(&s, 0.0).is_err());
        assert!(select_class(&s, 0.6).is_err());
        assert!(select_class(&[], 0.3).is_err());
    }

    fn line_dataset() -> EmbeddingDataset {
        let recs = [(-2.0, 0), (-1.0, 0), (0.5, 0), (1.0, 1), (2.0, 1), (-0.5, 1)]
            .iter()
            .map(|&(x, label)| EmbeddingRecord { embedding: vec![x], label, group: None })
            .collect();
        EmbeddingDataset::new(1, 2, recs, false).unwrap()
    }

    fn threshold_head() -> LinearHead {
        LinearHead::new(DMatrix::from_row_slice(2, 1, &[-1.0, 1.0]), DVector::zeros(2)).unwrap()
    }

    #[test]
    fn partition_by_prediction() {
        let ds = line_dataset();
        let sel = ProbeSelection::from_indices((0..6).collect());
        let p = partition(&sel, &ds, &threshold_head()).unwrap();
        assert_eq!(p.correct, vec![vec![0, 1], vec![3, 4]]);
        assert_eq!(p.predicted_as, vec![vec![5], vec![2]]);
        assert_eq!(p.misclassified, vec![vec![2], vec![5]]);
        assert_eq!(p.report(), "class\tcor\tpre\tmis\n0\t2\t1\t1\n1\t2\t1\t1\n");
    }

    #[test]
    fn constant_head_partition() {
        let ds = line_dataset();
        let head = LinearHead::new(DMatrix::zeros(2, 1), DVector::from_column_slice(&[1.0, 0.0])).unwrap();
        let sel = ProbeSelection::from_indices((0..6).collect());
        let p = partition(&sel, &ds, &head).unwrap();
        assert_eq!(p.predicted_as[0], vec![3, 4, 5]);
        assert_eq!(p.misclassified[1], vec![3, 4, 5]);
        assert!(p.correct[1].is_empty());
        assert!(p.predicted_as[1].is_empty() && p.misclassified[0].is_empty());
    }

    #[test]
    fn build_records_provenance() {
        let ds = line_dataset();
        let sel = build_probe_set(&ds, &threshold_head(), 0.2).unwrap();
        assert_eq!(sel.ratio, Some(0.2));
        assert_eq!(sel.splits.len(), 2);
        assert_eq!(sel.splits[0].low_half, 2);
        assert_eq!(sel.splits[0].per_half_quota, 1);
        assert_eq!(sel.indices.len(), 4);
        assert!(sel.indices.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn empty_class_rejected() {
        let recs = vec![EmbeddingRecord { embedding: vec![1.0], label: 0, group: None }];
        let ds = EmbeddingDataset::new(1, 2, recs, false).unwrap();
        assert!(build_probe_set(&ds, &threshold_head(), 0.3).is_err());
    }
}
