//! Group-robustness metrics and base-vector interpretation.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::dataset::EmbeddingDataset;
use crate::detector::ShortcutDetector;
use crate::error::{Error, Result};
use crate::head::LinearHead;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Count {
    pub correct: usize,
    pub total: usize,
}

impl Count {
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.total as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub per_class: Vec<Count>,
    /// Keyed by group id; only groups that occur in the dataset.
    pub per_group: BTreeMap<u32, Count>,
    pub average: f64,
    pub worst_class: f64,
    pub worst_group: Option<f64>,
    /// `average - worst_group`.
    pub gap: Option<f64>,
}

fn worst(counts: impl Iterator<Item = Count>) -> Option<f64> {
    counts
        .filter(|c| c.total > 0)
        .map(|c| c.accuracy())
        .min_by(f64::total_cmp)
}

pub fn evaluate(head: &LinearHead, dataset: &EmbeddingDataset) -> Result<MetricsReport> {
    if dataset.is_empty() {
        return Err(Error::InvalidDataset("cannot evaluate on an empty dataset".into()));
    }
    let preds = head.predict_all(dataset)?;
    let mut per_class = vec![Count::default(); dataset.num_classes()];
    let mut per_group: BTreeMap<u32, Count> = BTreeMap::new();
    let mut correct = 0;
    for (rec, &pred) in dataset.records().iter().zip(&preds) {
        let hit = usize::from(pred == rec.label);
        correct += hit;
        per_class[rec.label].correct += hit;
        per_class[rec.label].total += 1;
        if let Some(g) = rec.group {
            let entry = per_group.entry(g).or_default();
            entry.correct += hit;
            entry.total += 1;
        }
    }
    let average = correct as f64 / dataset.len() as f64;
    let worst_class = worst(per_class.iter().copied()).expect("dataset is nonempty");
    let worst_group = if dataset.has_groups() {
        worst(per_group.values().copied())
    } else {
        None
    };
    Ok(MetricsReport {
        per_class,
        per_group,
        average,
        worst_class,
        worst_group,
        gap: worst_group.map(|w| average - w),
    })
}

/// Minimum per-class accuracy over classes present in `dataset`.
pub fn worst_class_accuracy(head: &LinearHead, dataset: &EmbeddingDataset) -> Result<f64> {
    Ok(evaluate(head, dataset)?.worst_class)
}

impl MetricsReport {
    /// `metric<TAB>value` lines.
    pub fn to_lines(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "average_accuracy\t{}", self.average);
        let _ = writeln!(out, "worst_class_accuracy\t{}", self.worst_class);
        if let (Some(w), Some(g)) = (self.worst_group, self.gap) {
            let _ = writeln!(out, "worst_group_accuracy\t{w}");
            let _ = writeln!(out, "accuracy_gap\t{g}");
        }
        for (y, c) in self.per_class.iter().enumerate() {
            if c.total > 0 {
                let _ = writeln!(out, "class_{y}_accuracy\t{}", c.accuracy());
            }
            let _ = writeln!(out, "class_{y}_count\t{}", c.total);
        }
        for (g, c) in &self.per_group {
            let _ = writeln!(out, "group_{g}_accuracy\t{}", c.accuracy());
            let _ = writeln!(out, "group_{g}_count\t{}", c.total);
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let pct = |x: f64| format!("{:6.2}%", 100.0 * x);
        let _ = writeln!(out, "{:<22} {}", "average accuracy", pct(self.average));
        let _ = writeln!(out, "{:<22} {}", "worst-class accuracy", pct(self.worst_class));
        if let (Some(w), Some(g)) = (self.worst_group, self.gap) {
            let _ = writeln!(out, "{:<22} {}", "worst-group accuracy", pct(w));
            let _ = writeln!(out, "{:<22} {}", "accuracy gap", pct(g));
        }
        let _ = writeln!(out, "{:<10} {:>8} {:>9}", "class", "count", "accuracy");
        for (y, c) in self.per_class.iter().enumerate() {
            let acc = if c.total > 0 { pct(c.accuracy()) } else { "-".into() };
            let _ = writeln!(out, "{:<10} {:>8} {:>9}", y, c.total, acc);
        }
        if !self.per_group.is_empty() {
            let _ = writeln!(out, "{:<10} {:>8} {:>9}", "group", "count", "accuracy");
            for (g, c) in &self.per_group {
                let _ = writeln!(out, "{:<10} {:>8} {:>9}", g, c.total, pct(c.accuracy()));
            }
        }
        out
    }
}

/// For each basis column, the `top_k` records whose projections have the
/// highest cosine similarity to it, as `(index, similarity)` in descending
/// order. Records whose projection is zero are not ranked.
pub fn interpret_base_vectors(
    detector: &ShortcutDetector,
    dataset: &EmbeddingDataset,
    top_k: usize,
    ridge: f64,
) -> Result<Vec<Vec<(usize, f64)>>> {
    if top_k == 0 {
        return Err(Error::InvalidArgument("top_k must be >= 1".into()));
    }
    if detector.dim() != dataset.dim() {
        return Err(Error::Shape(format!(
            "detector has D={} but dataset has D={}",
            detector.dim(),
            dataset.dim()
        )));
    }
    let proj = detector.projector(ridge)?;
    let shortcuts: Vec<_> = dataset
        .records()
        .iter()
        .map(|r| proj.project(&r.embedding))
        .collect();
    let basis = detector.basis();
    let mut out = Vec::with_capacity(detector.k());
    for col in basis.column_iter() {
        let col_norm = col.norm();
        let mut scored: Vec<(usize, f64)> = shortcuts
            .iter()
            .enumerate()
            .filter_map(|(i, s)| {
                let n = s.norm();
                (n > 0.0 && col_norm > 0.0).then(|| (i, s.dot(&col) / (n * col_norm)))
            })
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        scored.truncate(top_k);
        out.push(scored);
    }
    Ok(out)
}
