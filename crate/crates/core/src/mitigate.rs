//! Last-layer retraining against detected shortcuts.
//!
//! On each balanced batch over `correct ∪ misclassified`, the head minimizes
//! `J = λ·L_ori / L_spu`. `L_ori` is the cross-entropy on the embeddings and
//! `L_spu` the cross-entropy on their projections onto the frozen shortcut
//! subspace. With `λ = 0` the objective falls back to `L_ori` alone.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};

use crate::batch::{sample_balanced, Batch};
use crate::dataset::EmbeddingDataset;
use crate::detector::{DetectorTrace, ShortcutDetector};
use crate::error::{Error, Result};
use crate::head::{cross_entropy_with_grad, LinearHead};
use crate::metrics::worst_class_accuracy;
use crate::probe::ProbePartitions;
use crate::rng::{self, Stream};
use crate::sgd::{sgd_step, Momentum, SgdConfig};

/// Smallest `L_spu` the ratio is allowed to divide by.
pub const MIN_SHORTCUT_LOSS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MitigationLoss {
    pub ori: f64,
    pub spu: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadGrad {
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
}

struct Accum {
    loss: f64,
    grad: HeadGrad,
}

impl Accum {
    fn new(c: usize, d: usize) -> Self {
        Accum {
            loss: 0.0,
            grad: HeadGrad {
                weights: DMatrix::zeros(c, d),
                bias: DVector::zeros(c),
            },
        }
    }

    fn add(&mut self, head: &LinearHead, x: &[f64], target: usize, w: f64) {
        let (ce, dz) = cross_entropy_with_grad(&head.logits_unchecked(x), target);
        self.loss += w * ce;
        for (k, g) in dz.iter().enumerate() {
            self.grad.bias[k] += w * g;
            for (j, xj) in x.iter().enumerate() {
                self.grad.weights[(k, j)] += w * g * xj;
            }
        }
    }
}

fn accumulate(
    head: &LinearHead,
    dataset: &EmbeddingDataset,
    batch: &Batch,
    shortcut: &dyn Fn(usize) -> DVector<f64>,
) -> Result<(Accum, Accum)> {
    let (c, d) = (head.num_classes(), head.dim());
    let mut ori = Accum::new(c, d);
    let mut spu = Accum::new(c, d);
    for (i, target, w) in batch.weighted()? {
        ori.add(head, dataset.embedding(i), target, w);
        spu.add(head, shortcut(i).as_slice(), target, w);
    }
    Ok((ori, spu))
}

fn check_shapes(head: &LinearHead, detector: &ShortcutDetector, dataset: &EmbeddingDataset) -> Result<()> {
    head.check_dataset(dataset)?;
    if detector.dim() != dataset.dim() {
        return Err(Error::Shape(format!(
            "detector has D={} but dataset has D={}",
            detector.dim(),
            dataset.dim()
        )));
    }
    Ok(())
}

pub fn mitigation_losses(
    head: &LinearHead,
    detector: &ShortcutDetector,
    dataset: &EmbeddingDataset,
    batch: &Batch,
    ridge: f64,
) -> Result<MitigationLoss> {
    check_shapes(head, detector, dataset)?;
    let proj = detector.projector(ridge)?;
    let (ori, spu) = accumulate(head, dataset, batch, &|i| proj.project(dataset.embedding(i)))?;
    Ok(MitigationLoss {
        ori: ori.loss,
        spu: spu.loss,
    })
}

fn combine(ori: Accum, spu: Accum, lambda: f64) -> Result<(MitigationLoss, f64, HeadGrad)> {
    let loss = MitigationLoss {
        ori: ori.loss,
        spu: spu.loss,
    };
    if lambda == 0.0 {
        return Ok((loss, loss.ori, ori.grad));
    }
    if loss.spu.is_nan() || loss.spu < MIN_SHORTCUT_LOSS {
        return Err(Error::VanishedDenominator { value: loss.spu });
    }
    let objective = lambda * loss.ori / loss.spu;
    let a = lambda / loss.spu;
    let b = lambda * loss.ori / (loss.spu * loss.spu);
    let grad = HeadGrad {
        weights: ori.grad.weights * a - spu.grad.weights * b,
        bias: ori.grad.bias * a - spu.grad.bias * b,
    };
    if grad.weights.iter().chain(grad.bias.iter()).any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("mitigation gradient"));
    }
    Ok((loss, objective, grad))
}

/// Losses, `J`, and `∇J` with respect to the head's weights and bias.
pub fn ratio_objective_grad(
    head: &LinearHead,
    detector: &ShortcutDetector,
    dataset: &EmbeddingDataset,
    batch: &Batch,
    lambda: f64,
    ridge: f64,
) -> Result<(MitigationLoss, f64, HeadGrad)> {
    check_shapes(head, detector, dataset)?;
    let proj = detector.projector(ridge)?;
    let (ori, spu) = accumulate(head, dataset, batch, &|i| proj.project(dataset.embedding(i)))?;
    combine(ori, spu, lambda)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MitigationConfig {
    pub lambda: f64,
    pub ridge: f64,
    /// Learning rate, epochs and batching for this stage.
    pub sgd: SgdConfig,
}

impl MitigationConfig {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidArgument(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.ridge >= 0.0 && self.ridge.is_finite()) {
            return Err(Error::InvalidArgument(format!("ridge must be >= 0, got {}", self.ridge)));
        }
        self.sgd.validate(num_classes)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MitigationEpoch {
    pub epoch: usize,
    pub l_ori: f64,
    pub l_spu: f64,
    pub objective: f64,
    pub selection_worst_class: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MitigationTrace {
    pub epochs: Vec<MitigationEpoch>,
    /// 1-based epoch whose head was returned.
    pub best_epoch: Option<usize>,
}

/// Retrains only the head, keeping the epoch with the best worst-class
/// accuracy on `selection` (earliest on ties).
pub fn retrain_head(
    head: &LinearHead,
    detector: &ShortcutDetector,
    dataset: &EmbeddingDataset,
    partitions: &ProbePartitions,
    config: &MitigationConfig,
    selection: &EmbeddingDataset,
) -> Result<(LinearHead, MitigationTrace)> {
    config.validate(dataset.num_classes())?;
    check_shapes(head, detector, dataset)?;
    head.check_dataset(selection)?;
    if selection.is_empty() {
        return Err(Error::InvalidDataset("selection dataset is empty".into()));
    }
    if config.sgd.epochs == 0 {
        return Ok((head.clone(), MitigationTrace::default()));
    }
    if partitions
        .correct
        .iter()
        .chain(&partitions.misclassified)
        .all(Vec::is_empty)
    {
        return Err(Error::EmptyBatch);
    }

    let proj = detector.projector(config.ridge)?;
    let mut shortcuts: Vec<Option<DVector<f64>>> = vec![None; dataset.len()];
    for &i in partitions.correct.iter().chain(&partitions.misclassified).flatten() {
        shortcuts[i] = Some(proj.project(dataset.embedding(i)));
    }
    let lookup = |i: usize| shortcuts[i].clone().expect("batch members come from the partitions");

    let (c, d) = (head.num_classes(), head.dim());
    let mut current = head.clone();
    let mut w_state = Momentum::new(c * d);
    let mut b_state = Momentum::new(c);
    let mut rng = rng::stream(config.sgd.seed, Stream::MitigationBatches);
    let mut trace = MitigationTrace::default();
    let mut best: Option<(f64, LinearHead)> = None;

    for epoch in 1..=config.sgd.epochs {
        let (mut sum_ori, mut sum_spu, mut sum_j) = (0.0, 0.0, 0.0);
        for _ in 0..config.sgd.batches_per_epoch {
            let batch = sample_balanced(
                &partitions.correct,
                &partitions.misclassified,
                config.sgd.batch_size,
                &mut rng,
            );
            let (ori, spu) = accumulate(&current, dataset, &batch, &lookup)?;
            let (loss, objective, grad) = combine(ori, spu, config.lambda)?;
            if loss.spu.is_nan() || loss.spu < MIN_SHORTCUT_LOSS {
                return Err(Error::VanishedDenominator { value: loss.spu });
            }
            sum_ori += loss.ori;
            sum_spu += loss.spu;
            sum_j += objective;
            sgd_step(current.weights.as_mut_slice(), grad.weights.as_slice(), &mut w_state, &config.sgd)?;
            sgd_step(current.bias.as_mut_slice(), grad.bias.as_slice(), &mut b_state, &config.sgd)?;
        }
        let n = config.sgd.batches_per_epoch.max(1) as f64;
        let score = worst_class_accuracy(&current, selection)?;
        trace.epochs.push(MitigationEpoch {
            epoch,
            l_ori: sum_ori / n,
            l_spu: sum_spu / n,
            objective: sum_j / n,
            selection_worst_class: score,
        });
        if best.as_ref().is_none_or(|(s, _)| score > *s) {
            best = Some((score, current.clone()));
            trace.best_epoch = Some(epoch);
        }
    }
    let (_, best_head) = best.expect("at least one epoch ran");
    Ok((best_head, trace))
}

/// Loss traces from both stages, written as a tab-separated log.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunReport {
    pub detector: Option<DetectorTrace>,
    pub mitigation: Option<MitigationTrace>,
}

impl RunReport {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        if let Some(det) = &self.detector {
            out.push_str("# stage\tepoch\tl_det\tl_reg\tobjective\n");
            let rows = std::iter::once(&det.initial).chain(&det.epochs);
            for (epoch, e) in rows.enumerate() {
                let _ = writeln!(out, "detector\t{epoch}\t{}\t{}\t{}", e.det, e.reg, e.objective);
            }
        }
        if let Some(mit) = &self.mitigation {
            out.push_str("# stage\tepoch\tl_ori\tl_spu\tobjective\tworst_class_acc\n");
            for e in &mit.epochs {
                let _ = writeln!(
                    out,
                    "mitigation\t{}\t{}\t{}\t{}\t{}",
                    e.epoch, e.l_ori, e.l_spu, e.objective, e.selection_worst_class
                );
            }
            match mit.best_epoch {
                Some(b) => {
                    let _ = writeln!(out, "best_epoch\t{b}");
                }
                None => out.push_str("best_epoch\tnone\n"),
            }
        }
        out
    }
}
