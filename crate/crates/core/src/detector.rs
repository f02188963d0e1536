//! Shortcut detector: a learned `K`-dimensional subspace of the embedding
//! space, applied as the projection `P_A = A (AᵀA + εI)⁻¹ Aᵀ`.
//!
//! The projection is never materialized. Each call solves against the `K x K`
//! Gram matrix through its Cholesky factor.
//!
//! For one sample with target `y`, write `c = G⁻¹Aᵀv`, `s = A c`, and
//! `g = ∂f/∂s`, where `f(s) = CE(W s + b, y) + η‖s − v‖²`. Then
//! `u = G⁻¹Aᵀg` and `∂f/∂A = (g − A u) cᵀ + (v − s) uᵀ`.

use std::fs;
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::batch::{sample_balanced, Batch};
use crate::codec::{section_len, Reader};
use crate::dataset::EmbeddingDataset;
use crate::error::{Error, FormatError, Result};
use crate::head::{cross_entropy_with_grad, LinearHead};
use crate::probe::ProbePartitions;
use crate::rng::{self, Stream};
use crate::sgd::{sgd_step, Momentum, SgdConfig};

pub const MAGIC: &str = "SCPD";
pub const VERSION: u32 = 1;
pub const DEFAULT_RIDGE: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct ShortcutDetector {
    basis: DMatrix<f64>,
}

impl ShortcutDetector {
    pub fn new(basis: DMatrix<f64>) -> Result<Self> {
        let (d, k) = basis.shape();
        if k == 0 || k >= d {
            return Err(Error::InvalidArgument(format!(
                "subspace dimension K={k} must satisfy 1 <= K < D={d}"
            )));
        }
        if basis.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("detector basis"));
        }
        Ok(ShortcutDetector { basis })
    }

    /// Gaussian basis with entry standard deviation `1/sqrt(D)`.
    pub fn random(dim: usize, k: usize, rng: &mut impl Rng) -> Result<Self> {
        let normal = Normal::new(0.0, 1.0 / (dim as f64).sqrt())
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        Self::new(DMatrix::from_fn(dim, k, |_, _| normal.sample(rng)))
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn dim(&self) -> usize {
        self.basis.nrows()
    }

    pub fn k(&self) -> usize {
        self.basis.ncols()
    }

    pub fn projector(&self, ridge: f64) -> Result<Projector<'_>> {
        if !(ridge >= 0.0 && ridge.is_finite()) {
            return Err(Error::InvalidArgument(format!("ridge must be >= 0, got {ridge}")));
        }
        let mut gram = self.basis.tr_mul(&self.basis);
        for i in 0..gram.nrows() {
            gram[(i, i)] += ridge;
        }
        let chol = Cholesky::new(gram).ok_or(Error::SingularGram)?;
        Ok(Projector {
            basis: &self.basis,
            chol,
        })
    }

    pub fn project(&self, v: &[f64], ridge: f64) -> Result<Vec<f64>> {
        let p = self.projector(ridge)?;
        if v.len() != self.dim() {
            return Err(Error::Shape(format!(
                "embedding has {} components, detector expects {}",
                v.len(),
                self.dim()
            )));
        }
        Ok(p.project(v).as_slice().to_vec())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let (d, k) = self.basis.shape();
        let mut out = Vec::with_capacity(16 + 8 * d * k);
        out.extend_from_slice(MAGIC.as_bytes());
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(d as u32).to_le_bytes());
        out.extend_from_slice(&(k as u32).to_le_bytes());
        // nalgebra storage is already column-major
        for x in self.basis.iter() {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FormatError> {
        let mut r = Reader::new(bytes);
        r.magic(MAGIC)?;
        r.version(VERSION)?;
        let d_offset = r.offset();
        let d = r.u32()?;
        if d < 2 {
            return Err(FormatError::InvalidHeader {
                offset: d_offset,
                field: "D",
                value: d as u64,
            });
        }
        let k_offset = r.offset();
        let k = r.u32()?;
        if k == 0 || k >= d {
            return Err(FormatError::InvalidHeader {
                offset: k_offset,
                field: "K",
                value: k as u64,
            });
        }
        r.require(section_len(section_len(d as u64, k as u64), 8))?;
        let values = (0..d as usize * k as usize)
            .map(|_| r.finite_f64())
            .collect::<Result<Vec<_>, _>>()?;
        r.finish()?;
        Ok(ShortcutDetector {
            basis: DMatrix::from_vec(d as usize, k as usize, values),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|source| Error::Format {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// A detector with its Gram matrix factored, ready to project many vectors.
pub struct Projector<'a> {
    basis: &'a DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
}

impl Projector<'_> {
    /// Subspace coordinates `c = (AᵀA + εI)⁻¹ Aᵀ v`.
    pub fn coefficients(&self, v: &[f64]) -> DVector<f64> {
        let at_v = self.basis.tr_mul(&DVector::from_column_slice(v));
        self.chol.solve(&at_v)
    }

    pub fn project(&self, v: &[f64]) -> DVector<f64> {
        self.basis * self.coefficients(v)
    }

    fn solve_back(&self, g: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(&self.basis.tr_mul(g))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectorLoss {
    /// Cross-entropy of the projected embedding against the slice target.
    pub det: f64,
    /// Squared distance between the projection and the embedding.
    pub reg: f64,
}

impl DetectorLoss {
    pub fn objective(&self, eta: f64) -> f64 {
        self.det + eta * self.reg
    }
}

fn check_shapes(detector: &ShortcutDetector, head: &LinearHead, dataset: &EmbeddingDataset) -> Result<()> {
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

pub fn detector_loss(
    detector: &ShortcutDetector,
    head: &LinearHead,
    dataset: &EmbeddingDataset,
    batch: &Batch,
    ridge: f64,
) -> Result<DetectorLoss> {
    check_shapes(detector, head, dataset)?;
    let proj = detector.projector(ridge)?;
    let mut loss = DetectorLoss { det: 0.0, reg: 0.0 };
    for (i, target, w) in batch.weighted()? {
        let v = dataset.embedding(i);
        let s = proj.project(v);
        let (ce, _) = cross_entropy_with_grad(&head.logits_unchecked(s.as_slice()), target);
        let reg: f64 = s.iter().zip(v).map(|(a, b)| (a - b).powi(2)).sum();
        loss.det += w * ce;
        loss.reg += w * reg;
    }
    Ok(loss)
}

/// Loss and `∂(L_det + η L_reg)/∂A` on one batch.
pub fn detector_grad(
    detector: &ShortcutDetector,
    head: &LinearHead,
    dataset: &EmbeddingDataset,
    batch: &Batch,
    eta: f64,
    ridge: f64,
) -> Result<(DetectorLoss, DMatrix<f64>)> {
    check_shapes(detector, head, dataset)?;
    let a = detector.basis();
    let proj = detector.projector(ridge)?;
    let mut loss = DetectorLoss { det: 0.0, reg: 0.0 };
    let mut grad = DMatrix::<f64>::zeros(a.nrows(), a.ncols());
    for (i, target, w) in batch.weighted()? {
        let v = DVector::from_column_slice(dataset.embedding(i));
        let c = proj.coefficients(v.as_slice());
        let s = a * &c;
        let (ce, dz) = cross_entropy_with_grad(&head.logits_unchecked(s.as_slice()), target);
        let resid = &s - &v;
        loss.det += w * ce;
        loss.reg += w * resid.norm_squared();
        let g = head.weights.tr_mul(&DVector::from_vec(dz)) + (2.0 * eta) * &resid;
        let u = proj.solve_back(&g);
        let left = &g - a * &u;
        grad.ger(w, &left, &c, 1.0);
        grad.ger(-w, &resid, &u, 1.0);
    }
    if grad.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("detector gradient"));
    }
    Ok((loss, grad))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorTrainConfig {
    pub k: usize,
    pub eta: f64,
    pub ridge: f64,
    /// Learning rate, epochs and batching for this stage.
    pub sgd: SgdConfig,
}

impl DetectorTrainConfig {
    pub fn validate(&self, dim: usize, num_classes: usize) -> Result<()> {
        if self.k == 0 || self.k >= dim {
            return Err(Error::InvalidArgument(format!(
                "K={} must satisfy 1 <= K < D={dim}",
                self.k
            )));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::InvalidArgument(format!("eta must be > 0, got {}", self.eta)));
        }
        if !(self.ridge >= 0.0 && self.ridge.is_finite()) {
            return Err(Error::InvalidArgument(format!("ridge must be >= 0, got {}", self.ridge)));
        }
        self.sgd.validate(num_classes)
    }
}

/// Batch-averaged losses over one epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLoss {
    pub det: f64,
    pub reg: f64,
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorTrace {
    /// Objective of the initial detector over all of `correct ∪ predicted_as`.
    pub initial: EpochLoss,
    pub epochs: Vec<EpochLoss>,
}

/// Learns the shortcut subspace with the head and embeddings frozen.
pub fn train_detector(
    dataset: &EmbeddingDataset,
    head: &LinearHead,
    partitions: &ProbePartitions,
    config: &DetectorTrainConfig,
) -> Result<(ShortcutDetector, DetectorTrace)> {
    config.validate(dataset.dim(), dataset.num_classes())?;
    head.check_dataset(dataset)?;
    if partitions.predicted_as.iter().all(Vec::is_empty) {
        return Err(Error::UntrainableDetector(
            "every predicted-as set is empty, so no class has cross-class samples sharing its prediction"
                .into(),
        ));
    }
    let mut init_rng = rng::stream(config.sgd.seed, Stream::DetectorInit);
    let mut detector = ShortcutDetector::random(dataset.dim(), config.k, &mut init_rng)?;

    let full = Batch::full(&partitions.correct, &partitions.predicted_as);
    let start = detector_loss(&detector, head, dataset, &full, config.ridge)?;
    let initial = EpochLoss {
        det: start.det,
        reg: start.reg,
        objective: start.objective(config.eta),
    };

    let mut batch_rng = rng::stream(config.sgd.seed, Stream::DetectorBatches);
    let mut state = Momentum::new(dataset.dim() * config.k);
    let mut epochs = Vec::new();
    if config.sgd.batches_per_epoch > 0 {
        for _ in 0..config.sgd.epochs {
            let mut acc = DetectorLoss { det: 0.0, reg: 0.0 };
            for _ in 0..config.sgd.batches_per_epoch {
                let batch = sample_balanced(
                    &partitions.correct,
                    &partitions.predicted_as,
                    config.sgd.batch_size,
                    &mut batch_rng,
                );
                let (loss, grad) =
                    detector_grad(&detector, head, dataset, &batch, config.eta, config.ridge)?;
                acc.det += loss.det;
                acc.reg += loss.reg;
                sgd_step(detector.basis.as_mut_slice(), grad.as_slice(), &mut state, &config.sgd)?;
            }
            let n = config.sgd.batches_per_epoch as f64;
            let det = acc.det / n;
            let reg = acc.reg / n;
            epochs.push(EpochLoss {
                det,
                reg,
                objective: det + config.eta * reg,
            });
        }
    }
    Ok((detector, DetectorTrace { initial, epochs }))
}
