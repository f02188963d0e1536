//! The last-layer linear classifier and its loss primitives.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;

use crate::codec::{section_len, Reader};
use crate::dataset::EmbeddingDataset;
use crate::error::{Error, FormatError, Result};
use crate::rng::{self, Stream};
use crate::sgd::{sgd_step, Momentum, SgdConfig};

pub const MAGIC: &str = "SCPH";
pub const VERSION: u32 = 1;

/// `C x D` weights and a `C` bias: `logits = W v + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead {
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl LinearHead {
    pub fn new(weights: DMatrix<f64>, bias: DVector<f64>) -> Result<Self> {
        if weights.nrows() != bias.len() {
            return Err(Error::Shape(format!(
                "{} weight rows but {} biases",
                weights.nrows(),
                bias.len()
            )));
        }
        if weights.iter().chain(bias.iter()).any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("head parameters"));
        }
        Ok(LinearHead { weights, bias })
    }

    pub fn zeros(num_classes: usize, dim: usize) -> Self {
        LinearHead {
            weights: DMatrix::zeros(num_classes, dim),
            bias: DVector::zeros(num_classes),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.weights.nrows()
    }

    pub fn dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn check_dataset(&self, dataset: &EmbeddingDataset) -> Result<()> {
        if dataset.dim() != self.dim() || dataset.num_classes() != self.num_classes() {
            return Err(Error::Shape(format!(
                "head is {}x{} but dataset has C={} D={}",
                self.num_classes(),
                self.dim(),
                dataset.num_classes(),
                dataset.dim()
            )));
        }
        Ok(())
    }

    pub fn logits(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.dim() {
            return Err(Error::Shape(format!(
                "embedding has {} components, head expects {}",
                v.len(),
                self.dim()
            )));
        }
        Ok(self.logits_unchecked(v))
    }

    pub(crate) fn logits_unchecked(&self, v: &[f64]) -> Vec<f64> {
        (0..self.weights.nrows())
            .map(|k| {
                let row = self.weights.row(k);
                self.bias[k] + row.iter().zip(v).map(|(w, x)| w * x).sum::<f64>()
            })
            .collect()
    }

    pub fn predict(&self, v: &[f64]) -> Result<usize> {
        Ok(argmax(&self.logits(v)?))
    }

    pub fn predict_all(&self, dataset: &EmbeddingDataset) -> Result<Vec<usize>> {
        self.check_dataset(dataset)?;
        Ok(dataset
            .records()
            .iter()
            .map(|r| argmax(&self.logits_unchecked(&r.embedding)))
            .collect())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let (c, d) = self.weights.shape();
        let mut out = Vec::with_capacity(16 + 8 * (c * d + c));
        out.extend_from_slice(MAGIC.as_bytes());
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(c as u32).to_le_bytes());
        out.extend_from_slice(&(d as u32).to_le_bytes());
        for k in 0..c {
            for j in 0..d {
                out.extend_from_slice(&self.weights[(k, j)].to_le_bytes());
            }
        }
        for x in self.bias.iter() {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FormatError> {
        let mut r = Reader::new(bytes);
        r.magic(MAGIC)?;
        r.version(VERSION)?;
        let c_offset = r.offset();
        let c = r.u32()?;
        if c < 2 {
            return Err(FormatError::InvalidHeader {
                offset: c_offset,
                field: "C",
                value: c as u64,
            });
        }
        let d_offset = r.offset();
        let d = r.u32()?;
        if d == 0 {
            return Err(FormatError::InvalidHeader {
                offset: d_offset,
                field: "D",
                value: 0,
            });
        }
        let count = section_len(c as u64, d as u64).saturating_add(c as u64);
        r.require(section_len(count, 8))?;
        let (c, d) = (c as usize, d as usize);
        let mut weights = DMatrix::zeros(c, d);
        for k in 0..c {
            for j in 0..d {
                weights[(k, j)] = r.finite_f64()?;
            }
        }
        let mut bias = DVector::zeros(c);
        for k in 0..c {
            bias[k] = r.finite_f64()?;
        }
        r.finish()?;
        Ok(LinearHead { weights, bias })
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

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in values.iter().enumerate().skip(1) {
        if x > values[best] {
            best = i;
        }
    }
    best
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln()
}

pub fn cross_entropy(logits: &[f64], target: usize) -> Result<f64> {
    if target >= logits.len() {
        return Err(Error::InvalidArgument(format!(
            "target {target} out of range for {} classes",
            logits.len()
        )));
    }
    Ok((log_sum_exp(logits) - logits[target]).max(0.0))
}

/// Cross-entropy and its gradient with respect to the logits (`p - onehot`).
pub(crate) fn cross_entropy_with_grad(logits: &[f64], target: usize) -> (f64, Vec<f64>) {
    let loss = (log_sum_exp(logits) - logits[target]).max(0.0);
    let mut grad = softmax(logits);
    grad[target] -= 1.0;
    (loss, grad)
}

/// Shannon entropy (nats) of `softmax(logits)`.
pub fn output_entropy(logits: &[f64]) -> f64 {
    let lse = log_sum_exp(logits);
    let h: f64 = logits
        .iter()
        .map(|&z| {
            let log_p = z - lse;
            let p = log_p.exp();
            if p > 0.0 {
                -p * log_p
            } else {
                0.0
            }
        })
        .sum();
    h.max(0.0)
}

/// Fits a head by plain minibatch cross-entropy on uniformly shuffled data,
/// starting from zeros. Each epoch is one pass over the dataset.
///
/// This is the baseline the mitigation stage starts from when no exported
/// head is supplied.
pub fn train_erm(dataset: &EmbeddingDataset, config: &SgdConfig) -> Result<LinearHead> {
    config.validate(dataset.num_classes())?;
    if dataset.is_empty() {
        return Err(Error::InvalidDataset("cannot fit a head on an empty dataset".into()));
    }
    let (c, d) = (dataset.num_classes(), dataset.dim());
    let mut head = LinearHead::zeros(c, d);
    let mut w_state = Momentum::new(c * d);
    let mut b_state = Momentum::new(c);
    let mut rng = rng::stream(config.seed, Stream::Erm);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let mut gw = DMatrix::<f64>::zeros(c, d);
            let mut gb = DVector::<f64>::zeros(c);
            let scale = 1.0 / chunk.len() as f64;
            for &i in chunk {
                let v = dataset.embedding(i);
                let (_, dz) = cross_entropy_with_grad(&head.logits_unchecked(v), dataset.label(i));
                for k in 0..c {
                    gb[k] += scale * dz[k];
                    for j in 0..d {
                        gw[(k, j)] += scale * dz[k] * v[j];
                    }
                }
            }
            sgd_step(head.weights.as_mut_slice(), gw.as_slice(), &mut w_state, config)?;
            sgd_step(head.bias.as_mut_slice(), gb.as_slice(), &mut b_state, config)?;
        }
    }
    Ok(head)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn head(w: &[&[f64]], b: &[f64]) -> LinearHead {
        let c = w.len();
        let d = w[0].len();
        LinearHead::new(
            DMatrix::from_fn(c, d, |i, j| w[i][j]),
            DVector::from_column_slice(b),
        )
        .unwrap()
    }

    #[test]
    fn identity_and_zero_weight_logits() {
        let h = head(&[&[1.0, 0.0], &[0.0, 1.0]], &[0.0, 0.0]);
        assert_eq!(h.logits(&[3.0, -1.0]).unwrap(), vec![3.0, -1.0]);
        let z = head(&[&[0.0, 0.0], &[0.0, 0.0]], &[0.5, -0.5]);
        assert_eq!(z.logits(&[7.0, 9.0]).unwrap(), vec![0.5, -0.5]);
        assert!(matches!(h.logits(&[1.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn logits_match_triple_loop() {
        let w = [[0.3, -1.2, 0.7, 2.0], [1.1, 0.4, -0.6, 0.2], [-0.9, 0.5, 0.05, -1.3]];
        let b = [0.1, -0.2, 0.3];
        let v = [0.25, -1.5, 3.0, 0.75];
        let h = LinearHead::new(DMatrix::from_fn(3, 4, |i, j| w[i][j]), DVector::from_column_slice(&b)).unwrap();
        let got = h.logits(&v).unwrap();
        for k in 0..3 {
            let mut want = b[k];
            for j in 0..4 {
                want += w[k][j] * v[j];
            }
            assert!((got[k] - want).abs() < 1e-14);
        }
    }

    #[test]
    fn cross_entropy_cases() {
        let ln2 = std::f64::consts::LN_2;
        assert!((cross_entropy(&[0.0, 0.0], 0).unwrap() - ln2).abs() < 1e-15);
        assert!((cross_entropy(&[0.0, 0.0], 1).unwrap() - ln2).abs() < 1e-15);
        let big = cross_entropy(&[1000.0, 0.0], 0).unwrap();
        assert!(big.is_finite() && big < 1e-12);
        let z = [1.0f64, 2.0, 3.0];
        let naive = -(z[2].exp() / z.iter().map(|x| x.exp()).sum::<f64>()).ln();
        assert!((cross_entropy(&z, 2).unwrap() - naive).abs() < 1e-14);
        assert!(cross_entropy(&z, 3).is_err());
    }

    #[test]
    fn predict_and_ties() {
        let h = head(&[&[0.0], &[0.0]], &[0.1, 0.9]);
        assert_eq!(h.predict(&[5.0]).unwrap(), 1);
        let tie = head(&[&[0.0], &[0.0]], &[0.5, 0.5]);
        assert_eq!(tie.predict(&[5.0]).unwrap(), 0);
    }

    #[test]
    fn entropy_cases() {
        assert!(output_entropy(&[1000.0, 0.0]) < 1e-12);
        assert!((output_entropy(&[0.0; 4]) - 4f64.ln()).abs() < 1e-14);
        let e = 1f64.exp() + 2f64.exp();
        let (p1, p2) = (1f64.exp() / e, 2f64.exp() / e);
        let want = -(p1 * p1.ln() + p2 * p2.ln());
        assert!((output_entropy(&[1.0, 2.0]) - want).abs() < 1e-14);
    }

    #[test]
    fn checkpoint_layout() {
        let h = head(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]], &[-1.0, 0.5]);
        let bytes = h.to_bytes();
        assert_eq!(bytes.len(), 16 + 8 * 8);
        assert_eq!(&bytes[..4], b"SCPH");
        assert_eq!(&bytes[8..12], &2u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &3u32.to_le_bytes());
        // row-major: second weight is W[0][1]
        assert_eq!(&bytes[24..32], &2.0f64.to_le_bytes());
        assert_eq!(LinearHead::from_bytes(&bytes).unwrap(), h);
        assert!(matches!(
            LinearHead::from_bytes(&bytes[..bytes.len() - 3]),
            Err(FormatError::Truncated { .. })
        ));
        let mut bad = bytes.clone();
        bad[0] = 0;
        assert!(matches!(LinearHead::from_bytes(&bad), Err(FormatError::BadMagic { .. })));
    }

    #[test]
    fn erm_learns_separable_data() {
        use crate::synth::{generate_synthetic, SynthSpec};
        let ds = generate_synthetic(&SynthSpec {
            dim: 3,
            group_counts: [50, 50, 50, 50],
            core_magnitude: 3.0,
            spurious_magnitude: 0.0,
            noise_std: 0.3,
            seed: 1,
        })
        .unwrap();
        let cfg = SgdConfig { learning_rate: 0.1, epochs: 5, ..SgdConfig::default() };
        let h = train_erm(&ds, &cfg).unwrap();
        let preds = h.predict_all(&ds).unwrap();
        let correct = preds.iter().zip(ds.records()).filter(|(p, r)| **p == r.label).count();
        assert_eq!(correct, ds.len());
    }
}
