#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use shortcut_probe::dataset::{EmbeddingDataset, EmbeddingRecord};
use shortcut_probe::head::LinearHead;
use shortcut_probe::synth::SynthSpec;

pub const FD_STEP: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut impl Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// Central differences of `f` at `x`, one coordinate at a time.
pub fn central_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Max over coordinates of `|a - b| / max(1, |a|, |b|)`.
pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1.0))
        .fold(0.0, f64::max)
}

/// Orthogonal projector onto span(A) from a thin QR, independent of the
/// normal-equation path used by the library.
pub fn qr_projector(a: &DMatrix<f64>) -> DMatrix<f64> {
    let q = a.clone().qr().q();
    &q * q.transpose()
}

pub fn singular_rank(m: &DMatrix<f64>, tol: f64) -> usize {
    m.clone().svd(false, false).singular_values.iter().filter(|&&s| s > tol).count()
}

pub fn random_dataset(rng: &mut impl Rng, n: usize, d: usize, c: usize) -> EmbeddingDataset {
    let records = (0..n)
        .map(|i| EmbeddingRecord {
            embedding: (0..d).map(|_| f64::from(rng.sample::<f64, _>(StandardNormal) as f32)).collect(),
            // every class present
            label: if i < c { i } else { rng.random_range(0..c) },
            group: None,
        })
        .collect();
    EmbeddingDataset::new(d, c, records, false).unwrap()
}

pub fn random_head(rng: &mut impl Rng, c: usize, d: usize) -> LinearHead {
    LinearHead::new(gaussian(rng, c, d), DVector::from_fn(c, |_, _| rng.sample(StandardNormal))).unwrap()
}

/// The correlated benchmark: 90% of each class shares its spurious sign.
pub fn benchmark(seed: u64) -> SynthSpec {
    SynthSpec {
        dim: 32,
        group_counts: [900, 100, 100, 900],
        core_magnitude: 1.0,
        spurious_magnitude: 2.0,
        noise_std: 1.0,
        seed,
    }
}

use shortcut_probe::batch::Batch;
use shortcut_probe::detector::{detector_grad, detector_loss, ShortcutDetector, DEFAULT_RIDGE};
use shortcut_probe::mitigate::{mitigation_losses, ratio_objective_grad};

/// Random class slices over the dataset; slice `y` gets target `y`.
pub fn random_batch(rng: &mut impl Rng, ds: &EmbeddingDataset, per_class: usize) -> Batch {
    let slices = (0..ds.num_classes())
        .map(|_| (0..per_class).map(|_| rng.random_range(0..ds.len())).collect())
        .collect();
    Batch { slices }
}

/// (D, K) pairs cycled through by the detector gradient instances.
pub const DETECTOR_SHAPES: [(usize, usize); 6] = [(4, 1), (4, 2), (8, 1), (8, 4), (16, 2), (16, 4)];

/// Max relative error between the analytic detector gradient and central
/// differences on one seeded instance.
pub fn detector_fd_error(instance: u64) -> f64 {
    let (d, k) = DETECTOR_SHAPES[instance as usize % DETECTOR_SHAPES.len()];
    let mut r = rng(100 + instance);
    let c = 2 + instance as usize % 3;
    let ds = random_dataset(&mut r, 20, d, c);
    let head = random_head(&mut r, c, d);
    let batch = random_batch(&mut r, &ds, 3);
    let eta = r.random_range(0.1..5.0);
    let det = ShortcutDetector::new(gaussian(&mut r, d, k)).unwrap();

    let (_, grad) = detector_grad(&det, &head, &ds, &batch, eta, DEFAULT_RIDGE).unwrap();
    let f = |a: &[f64]| {
        let det = ShortcutDetector::new(DMatrix::from_column_slice(d, k, a)).unwrap();
        detector_loss(&det, &head, &ds, &batch, DEFAULT_RIDGE).unwrap().objective(eta)
    };
    max_rel_err(grad.as_slice(), &central_diff(f, det.basis().as_slice(), FD_STEP))
}

pub fn head_from(c: usize, d: usize, flat: &[f64]) -> LinearHead {
    LinearHead::new(
        DMatrix::from_column_slice(c, d, &flat[..c * d]),
        DVector::from_column_slice(&flat[c * d..]),
    )
    .unwrap()
}

pub fn flat(head: &LinearHead) -> Vec<f64> {
    head.weights.iter().chain(head.bias.iter()).copied().collect()
}

/// Same as [`detector_fd_error`] for `∇(λ L_ori / L_spu)` on a 2-class,
/// D = 6 instance.
pub fn mitigation_fd_error(instance: u64) -> f64 {
    let (c, d) = (2, 6);
    let mut r = rng(500 + instance);
    let ds = random_dataset(&mut r, 16, d, c);
    let head = random_head(&mut r, c, d);
    let det = ShortcutDetector::new(gaussian(&mut r, d, 1 + instance as usize % 3)).unwrap();
    let batch = random_batch(&mut r, &ds, 4);
    let lambda = r.random_range(0.5..10.0);

    let (_, _, grad) = ratio_objective_grad(&head, &det, &ds, &batch, lambda, DEFAULT_RIDGE).unwrap();
    let analytic: Vec<f64> = grad.weights.iter().chain(grad.bias.iter()).copied().collect();
    let f = |theta: &[f64]| {
        let l = mitigation_losses(&head_from(c, d, theta), &det, &ds, &batch, DEFAULT_RIDGE).unwrap();
        lambda * l.ori / l.spu
    };
    max_rel_err(&analytic, &central_diff(f, &flat(&head), FD_STEP))
}
