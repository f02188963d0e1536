//! Numerical checks of the feature-alignment machinery on small
//! linear-regression instances.
//!
//! With training features stacked as rows of `V` (`N x D`, `N < D`), the
//! residual projector is `O = I - Vᵀ(VVᵀ)⁻¹V`. The alignment of a spurious
//! feature `φ(x̃)` with an original `φ(x)` is `φ(x̃)ᵀOφ(x) / ‖Oφ(x)‖²`,
//! compared against `mean ‖Oφ(x̃)‖ / mean ‖Oφ(x)‖`.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::detector::ShortcutDetector;
use crate::error::{Error, Result};

/// Singular values at or below this count as zero when checking row rank.
pub const RANK_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct TheoryInstance {
    /// `N x D`, one training feature per row.
    pub features: DMatrix<f64>,
    pub query: Vec<f64>,
    pub spurious: Vec<f64>,
    /// Carried for reporting only.
    pub target_std: f64,
}

impl TheoryInstance {
    pub fn new(features: DMatrix<f64>, query: Vec<f64>, spurious: Vec<f64>, target_std: f64) -> Result<Self> {
        let (n, d) = features.shape();
        if n == 0 || n >= d {
            return Err(Error::InvalidArgument(format!("need 0 < N < D, got N={n} D={d}")));
        }
        if query.len() != d || spurious.len() != d {
            return Err(Error::Shape(format!("feature vectors must have D={d} components")));
        }
        check_row_rank(&features)?;
        Ok(TheoryInstance {
            features,
            query,
            spurious,
            target_std,
        })
    }

    /// Gaussian features, query and spurious vectors.
    pub fn random(n: usize, d: usize, rng: &mut impl Rng) -> Result<Self> {
        let mut draw = || -> f64 { rng.sample(StandardNormal) };
        let features = DMatrix::from_fn(n, d, |_, _| draw());
        let query = (0..d).map(|_| draw()).collect();
        let spurious = (0..d).map(|_| draw()).collect();
        Self::new(features, query, spurious, 1.0)
    }
}

fn check_row_rank(features: &DMatrix<f64>) -> Result<()> {
    let n = features.nrows();
    let sv = features.clone().svd(false, false).singular_values;
    let rank = sv.iter().filter(|&&s| s > RANK_TOLERANCE).count();
    if rank < n {
        return Err(Error::RankDeficient(format!("row rank {rank} < N={n}")));
    }
    Ok(())
}

pub fn orthogonal_complement(features: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (n, d) = features.shape();
    if n == 0 || n >= d {
        return Err(Error::InvalidArgument(format!("need 0 < N < D, got N={n} D={d}")));
    }
    check_row_rank(features)?;
    let gram = features * features.transpose();
    let chol = gram
        .cholesky()
        .ok_or_else(|| Error::RankDeficient("VVᵀ is not positive definite".into()))?;
    // (VVᵀ)⁻¹ V, then O = I - Vᵀ · that
    let solved = chol.solve(features);
    Ok(DMatrix::identity(d, d) - features.transpose() * solved)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Alignment {
    /// Mean over all (spurious, original) pairs of `φ(x̃)ᵀOφ(x) / ‖Oφ(x)‖²`.
    pub gamma_lhs: f64,
    /// `mean ‖Oφ(x̃)‖ / mean ‖Oφ(x)‖`.
    pub gamma_rhs: f64,
    /// Smallest `‖Oφ(x̃)‖‖Oφ(x)‖ - φ(x̃)ᵀOφ(x)` over pairs; Cauchy–Schwarz
    /// says this is never negative.
    pub min_cs_slack: f64,
    pub pairs: usize,
}

/// Originals with `‖Oφ(x)‖` at or below this are skipped.
const ANNIHILATED: f64 = 1e-12;

pub fn feature_alignment(
    complement: &DMatrix<f64>,
    spurious: &[Vec<f64>],
    originals: &[Vec<f64>],
) -> Result<Alignment> {
    if spurious.is_empty() || originals.is_empty() {
        return Err(Error::InvalidArgument("need at least one spurious and one original sample".into()));
    }
    let d = complement.nrows();
    let apply = |v: &Vec<f64>| -> Result<(DVector<f64>, DVector<f64>)> {
        if v.len() != d {
            return Err(Error::Shape(format!("feature has {} components, expected {d}", v.len())));
        }
        let v = DVector::from_column_slice(v);
        let ov = complement * &v;
        Ok((v, ov))
    };
    let spu: Vec<_> = spurious.iter().map(apply).collect::<Result<_>>()?;
    let ori: Vec<_> = originals
        .iter()
        .map(apply)
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .filter(|(_, ov)| ov.norm() > ANNIHILATED)
        .collect();
    if ori.is_empty() {
        return Err(Error::InvalidArgument("every original sample is annihilated by O".into()));
    }

    let mut lhs = 0.0;
    let mut min_slack = f64::INFINITY;
    for (s, os) in &spu {
        for (_, ox) in &ori {
            let inner = s.dot(ox);
            lhs += inner / ox.norm_squared();
            min_slack = min_slack.min(os.norm() * ox.norm() - inner);
        }
    }
    let pairs = spu.len() * ori.len();
    let mean_norm = |xs: &[(DVector<f64>, DVector<f64>)]| {
        xs.iter().map(|(_, o)| o.norm()).sum::<f64>() / xs.len() as f64
    };
    Ok(Alignment {
        gamma_lhs: lhs / pairs as f64,
        gamma_rhs: mean_norm(&spu) / mean_norm(&ori),
        min_cs_slack: min_slack,
        pairs,
    })
}

/// The detector's projection of an embedding, used as a stand-in for the
/// spurious-only feature of that sample.
pub fn shortcut_as_spurious_proxy(detector: &ShortcutDetector, v: &[f64], ridge: f64) -> Result<Vec<f64>> {
    detector.project(v, ridge)
}

/// Number of singular values above `tol`.
pub fn numerical_rank(m: &DMatrix<f64>, tol: f64) -> usize {
    m.clone()
        .svd(false, false)
        .singular_values
        .iter()
        .filter(|&&s| s > tol)
        .count()
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstanceCheck {
    pub n: usize,
    pub d: usize,
    pub alignment: Alignment,
    /// `max_i ‖O φ(x_i)‖∞` over training rows.
    pub annihilation: f64,
    /// `‖OO - O‖_F`.
    pub idempotence: f64,
    /// `‖O - Oᵀ‖_F`.
    pub symmetry: f64,
    pub rank: usize,
}

impl InstanceCheck {
    pub fn rank_ok(&self) -> bool {
        self.rank == self.d - self.n
    }
}

pub fn check_instance(instance: &TheoryInstance) -> Result<InstanceCheck> {
    let o = orthogonal_complement(&instance.features)?;
    let (n, d) = instance.features.shape();
    let annihilation = (&o * instance.features.transpose()).amax();
    let idempotence = (&o * &o - &o).norm();
    let symmetry = (&o - o.transpose()).norm();
    let rank = numerical_rank(&o, 1e-6);
    let alignment = feature_alignment(
        &o,
        std::slice::from_ref(&instance.spurious),
        std::slice::from_ref(&instance.query),
    )?;
    Ok(InstanceCheck {
        n,
        d,
        alignment,
        annihilation,
        idempotence,
        symmetry,
        rank,
    })
}

pub fn format_checks(checks: &[InstanceCheck]) -> String {
    let mut out = String::from("id\tN\tD\tgamma_lhs\tgamma_rhs\tmin_cs_slack\tannihilation\tidempotence\tsymmetry\trank_ok\n");
    for (id, c) in checks.iter().enumerate() {
        let _ = writeln!(
            out,
            "{id}\t{}\t{}\t{:.6e}\t{:.6e}\t{:.3e}\t{:.3e}\t{:.3e}\t{:.3e}\t{}",
            c.n,
            c.d,
            c.alignment.gamma_lhs,
            c.alignment.gamma_rhs,
            c.alignment.min_cs_slack,
            c.annihilation,
            c.idempotence,
            c.symmetry,
            c.rank_ok()
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    #[test]
    fn axis_complement() {
        let o = orthogonal_complement(&DMatrix::from_row_slice(1, 2, &[1.0, 0.0])).unwrap();
        assert_eq!(o, DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 1.0]));
    }

    #[test]
    fn colinear_residuals_give_equal_gammas() {
        let o = orthogonal_complement(&DMatrix::from_row_slice(1, 2, &[1.0, 0.0])).unwrap();
        let a = feature_alignment(&o, &[vec![0.0, 1.0]], &[vec![0.0, 2.0]]).unwrap();
        assert!((a.gamma_lhs - 0.5).abs() < 1e-15);
        assert!((a.gamma_rhs - 0.5).abs() < 1e-15);
        assert!(a.min_cs_slack.abs() < 1e-15);
    }

    #[test]
    fn spurious_in_row_space_is_annihilated() {
        let v = DMatrix::from_row_slice(2, 3, &[1.0, 1.0, 0.0, 0.0, 1.0, -1.0]);
        let o = orthogonal_complement(&v).unwrap();
        let a = feature_alignment(&o, &[vec![2.0, 3.0, -1.0]], &[vec![0.3, -0.2, 0.9]]).unwrap();
        assert!(a.gamma_lhs.abs() < 1e-12);
        assert!(a.gamma_rhs.abs() < 1e-12);
    }

    #[test]
    fn random_pairs_respect_cauchy_schwarz() {
        let mut rng = stream(5, Stream::Theory);
        for _ in 0..20 {
            let inst = TheoryInstance::random(3, 8, &mut rng).unwrap();
            let o = orthogonal_complement(&inst.features).unwrap();
            let sp: Vec<Vec<f64>> = (0..4).map(|_| (0..8).map(|_| rng.sample(StandardNormal)).collect()).collect();
            let or: Vec<Vec<f64>> = (0..4).map(|_| (0..8).map(|_| rng.sample(StandardNormal)).collect()).collect();
            let a = feature_alignment(&o, &sp, &or).unwrap();
            assert_eq!(a.pairs, 16);
            assert!(a.min_cs_slack >= -1e-10);
        }
    }

    #[test]
    fn rank_deficiency_and_annihilated_originals() {
        let v = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 2.0, 4.0, 6.0]);
        assert!(matches!(orthogonal_complement(&v), Err(Error::RankDeficient(_))));
        let o = orthogonal_complement(&DMatrix::from_row_slice(1, 2, &[1.0, 0.0])).unwrap();
        assert!(feature_alignment(&o, &[vec![0.0, 1.0]], &[vec![3.0, 0.0]]).is_err());
        assert!(TheoryInstance::new(DMatrix::zeros(2, 2), vec![0.0; 2], vec![0.0; 2], 1.0).is_err());
    }

    #[test]
    fn proxy_is_projection() {
        let det = ShortcutDetector::new(DMatrix::from_column_slice(3, 1, &[0.0, 1.0, 0.0])).unwrap();
        let p = shortcut_as_spurious_proxy(&det, &[1.0, -2.0, 0.5], 0.0).unwrap();
        assert_eq!(p, vec![0.0, -2.0, 0.0]);
    }
}
