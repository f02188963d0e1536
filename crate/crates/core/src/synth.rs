//! Two-class synthetic benchmark with one core and one spurious axis.
//!
//! Each record is `(2y-1)*core*e_0 + (2a-1)*spurious*e_1 + noise`, where `a` is
//! a binary spurious attribute. The group index is `2*y + a`, so the four
//! groups in order are (y=0,a=0), (y=0,a=1), (y=1,a=0), (y=1,a=1).

use rand_distr::{Distribution, Normal};

use crate::dataset::{EmbeddingDataset, EmbeddingRecord};
use crate::error::{Error, Result};
use crate::rng::{self, Stream};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub dim: usize,
    /// Sample counts for groups `2*y + a`.
    pub group_counts: [usize; 4],
    pub core_magnitude: f64,
    pub spurious_magnitude: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl SynthSpec {
    /// Counts for a correlated split: `majority` samples in each group where
    /// the attribute agrees with the label, `minority` where it does not.
    pub fn correlated(dim: usize, majority: usize, minority: usize, seed: u64) -> Self {
        SynthSpec {
            dim,
            group_counts: [majority, minority, minority, majority],
            core_magnitude: 1.0,
            spurious_magnitude: 2.0,
            noise_std: 1.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.dim < 2 {
            return bad(format!("synthetic dimension must be >= 2, got {}", self.dim));
        }
        if self.group_counts.iter().sum::<usize>() == 0 {
            return bad("all group counts are zero".into());
        }
        if !(self.core_magnitude >= 0.0 && self.core_magnitude.is_finite())
            || !(self.spurious_magnitude >= 0.0 && self.spurious_magnitude.is_finite())
        {
            return bad("signal magnitudes must be finite and >= 0".into());
        }
        if !(self.noise_std > 0.0 && self.noise_std.is_finite()) {
            return bad(format!("noise std must be > 0, got {}", self.noise_std));
        }
        Ok(())
    }
}

pub fn generate_synthetic(spec: &SynthSpec) -> Result<EmbeddingDataset> {
    spec.validate()?;
    let mut rng = rng::stream(spec.seed, Stream::Synth);
    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let total: usize = spec.group_counts.iter().sum();
    let mut records = Vec::with_capacity(total);
    for (group, &count) in spec.group_counts.iter().enumerate() {
        let label = group / 2;
        let attribute = group % 2;
        let core = (2.0 * label as f64 - 1.0) * spec.core_magnitude;
        let spurious = (2.0 * attribute as f64 - 1.0) * spec.spurious_magnitude;
        for _ in 0..count {
            let embedding = (0..spec.dim)
                .map(|j| {
                    let signal = match j {
                        0 => core,
                        1 => spurious,
                        _ => 0.0,
                    };
                    // stored at container precision so save/load is lossless
                    f64::from((signal + noise.sample(&mut rng)) as f32)
                })
                .collect();
            records.push(EmbeddingRecord {
                embedding,
                label,
                group: Some(group as u32),
            });
        }
    }
    EmbeddingDataset::new(spec.dim, 2, records, true)
}
