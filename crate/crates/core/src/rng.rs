//! Seeded random streams.
//!
//! Every stage draws from its own ChaCha stream derived from one master seed,
//! so re-running a single stage reproduces exactly what the full pipeline did.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Probe,
    DetectorInit,
    DetectorBatches,
    MitigationBatches,
    Erm,
    Synth,
    Theory,
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::Probe => 1,
            Stream::DetectorInit => 2,
            Stream::DetectorBatches => 3,
            Stream::MitigationBatches => 4,
            Stream::Erm => 5,
            Stream::Synth => 6,
            Stream::Theory => 7,
        }
    }
}

pub fn stream(seed: u64, which: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which.id());
    rng
}
