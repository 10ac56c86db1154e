//! Counter-keyed random streams.
//!
//! Every random draw in a simulation comes from a ChaCha stream whose seed is
//! derived from `(master_seed, replicate, node, round, purpose)`. Two runs that
//! share a key prefix therefore see the same randomness for that prefix, which
//! is what couples the privacy levels of one replicate and the two halves of a
//! privacy audit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// What a stream is used for. Distinct purposes never share draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Purpose {
    /// Laplace perturbation of dual messages.
    PrivacyNoise,
    /// Gaussian error added to block gradients.
    GradientNoise,
    /// Synthetic data and batch sampling.
    Data,
    /// Re-drawn batch for the perturbed round of a privacy audit.
    AuditPerturbation,
    /// Train/test split shuffles.
    Split,
}

impl Purpose {
    fn tag(self) -> u64 {
        match self {
            Purpose::PrivacyNoise => 1,
            Purpose::GradientNoise => 2,
            Purpose::Data => 3,
            Purpose::AuditPerturbation => 4,
            Purpose::Split => 5,
        }
    }
}

/// Identifies one replicate of one experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamKey {
    pub master_seed: u64,
    pub replicate: u64,
}

impl StreamKey {
    pub fn new(master_seed: u64, replicate: u64) -> Self {
        Self {
            master_seed,
            replicate,
        }
    }

    /// Stream for a given node, round and purpose.
    pub fn stream(&self, node: u64, round: u64, purpose: Purpose) -> ChaCha8Rng {
        let mut seed = [0u8; 32];
        seed[0..8].copy_from_slice(&self.master_seed.to_le_bytes());
        seed[8..16].copy_from_slice(&self.replicate.to_le_bytes());
        seed[16..24].copy_from_slice(&node.to_le_bytes());
        // 56 bits of round, 8 bits of purpose
        let tail = (round & 0x00ff_ffff_ffff_ffff) | (purpose.tag() << 56);
        seed[24..32].copy_from_slice(&tail.to_le_bytes());
        ChaCha8Rng::from_seed(seed)
    }

    /// Stream not tied to a node or round (data generation, splits).
    pub fn global(&self, purpose: Purpose) -> ChaCha8Rng {
        self.stream(u64::MAX, 0, purpose)
    }
}
