//! Seed derivation. Every random decision in the crate draws from a
//! ChaCha8 stream derived from `(seed, stream id)`, so frames, training
//! steps and augmentation purposes each get an independent, reproducible
//! stream regardless of evaluation order.

use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;

/// SplitMix64 finalizer; good avalanche for cheap stream separation.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// A ChaCha8 stream keyed by `(seed, stream)`.
pub fn derive_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(stream)))
}

/// Stream ids for the distinct random purposes of a training step.
/// Keeping source and target augmentation on separate streams makes a
/// lambda=0 self-training run bitwise-identical to source-only fine-tuning.
#[derive(Debug, Clone, Copy)]
pub enum Purpose {
    FrameGen = 1,
    WeightInit = 2,
    SourceAugment = 3,
    TargetAugment = 4,
    EpochShuffle = 5,
    StyleJitter = 6,
}

/// Stream for step-scoped purposes: `purpose` tag folded with the step index.
pub fn step_stream(purpose: Purpose, step: u64) -> u64 {
    splitmix64((purpose as u64) << 56 | (step & 0x00ff_ffff_ffff_ffff))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngExt;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: u64 = derive_rng(7, 1).random();
        let b: u64 = derive_rng(7, 1).random();
        let c: u64 = derive_rng(7, 2).random();
        let d: u64 = derive_rng(8, 1).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }

    #[test]
    fn purpose_streams_do_not_collide() {
        assert_ne!(
            step_stream(Purpose::SourceAugment, 3),
            step_stream(Purpose::TargetAugment, 3)
        );
        assert_ne!(
            step_stream(Purpose::SourceAugment, 3),
            step_stream(Purpose::SourceAugment, 4)
        );
    }
}
