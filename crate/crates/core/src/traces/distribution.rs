use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// How input numbers are drawn.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistributionMode {
    /// Every value uniform over `[0, 2^width)`.
    Random,
    /// A base `u`, then every value `u + offset` with `offset` in `[0, spread]`.
    Close,
    /// Per sequence: close with probability `close_fraction`, random otherwise.
    Mixed,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistributionSpec {
    pub mode: DistributionMode,
    pub spread: u64,
    pub close_fraction: f64,
}

pub const DEFAULT_SPREAD: u64 = 8;

impl DistributionSpec {
    pub fn random() -> Self {
        Self { mode: DistributionMode::Random, spread: DEFAULT_SPREAD, close_fraction: 0.0 }
    }

    /// All sequences made of close numbers.
    pub fn hard() -> Self {
        Self { mode: DistributionMode::Close, spread: DEFAULT_SPREAD, close_fraction: 1.0 }
    }

    pub fn mixed(close_fraction: f64) -> Self {
        Self { mode: DistributionMode::Mixed, spread: DEFAULT_SPREAD, close_fraction }
    }

    /// 95% random sequences, 5% close ones.
    pub fn training() -> Self {
        Self::mixed(0.05)
    }

    /// 60% random sequences, 40% close ones.
    pub fn test() -> Self {
        Self::mixed(0.40)
    }

    pub fn with_spread(mut self, spread: u64) -> Self {
        self.spread = spread;
        self
    }
}

/// Draws one sequence, reporting whether it came from the close
/// distribution.
pub fn sample_with<R: Rng>(
    spec: &DistributionSpec,
    width: u32,
    length: usize,
    rng: &mut R,
) -> (Vec<u64>, bool) {
    let top = 1u64 << width;
    let close = match spec.mode {
        DistributionMode::Random => false,
        DistributionMode::Close => true,
        DistributionMode::Mixed => rng.gen_bool(spec.close_fraction.clamp(0.0, 1.0)),
    };
    if close {
        let spread = spec.spread.min(top - 1);
        let base = rng.gen_range(0..top - spread);
        ((0..length).map(|_| base + rng.gen_range(0..=spread)).collect(), true)
    } else {
        ((0..length).map(|_| rng.gen_range(0..top)).collect(), false)
    }
}

/// Deterministic sequence for `(spec, seed)`.
pub fn sample_sequence(spec: &DistributionSpec, width: u32, length: usize, seed: u64) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_with(spec, width, length, &mut rng).0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_spread_is_constant() {
        let s = sample_sequence(&DistributionSpec::hard().with_spread(0), 8, 20, 3);
        assert!(s.iter().all(|&v| v == s[0]));
    }

    #[test]
    fn close_sequences_respect_spread() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..500 {
            let (s, _) = sample_with(&DistributionSpec::hard(), 8, 8, &mut rng);
            let (lo, hi) = (s.iter().min().unwrap(), s.iter().max().unwrap());
            assert!(hi - lo <= DEFAULT_SPREAD && *hi < 256);
        }
    }

    #[test]
    fn training_mix_is_five_percent_close() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let close = (0..10_000)
            .filter(|_| sample_with(&DistributionSpec::training(), 8, 8, &mut rng).1)
            .count();
        let frac = close as f64 / 10_000.0;
        assert!((frac - 0.05).abs() <= 0.01, "{frac}");
    }

    #[test]
    fn deterministic_given_seed() {
        let spec = DistributionSpec::test();
        assert_eq!(sample_sequence(&spec, 8, 30, 42), sample_sequence(&spec, 8, 30, 42));
    }

    #[test]
    fn values_stay_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for width in [4, 8, 12] {
            for _ in 0..200 {
                let (s, _) = sample_with(&DistributionSpec::test(), width, 10, &mut rng);
                assert!(s.iter().all(|&v| v < 1 << width));
            }
        }
    }
}
