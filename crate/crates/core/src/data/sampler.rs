//! Contiguous band windows for multi-view training.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::sensor::{BandSelection, SensorSpec};

pub const DEFAULT_WINDOW: usize = 100;
pub const DEFAULT_STRIDE: usize = 32;

/// Window starts `0, stride, 2·stride, … ≤ bands − window`, plus the
/// terminal start `bands − window` when the grid misses it.
pub fn candidate_starts(bands: usize, window: usize, stride: usize) -> Vec<usize> {
    if window == 0 || bands < window {
        return vec![0];
    }
    let last = bands - window;
    let mut starts: Vec<usize> = (0..=last).step_by(stride.max(1)).collect();
    if starts.last() != Some(&last) {
        starts.push(last);
    }
    starts
}

/// Uniformly drawn window; sensors with fewer than `window` bands yield
/// their full range.
pub fn sample_band_view(spec: &SensorSpec, window: usize, stride: usize, seed: u64) -> BandSelection {
    let bands = spec.band_count();
    if bands < window {
        log::warn!(
            "{} has {bands} bands, fewer than the {window}-band window; using all",
            spec.key()
        );
        return BandSelection::full(bands);
    }
    let starts = candidate_starts(bands, window, stride);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    BandSelection::new(starts[rng.random_range(0..starts.len())], window)
}

/// Seed for shard `shard` at step `step` of a run seeded with `global`.
pub fn view_seed(global: u64, shard: u64, step: u64) -> u64 {
    let mut z = global
        .wrapping_add(shard.wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add(step.wrapping_mul(0xd1b5_4a32_d192_ed03));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sensor::{builtin, Level};

    #[test]
    fn enumerations_match_the_rule() {
        assert_eq!(
            candidate_starts(425, 100, 32),
            vec![0, 32, 64, 96, 128, 160, 192, 224, 256, 288, 320, 325]
        );
        assert_eq!(candidate_starts(224, 100, 32), vec![0, 32, 64, 96, 124]);
        assert_eq!(candidate_starts(100, 100, 32), vec![0]);
        assert_eq!(candidate_starts(164, 100, 32), vec![0, 32, 64]);
    }

    #[test]
    fn short_sensor_gets_full_range() {
        let s = SensorSpec::uniform("tiny", Level::L2Reflectance, 0.4, 0.9, 40, 0.01);
        assert_eq!(sample_band_view(&s, 100, 32, 3), BandSelection::full(40));
        let ng = builtin("AVIRIS-NG", Level::L1Radiance).unwrap();
        let v = sample_band_view(&ng, 100, 32, 3);
        assert_eq!(v.length, 100);
        assert!(v.check(425).is_ok());
        assert_eq!(v, sample_band_view(&ng, 100, 32, 3));
    }

    #[test]
    fn shard_seeds_differ() {
        assert_ne!(view_seed(1, 0, 0), view_seed(1, 1, 0));
        assert_ne!(view_seed(1, 0, 0), view_seed(1, 0, 1));
        assert_eq!(view_seed(5, 2, 9), view_seed(5, 2, 9));
    }
}
