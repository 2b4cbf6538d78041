//! Per-sensor, per-band percentile clipping and standardization.
//!
//! Pixels whose spectrum is entirely zero are treated as missing data: they
//! are excluded from statistics and normalize to zero.

use std::collections::BTreeMap;
use std::path::Path;

use numerics::Tensor;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::synth::HsiCube;
use crate::{Error, Result};

pub const STD_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandStats {
    pub low: Vec<f64>,
    pub high: Vec<f64>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Bands whose standard deviation was raised to the floor.
    pub floored: Vec<usize>,
    pub population: usize,
}

impl BandStats {
    pub fn apply(&self, band: usize, x: f64) -> f64 {
        (x.clamp(self.low[band], self.high[band]) - self.mean[band]) / self.std[band]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub clip: f64,
    pub sensors: BTreeMap<String, BandStats>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StatsOptions {
    /// Tail fraction clipped on each side.
    pub clip: f64,
    /// Valid pixels sampled per patch.
    pub pixels_per_patch: usize,
    pub seed: u64,
}

impl Default for StatsOptions {
    fn default() -> Self {
        Self {
            clip: 0.01,
            pixels_per_patch: 256,
            seed: 0,
        }
    }
}

/// Nearest-rank percentile of ascending `sorted`: the value at rank
/// `⌈p·n⌉`, ranks counted from one.
pub fn nearest_rank(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let rank = ((p * n as f64) - 1e-9).ceil().clamp(1.0, n as f64) as usize;
    sorted[rank - 1]
}

fn valid_pixels(cube: &HsiCube) -> Vec<usize> {
    let s = cube.data.shape();
    let (c, hw) = (s[0], s[1] * s[2]);
    let d = cube.data.data();
    (0..hw).filter(|&p| (0..c).any(|b| d[b * hw + p] != 0.0)).collect()
}

/// Statistics of a per-band population, computed after clipping.
pub fn band_stats(columns: &[Vec<f64>], clip: f64) -> BandStats {
    let mut out = BandStats {
        low: Vec::new(),
        high: Vec::new(),
        mean: Vec::new(),
        std: Vec::new(),
        floored: Vec::new(),
        population: columns.first().map_or(0, Vec::len),
    };
    for (b, col) in columns.iter().enumerate() {
        let mut sorted = col.clone();
        sorted.sort_by(f64::total_cmp);
        let (lo, hi) = (nearest_rank(&sorted, clip), nearest_rank(&sorted, 1.0 - clip));
        let clipped: Vec<f64> = col.iter().map(|v| v.clamp(lo, hi)).collect();
        let n = clipped.len() as f64;
        let mean = clipped.iter().sum::<f64>() / n;
        let var = clipped.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let mut std = var.sqrt();
        if !(std >= STD_FLOOR) {
            std = STD_FLOOR;
            out.floored.push(b);
        }
        out.low.push(lo);
        out.high.push(hi);
        out.mean.push(mean);
        out.std.push(std);
    }
    out
}

/// Samples valid pixels from every patch and computes per-sensor band
/// statistics. Patches are grouped by [`crate::SensorSpec::key`].
pub fn compute_stats<'a>(cubes: impl IntoIterator<Item = &'a HsiCube>, opts: &StatsOptions) -> Result<NormStats> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut pops: BTreeMap<String, Vec<Vec<f64>>> = BTreeMap::new();
    for cube in cubes {
        let s = cube.data.shape();
        let (c, hw) = (s[0], s[1] * s[2]);
        let cols = pops.entry(cube.sensor.key()).or_insert_with(|| vec![Vec::new(); c]);
        if cols.len() != c {
            return Err(Error::Sensor(format!(
                "{} patches disagree on band count",
                cube.sensor.key()
            )));
        }
        let valid = valid_pixels(cube);
        let take = opts.pixels_per_patch.min(valid.len());
        let mut picks: Vec<usize> = sample(&mut rng, valid.len(), take)
            .into_iter()
            .map(|i| valid[i])
            .collect();
        picks.sort_unstable();
        let d = cube.data.data();
        for (b, col) in cols.iter_mut().enumerate() {
            col.extend(picks.iter().map(|&p| f64::from(d[b * hw + p])));
        }
    }
    if pops.is_empty() || pops.values().any(|cols| cols.iter().any(Vec::is_empty)) {
        return Err(Error::EmptyDataset);
    }
    Ok(NormStats {
        clip: opts.clip,
        sensors: pops
            .into_iter()
            .map(|(k, cols)| (k, band_stats(&cols, opts.clip)))
            .collect(),
    })
}

impl NormStats {
    pub fn get(&self, key: &str) -> Result<&BandStats> {
        self.sensors
            .get(key)
            .ok_or_else(|| Error::MissingStats(key.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        serde_json::from_str(&std::fs::read_to_string(path)?).map_err(|e| Error::Config(format!("stats file: {e}")))
    }
}

/// Clips and standardizes bands `start..start+len` of `cube`; missing
/// pixels map to zero.
pub fn normalize_bands(cube: &HsiCube, stats: &NormStats, start: usize, len: usize) -> Result<Tensor<f32>> {
    let st = stats.get(&cube.sensor.key())?;
    let s = cube.data.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    if start + len > c || st.mean.len() != c {
        return Err(Error::Selection {
            start,
            length: len,
            band_count: c,
        });
    }
    let hw = h * w;
    let d = cube.data.data();
    let valid: Vec<bool> = (0..hw).map(|p| (0..c).any(|b| d[b * hw + p] != 0.0)).collect();
    let mut out = vec![0f32; len * hw];
    for (i, b) in (start..start + len).enumerate() {
        for p in 0..hw {
            if valid[p] {
                out[i * hw + p] = st.apply(b, f64::from(d[b * hw + p])) as f32;
            }
        }
    }
    Ok(Tensor::new([len, h, w], out)?)
}

pub fn normalize(cube: &HsiCube, stats: &NormStats) -> Result<Tensor<f32>> {
    normalize_bands(cube, stats, 0, cube.bands())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_rank_oracle() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(nearest_rank(&v, 0.01), 1.0);
        assert_eq!(nearest_rank(&v, 0.99), 99.0);
        assert_eq!(nearest_rank(&v, 0.5), 50.0);
        assert_eq!(nearest_rank(&[7.0], 0.01), 7.0);
    }

    #[test]
    fn constant_band_is_floored() {
        let s = band_stats(&[vec![3.0; 20], (0..20).map(f64::from).collect()], 0.01);
        assert_eq!(s.floored, vec![0]);
        assert_eq!(s.std[0], STD_FLOOR);
        assert!(s.std[1] > 1.0);
    }

    #[test]
    fn clipping_formula() {
        let s = band_stats(&[(1..=100).map(f64::from).collect()], 0.01);
        assert_eq!(s.apply(0, 1.0), (1.0 - s.mean[0]) / s.std[0]);
        assert_eq!(s.apply(0, 1e6), s.apply(0, 99.0));
        assert_eq!(s.apply(0, -5.0), s.apply(0, 1.0));
    }
}
