//! Datasets of stored or in-memory patches, their generation and manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::stats::{compute_stats, NormStats, StatsOptions};
use crate::data::storage::{quantize_f16, read_patch, write_patch, Patch};
use crate::data::synth::{endmember_library, render_cube, SceneRecipe};
use crate::sensor::{builtin_sensors, SensorSpec};
use crate::{Error, Result};

/// Patches whose valid fraction falls below this are discarded.
pub const MIN_VALID_FRACTION: f64 = 0.8;

#[derive(Debug, Clone)]
pub enum Source {
    File(PathBuf),
    Memory(Arc<Patch>),
}

#[derive(Debug, Clone)]
pub struct Entry {
    pub id: usize,
    /// Sensor key, e.g. `AVIRIS-NG/L1`.
    pub sensor: String,
    pub label: Option<usize>,
    pub source: Source,
}

impl Entry {
    pub fn load(&self) -> Result<Arc<Patch>> {
        match &self.source {
            Source::File(p) => Ok(Arc::new(read_patch(p)?)),
            Source::Memory(p) => Ok(Arc::clone(p)),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub entries: Vec<Entry>,
    pub sensors: BTreeMap<String, SensorSpec>,
    pub stats: Option<NormStats>,
}

/// Which patches a training stage uses.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSelector {
    /// Sensor keys to keep; empty keeps all.
    pub sensors: Vec<String>,
    /// Cap per sensor, taking the first patches in id order.
    pub max_per_sensor: Option<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    patch_count: usize,
    sensors: Vec<String>,
    stats: String,
    patches: Vec<ManifestPatch>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestPatch {
    file: String,
    sensor: String,
    label: Option<usize>,
}

pub const MANIFEST: &str = "manifest.toml";
pub const STATS_FILE: &str = "stats.json";

impl Dataset {
    pub fn from_patches(patches: Vec<Patch>) -> Self {
        let mut ds = Dataset::default();
        for (id, p) in patches.into_iter().enumerate() {
            let key = p.cube.sensor.key();
            ds.sensors.entry(key.clone()).or_insert_with(|| p.cube.sensor.clone());
            ds.entries.push(Entry {
                id,
                sensor: key,
                label: p.label,
                source: Source::Memory(Arc::new(p)),
            });
        }
        ds
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn spec(&self, key: &str) -> Result<&SensorSpec> {
        self.sensors
            .get(key)
            .ok_or_else(|| Error::Sensor(format!("dataset has no sensor '{key}'")))
    }

    /// Computes and attaches normalization statistics.
    pub fn compute_stats(&mut self, opts: &StatsOptions) -> Result<&NormStats> {
        let mut patches = Vec::with_capacity(self.entries.len());
        for e in &self.entries {
            patches.push(e.load()?);
        }
        self.stats = Some(compute_stats(patches.iter().map(|p| &p.cube), opts)?);
        Ok(self.stats.as_ref().expect("just set"))
    }

    pub fn select(&self, sel: &DatasetSelector) -> Result<Dataset> {
        for s in &sel.sensors {
            self.spec(s)?;
        }
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        let entries: Vec<Entry> = self
            .entries
            .iter()
            .filter(|e| sel.sensors.is_empty() || sel.sensors.contains(&e.sensor))
            .filter(|e| {
                let n = counts.entry(e.sensor.as_str()).or_insert(0);
                *n += 1;
                sel.max_per_sensor.is_none_or(|m| *n <= m)
            })
            .cloned()
            .collect();
        if entries.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let sensors = self
            .sensors
            .iter()
            .filter(|(k, _)| entries.iter().any(|e| &e.sensor == *k))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        Ok(Dataset {
            entries,
            sensors,
            stats: self.stats.clone(),
        })
    }

    /// Writes patch files, statistics and the manifest into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut patches = Vec::with_capacity(self.entries.len());
        for e in &self.entries {
            let file = format!("patch_{:05}.hspc", e.id);
            write_patch(&dir.join(&file), &*e.load()?)?;
            patches.push(ManifestPatch {
                file,
                sensor: e.sensor.clone(),
                label: e.label,
            });
        }
        if let Some(stats) = &self.stats {
            stats.save(&dir.join(STATS_FILE))?;
        }
        let manifest = Manifest {
            patch_count: patches.len(),
            sensors: self.sensors.keys().cloned().collect(),
            stats: STATS_FILE.to_string(),
            patches,
        };
        let text = toml::to_string(&manifest).map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(dir.join(MANIFEST), text)?;
        Ok(())
    }

    /// Opens a directory written by [`Dataset::write`]. Sensor metadata is
    /// read from the first patch of each sensor.
    pub fn open(dir: &Path) -> Result<Dataset> {
        let path = dir.join(MANIFEST);
        let text = std::fs::read_to_string(&path)?;
        let m: Manifest = toml::from_str(&text).map_err(|e| Error::Malformed {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        if m.patch_count != m.patches.len() {
            return Err(Error::Malformed {
                path,
                reason: format!("patch_count {} but {} patches listed", m.patch_count, m.patches.len()),
            });
        }
        let mut ds = Dataset::default();
        for (id, p) in m.patches.into_iter().enumerate() {
            let file = dir.join(&p.file);
            if !ds.sensors.contains_key(&p.sensor) {
                let patch = read_patch(&file)?;
                ds.sensors.insert(p.sensor.clone(), patch.cube.sensor.clone());
            }
            ds.entries.push(Entry {
                id,
                sensor: p.sensor,
                label: p.label,
                source: Source::File(file),
            });
        }
        let stats_path = dir.join(&m.stats);
        if stats_path.exists() {
            ds.stats = Some(NormStats::load(&stats_path)?);
        }
        Ok(ds)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    /// Sensor keys; empty means every built-in sensor.
    pub sensors: Vec<String>,
    pub patches_per_sensor: usize,
    pub size: usize,
    pub classes: usize,
    pub endmembers: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            sensors: Vec::new(),
            patches_per_sensor: 32,
            size: 64,
            classes: 4,
            endmembers: 6,
            noise: 0.005,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GenSummary {
    pub accepted: usize,
    pub rejected: usize,
}

/// Renders a labeled synthetic dataset, discarding patches with too much
/// missing data. Labels cycle through the classes within each sensor;
/// values are rounded to fp16 as if stored.
pub fn generate(cfg: &GenConfig) -> Result<(Dataset, GenSummary)> {
    if cfg.classes == 0 || cfg.classes > cfg.endmembers || cfg.size == 0 {
        return Err(Error::Config(
            "need 1 ≤ classes ≤ endmembers and a positive size".into(),
        ));
    }
    let specs: Vec<SensorSpec> = if cfg.sensors.is_empty() {
        builtin_sensors()
    } else {
        let all = builtin_sensors();
        cfg.sensors
            .iter()
            .map(|k| {
                all.iter()
                    .find(|s| &s.key() == k)
                    .cloned()
                    .ok_or_else(|| Error::Sensor(format!("unknown built-in sensor '{k}'")))
            })
            .collect::<Result<_>>()?
    };
    let library = endmember_library(cfg.endmembers, cfg.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut patches = Vec::new();
    let mut rejected = 0;
    for spec in &specs {
        let mut made = 0;
        while made < cfg.patches_per_sensor {
            let class = made % cfg.classes;
            let recipe = SceneRecipe::random(&library, class, cfg.noise, &mut rng);
            let seed = rand::Rng::random::<u64>(&mut rng);
            let (mut cube, label) = render_cube(&recipe, spec, cfg.size, cfg.size, seed);
            if cube.valid_fraction < MIN_VALID_FRACTION {
                rejected += 1;
                continue;
            }
            cube.data = quantize_f16(&cube.data);
            patches.push(Patch {
                cube,
                label: Some(label),
            });
            made += 1;
        }
    }
    let accepted = patches.len();
    Ok((Dataset::from_patches(patches), GenSummary { accepted, rejected }))
}
