//! Sensor-homogeneous batches with one band view per batch, produced by
//! worker threads through a bounded queue.

use std::collections::BTreeMap;
use std::sync::mpsc::{sync_channel, Receiver};
use std::sync::Arc;
use std::thread::JoinHandle;

use numerics::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::dataset::{Dataset, Entry};
use crate::data::sampler::{sample_band_view, view_seed};
use crate::data::stats::{normalize_bands, NormStats};
use crate::sensor::{subset, BandSelection, SensorSpec};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LoaderConfig {
    pub batch: usize,
    pub window: usize,
    pub stride: usize,
    pub seed: u64,
    pub shard: u64,
    pub workers: usize,
    /// Bound on batches waiting in the queue.
    pub queue: usize,
    pub shuffle: bool,
}

impl Default for LoaderConfig {
    fn default() -> Self {
        Self {
            batch: 8,
            window: crate::data::sampler::DEFAULT_WINDOW,
            stride: crate::data::sampler::DEFAULT_STRIDE,
            seed: 0,
            shard: 0,
            workers: 1,
            queue: 4,
            shuffle: true,
        }
    }
}

/// One normalized patch restricted to a band view.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: usize,
    /// `[C', H, W]`
    pub x: Tensor<f32>,
    pub label: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct Batch {
    /// Position within the epoch.
    pub index: usize,
    pub sensor: String,
    pub view: BandSelection,
    /// Metadata of the viewed bands.
    pub spec: SensorSpec,
    pub samples: Vec<Sample>,
}

/// Planned batch: which patches and which view.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchPlan {
    pub sensor: String,
    pub ids: Vec<usize>,
    pub view: BandSelection,
}

/// Groups patches by sensor, shuffles within groups, chunks into batches
/// (keeping a short final batch) and shuffles the batch order. Views are
/// seeded by the global batch counter `first_step + i`.
pub fn plan_epoch(ds: &Dataset, cfg: &LoaderConfig, epoch: u64, first_step: u64) -> Result<Vec<BatchPlan>> {
    if cfg.batch == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(view_seed(cfg.seed, cfg.shard, epoch ^ 0x5eed_0000_0000));
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (pos, e) in ds.entries.iter().enumerate() {
        groups.entry(e.sensor.as_str()).or_default().push(pos);
    }
    let mut plans = Vec::new();
    for (sensor, mut ids) in groups {
        if cfg.shuffle {
            ids.shuffle(&mut rng);
        }
        for chunk in ids.chunks(cfg.batch) {
            plans.push((sensor.to_string(), chunk.to_vec()));
        }
    }
    if cfg.shuffle {
        plans.shuffle(&mut rng);
    }
    plans
        .into_iter()
        .enumerate()
        .map(|(i, (sensor, ids))| {
            let spec = ds.spec(&sensor)?;
            let view = sample_band_view(
                spec,
                cfg.window,
                cfg.stride,
                view_seed(cfg.seed, cfg.shard, first_step + i as u64),
            );
            Ok(BatchPlan { sensor, ids, view })
        })
        .collect()
}

/// Loads and normalizes one patch restricted to `view`.
pub fn load_sample(entry: &Entry, stats: &NormStats, view: BandSelection) -> Result<Sample> {
    let patch = entry.load()?;
    let x = normalize_bands(&patch.cube, stats, view.start, view.length)?;
    Ok(Sample {
        id: entry.id,
        x,
        label: entry.label,
    })
}

pub fn load_batch(ds: &Dataset, stats: &NormStats, plan: &BatchPlan, index: usize) -> Result<Batch> {
    let spec = subset(ds.spec(&plan.sensor)?, plan.view)?;
    let samples = plan
        .ids
        .iter()
        .map(|&pos| load_sample(&ds.entries[pos], stats, plan.view))
        .collect::<Result<_>>()?;
    Ok(Batch {
        index,
        sensor: plan.sensor.clone(),
        view: plan.view,
        spec,
        samples,
    })
}

/// Batches of one epoch in plan order, whatever the worker count.
pub struct BatchIter {
    rx: Option<Receiver<(usize, Result<Batch>)>>,
    handles: Vec<JoinHandle<()>>,
    pending: BTreeMap<usize, Result<Batch>>,
    next: usize,
    pub len: usize,
}

impl Iterator for BatchIter {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.next >= self.len {
            return None;
        }
        while !self.pending.contains_key(&self.next) {
            let (i, b) = self.rx.as_ref()?.recv().ok()?;
            self.pending.insert(i, b);
        }
        let b = self.pending.remove(&self.next);
        self.next += 1;
        b
    }
}

impl Drop for BatchIter {
    fn drop(&mut self) {
        // Closing the channel unblocks workers waiting to send.
        self.rx.take();
        for h in self.handles.drain(..) {
            let _ = h.join();
        }
    }
}

pub fn batch_iterator(ds: Arc<Dataset>, plans: Vec<BatchPlan>, cfg: &LoaderConfig) -> Result<BatchIter> {
    let stats = Arc::new(ds.stats.clone().ok_or_else(|| Error::MissingStats("dataset".into()))?);
    let workers = cfg.workers.max(1);
    let (tx, rx) = sync_channel(cfg.queue.max(1));
    let plans = Arc::new(plans);
    let len = plans.len();
    let handles = (0..workers)
        .map(|w| {
            let (tx, ds, stats, plans) = (tx.clone(), Arc::clone(&ds), Arc::clone(&stats), Arc::clone(&plans));
            std::thread::spawn(move || {
                for i in (w..plans.len()).step_by(workers) {
                    if tx.send((i, load_batch(&ds, &stats, &plans[i], i))).is_err() {
                        return;
                    }
                }
            })
        })
        .collect();
    Ok(BatchIter {
        rx: Some(rx),
        handles,
        pending: BTreeMap::new(),
        next: 0,
        len,
    })
}
