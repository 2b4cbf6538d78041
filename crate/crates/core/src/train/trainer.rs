use std::collections::HashMap;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use numerics::{backward, ParamStore, Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::data::loader::{batch_iterator, plan_epoch, Batch};
use crate::data::sampler::view_seed;
use crate::data::Dataset;
use crate::graph::Graph;
use crate::loss::total_loss;
use crate::mae::{random_masking, HyperMae};
use crate::text::TextEmbeddingProvider;
use crate::train::config::{StageConfig, TrainConfig};
use crate::train::dropout::apply_name_dropout;
use crate::train::optim::AdamW;
use crate::train::schedule::Schedule;
use crate::{Error, Result};

const SAMPLE_SALT: u64 = 0x6d61_736b_0000_0001;

/// Mean loss terms over the samples of one batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub charbonnier: f64,
    pub sam: f64,
    pub zero_norm: usize,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub stage: String,
    /// Counted across stages, from 1.
    pub epoch: usize,
    /// Rate of the last optimizer step in the epoch.
    pub lr: f64,
    pub loss_total: f64,
    pub loss_charbonnier: f64,
    pub loss_sam: f64,
    pub skipped_steps: usize,
}

impl EpochMetrics {
    pub const HEADER: &'static str = "epoch,lr,loss_total,loss_charbonnier,loss_sam";

    pub fn csv(&self) -> String {
        format!(
            "{},{:.6e},{:.6},{:.6},{:.6}",
            self.epoch, self.lr, self.loss_total, self.loss_charbonnier, self.loss_sam
        )
    }
}

impl fmt::Display for EpochMetrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[{}] epoch {} lr {:.3e} loss {:.5} (charbonnier {:.5}, sam {:.5})",
            self.stage, self.epoch, self.lr, self.loss_total, self.loss_charbonnier, self.loss_sam
        )?;
        if self.skipped_steps > 0 {
            write!(f, " skipped {}", self.skipped_steps)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageReport {
    pub name: String,
    pub patches: usize,
    pub epochs: Vec<EpochMetrics>,
    pub checkpoint: Option<PathBuf>,
}

pub struct Trainer<T: Scalar> {
    pub cfg: TrainConfig,
    pub model: HyperMae,
    pub store: ParamStore<T>,
    pub provider: TextEmbeddingProvider,
    /// Batches consumed so far; drives masking, dropout and view seeds.
    pub batches_seen: u64,
    pub epochs_done: usize,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(cfg: TrainConfig, provider: TextEmbeddingProvider) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let model = HyperMae::build(&cfg.model, &mut store, cfg.seed)?;
        Ok(Self {
            cfg,
            model,
            store,
            provider,
            batches_seen: 0,
            epochs_done: 0,
        })
    }

    pub fn optimizer(&self) -> AdamW<T> {
        AdamW::new(
            &self.store,
            self.cfg.beta1,
            self.cfg.beta2,
            self.cfg.adam_eps,
            self.cfg.weight_decay,
        )
    }

    /// Forward and backward over one batch, adding the gradient of the
    /// batch-mean loss into the store.
    pub fn accumulate(&mut self, batch: &Batch) -> Result<StepStats> {
        if batch.samples.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let spec = &batch.spec;
        let k = self.model.patch();
        let n = batch.samples.len();
        let mut g = Graph::new(&self.store);
        let mut meta_cache = HashMap::new();
        let (mut totals, mut ch, mut sam, mut zero_norm) = (Vec::with_capacity(n), 0.0, 0.0, 0);
        for (i, s) in batch.samples.iter().enumerate() {
            let sh = s.x.shape();
            let tokens = (sh[1] / k) * (sh[2] / k);
            let mut rng =
                ChaCha8Rng::seed_from_u64(view_seed(self.cfg.seed ^ SAMPLE_SALT, self.batches_seen, i as u64));
            let name = apply_name_dropout(&spec.name, self.cfg.sensor_name_dropout, &mut rng).to_string();
            let plan = random_masking(tokens, self.cfg.mask_ratio, rng.random())?;
            let x: Tensor<T> = s.x.cast();
            let meta = meta_cache.get(&name).copied();
            let out = self
                .model
                .forward_mim(&mut g, &x, spec, &name, &self.provider, &plan, meta)?;
            meta_cache.insert(name, out.condition.meta);
            let terms = total_loss(&mut g, out.target, out.reconstruction, &self.cfg.loss, &plan)?;
            ch += scalar(&g, terms.charbonnier);
            sam += scalar(&g, terms.sam);
            zero_norm += terms.zero_norm;
            totals.push(terms.total);
        }
        let mut sum = totals[0];
        for &t in &totals[1..] {
            sum = g.add(sum, t)?;
        }
        let loss = g.scale(sum, T::lit(1.0 / n as f64));
        let value = scalar(&g, loss);
        let tape = g.into_tape();
        backward(&tape, loss, &mut self.store)?;
        self.batches_seen += 1;
        Ok(StepStats {
            loss: value,
            charbonnier: ch / n as f64,
            sam: sam / n as f64,
            zero_norm,
            samples: n,
        })
    }

    /// Averages the gradients of `batches` accumulated batches, applies
    /// one optimizer step and clears the gradients.
    pub fn apply(&mut self, opt: &mut AdamW<T>, lr: f64, batches: usize) -> Result<()> {
        if batches > 1 {
            let c = T::lit(1.0 / batches as f64);
            let ids: Vec<_> = self.store.ids().collect();
            for id in ids {
                let p = self.store.get_mut(id);
                p.grad = p.grad.scale(c);
            }
        }
        let r = opt.update(&mut self.store, lr);
        self.store.zero_grad();
        r
    }

    /// One batch and one optimizer step.
    pub fn train_step(&mut self, opt: &mut AdamW<T>, batch: &Batch, lr: f64) -> Result<StepStats> {
        let st = self.accumulate(batch)?;
        self.apply(opt, lr, 1)?;
        Ok(st)
    }

    pub fn run_stage(
        &mut self,
        stage: &StageConfig,
        dataset: &Dataset,
        on_epoch: &mut dyn FnMut(&EpochMetrics),
    ) -> Result<StageReport> {
        let ds = dataset.select(&stage.select)?;
        let stats = ds.stats.as_ref().ok_or_else(|| Error::MissingStats("dataset".into()))?;
        for key in ds.sensors.keys() {
            stats.get(key)?;
        }
        let loader = self.cfg.loader();
        let ds = Arc::new(ds);
        let accum = self.cfg.grad_accum;
        let batches = plan_epoch(&ds, &loader, 0, 0)?.len();
        let steps_per_epoch = batches.div_ceil(accum) as u64;
        let epochs = self.cfg.stage_epochs(stage);
        let sched = Schedule::new(
            self.cfg.lr_base,
            self.cfg.lr_min,
            self.cfg.stage_warmup(stage),
            epochs,
            steps_per_epoch,
        );
        let mut opt = self.optimizer();
        let mut step = 0u64;
        let mut report = StageReport {
            name: stage.name.clone(),
            patches: ds.len(),
            epochs: Vec::with_capacity(epochs),
            checkpoint: None,
        };
        for _ in 0..epochs {
            let plans = plan_epoch(&ds, &loader, self.epochs_done as u64, self.batches_seen)?;
            let (mut sum, mut sum_ch, mut sum_sam, mut count) = (0.0, 0.0, 0.0, 0usize);
            let (mut pending, mut lr, mut skipped) = (0, 0.0, 0);
            let mut iter = batch_iterator(Arc::clone(&ds), plans, &loader)?.peekable();
            while let Some(batch) = iter.next() {
                let st = self.accumulate(&batch?)?;
                let w = st.samples as f64;
                sum += st.loss * w;
                sum_ch += st.charbonnier * w;
                sum_sam += st.sam * w;
                count += st.samples;
                pending += 1;
                if pending == accum || iter.peek().is_none() {
                    lr = sched.lr_at(step);
                    match self.apply(&mut opt, lr, pending) {
                        Ok(()) => {}
                        Err(Error::NonFinite(what)) => {
                            log::warn!("skipping optimizer step {step}: non-finite {what}");
                            skipped += 1;
                        }
                        Err(e) => return Err(e),
                    }
                    step += 1;
                    pending = 0;
                }
            }
            self.epochs_done += 1;
            let m = EpochMetrics {
                stage: stage.name.clone(),
                epoch: self.epochs_done,
                lr,
                loss_total: sum / count as f64,
                loss_charbonnier: sum_ch / count as f64,
                loss_sam: sum_sam / count as f64,
                skipped_steps: skipped,
            };
            on_epoch(&m);
            if !m.loss_total.is_finite() {
                return Err(Error::NonFinite(format!("epoch {} loss", m.epoch)));
            }
            report.epochs.push(m);
        }
        Ok(report)
    }

    /// Runs every stage in order. With `out_dir`, writes `metrics.csv`, a
    /// checkpoint per stage, and starts each later stage from the previous
    /// stage's checkpoint file.
    pub fn run_schedule(
        &mut self,
        dataset: &Dataset,
        out_dir: Option<&Path>,
        on_epoch: &mut dyn FnMut(&EpochMetrics),
    ) -> Result<Vec<StageReport>> {
        let mut log = match out_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir)?;
                std::fs::write(dir.join("config.toml"), self.cfg.to_toml()?)?;
                let mut f = std::fs::File::create(dir.join("metrics.csv"))?;
                writeln!(f, "{}", EpochMetrics::HEADER)?;
                Some(f)
            }
            None => None,
        };
        let stages = self.cfg.stages.clone();
        let mut reports = Vec::with_capacity(stages.len());
        for (i, stage) in stages.iter().enumerate() {
            if let Some(prev) = reports.last().and_then(|r: &StageReport| r.checkpoint.clone()) {
                self.load_checkpoint(&prev)?;
            }
            let mut io_err = None;
            let mut report = self.run_stage(stage, dataset, &mut |m| {
                if let Some(f) = log.as_mut() {
                    if let Err(e) = writeln!(f, "{}", m.csv()) {
                        io_err.get_or_insert(e);
                    }
                }
                on_epoch(m);
            })?;
            if let Some(e) = io_err {
                return Err(e.into());
            }
            if let Some(dir) = out_dir {
                let path = dir.join(format!("stage{}-{}.ckpt", i + 1, stage.name));
                self.save_checkpoint(&path)?;
                report.checkpoint = Some(path);
            }
            reports.push(report);
        }
        Ok(reports)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(&self.cfg.model, &self.store)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        self.checkpoint().save(path)
    }

    pub fn load_checkpoint(&mut self, path: &Path) -> Result<()> {
        Checkpoint::load(path)?.restore(&self.cfg.model, &mut self.store)
    }
}

fn scalar<T: Scalar>(g: &Graph<'_, T>, v: numerics::Var) -> f64 {
    g.value(v).data()[0].as_f64()
}
