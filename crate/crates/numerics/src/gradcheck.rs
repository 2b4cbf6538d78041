//! Central finite-difference verification of tape gradients.

use std::fmt;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::param::{ParamId, ParamStore};
use crate::tape::{backward, Tape, Var};

#[derive(Debug, Clone)]
pub struct FdOptions {
    pub h: f64,
    pub tolerance: f64,
    /// Relative errors use `max(|analytic|, |numeric|, abs_floor)` as the
    /// denominator so entries that are zero up to rounding are not amplified.
    pub abs_floor: f64,
    /// Entries checked per parameter block; `None` checks every entry.
    pub per_block: Option<usize>,
    /// Cap on entries checked across all blocks, drawn uniformly.
    pub total: Option<usize>,
    pub seed: u64,
}

impl Default for FdOptions {
    fn default() -> Self {
        Self {
            h: 1e-5,
            tolerance: 1e-4,
            abs_floor: 1e-7,
            per_block: None,
            total: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockStatus {
    Pass,
    Fail,
    /// Zero analytic and zero numeric gradient: the block does not influence
    /// the function.
    Dead,
}

#[derive(Debug, Clone)]
pub struct BlockReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub status: BlockStatus,
}

#[derive(Debug, Clone)]
pub struct FdReport {
    pub tolerance: f64,
    pub blocks: Vec<BlockReport>,
}

impl FdReport {
    pub fn passed(&self) -> bool {
        self.blocks.iter().all(|b| b.status != BlockStatus::Fail)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.blocks.iter().map(|b| b.max_rel_err).fold(0.0, f64::max)
    }

    pub fn checked(&self) -> usize {
        self.blocks.iter().map(|b| b.checked).sum()
    }

    pub fn block(&self, name: &str) -> Option<&BlockReport> {
        self.blocks.iter().find(|b| b.name == name)
    }
}

impl fmt::Display for FdReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in &self.blocks {
            let status = match b.status {
                BlockStatus::Pass => "pass",
                BlockStatus::Fail => "FAIL",
                BlockStatus::Dead => "zero analytic, zero numeric",
            };
            writeln!(
                f,
                "{:<48} n={:<5} max_rel_err={:.3e}  {status}",
                b.name, b.checked, b.max_rel_err
            )?;
        }
        write!(
            f,
            "overall max_rel_err={:.3e} tolerance={:.1e} {}",
            self.max_rel_err(),
            self.tolerance,
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

fn relative_error(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Compares reverse-mode gradients of `f` with central differences for the
/// trainable parameters of `store`. `f` must be deterministic.
pub fn finite_diff_check<F>(store: &mut ParamStore<f64>, mut f: F, opts: &FdOptions) -> Result<FdReport>
where
    F: FnMut(&ParamStore<f64>, &mut Tape<f64>) -> Result<Var>,
{
    store.zero_grad();
    let mut tape = Tape::new();
    let loss = f(store, &mut tape)?;
    backward(&tape, loss, store)?;
    drop(tape);

    let mut eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let l = f(store, &mut tape)?;
        Ok(tape.value(l).item().unwrap_or(f64::NAN))
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let blocks: Vec<ParamId> = store
        .iter()
        .filter(|(_, p)| p.trainable && p.value.numel() > 0)
        .map(|(id, _)| id)
        .collect();

    // (block, flat index) pairs to probe
    let mut picks: Vec<Vec<usize>> = blocks
        .iter()
        .map(|&id| {
            let n = store.value(id).numel();
            match opts.per_block {
                Some(k) if k < n => {
                    let mut v = sample(&mut rng, n, k).into_vec();
                    v.sort_unstable();
                    v
                }
                _ => (0..n).collect(),
            }
        })
        .collect();
    if let Some(total) = opts.total {
        let flat: Vec<(usize, usize)> = picks
            .iter()
            .enumerate()
            .flat_map(|(b, v)| v.iter().map(move |&i| (b, i)))
            .collect();
        if total < flat.len() {
            let chosen = sample(&mut rng, flat.len(), total).into_vec();
            picks.iter_mut().for_each(Vec::clear);
            let mut chosen = chosen;
            chosen.sort_unstable();
            for c in chosen {
                let (b, i) = flat[c];
                picks[b].push(i);
            }
        }
    }

    let mut reports = Vec::new();
    for (&id, idx) in blocks.iter().zip(&picks) {
        let name = store.get(id).name.clone();
        let analytic_all = store.grad(id).clone();
        let mut worst = (0.0f64, 0.0f64, 0.0f64);
        let mut all_zero = true;
        for &i in idx {
            let orig = store.value(id).data()[i];
            store.get_mut(id).value.data_mut()[i] = orig + opts.h;
            let plus = eval(store)?;
            store.get_mut(id).value.data_mut()[i] = orig - opts.h;
            let minus = eval(store)?;
            store.get_mut(id).value.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * opts.h);
            let analytic = analytic_all.data()[i];
            if analytic != 0.0 || numeric != 0.0 {
                all_zero = false;
            }
            let err = relative_error(analytic, numeric, opts.abs_floor);
            if err > worst.0 || err.is_nan() {
                worst = (err, analytic, numeric);
            }
        }
        let status = if all_zero && !idx.is_empty() {
            BlockStatus::Dead
        } else if worst.0 < opts.tolerance {
            BlockStatus::Pass
        } else {
            BlockStatus::Fail
        };
        if idx.is_empty() {
            continue;
        }
        reports.push(BlockReport {
            name,
            checked: idx.len(),
            max_rel_err: worst.0,
            worst_analytic: worst.1,
            worst_numeric: worst.2,
            status,
        });
    }
    Ok(FdReport {
        tolerance: opts.tolerance,
        blocks: reports,
    })
}
