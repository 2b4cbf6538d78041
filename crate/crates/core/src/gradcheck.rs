//! Finite-difference checks of whole-model gradients on toy geometries.

use numerics::{finite_diff_check, FdOptions, FdReport, NumericsError, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::graph::Graph;
use crate::loss::{total_loss, LossConfig};
use crate::mae::{random_masking, HyperMae};
use crate::sensor::{Level, SensorSpec};
use crate::text::TextEmbeddingProvider;
use crate::Result;

fn lift(e: crate::Error) -> NumericsError {
    NumericsError::Invalid(e.to_string())
}

/// Random cube `[c, size, size]` and a matching uniform sensor.
pub fn toy_input(c: usize, size: usize, seed: u64) -> (Tensor<f64>, SensorSpec) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::from_fn([c, size, size], |_| rng.random_range(-1.0..1.0));
    let spec = SensorSpec::uniform("AVIRIS-NG", Level::L2Reflectance, 0.45, 2.3, c, 0.01);
    (x, spec)
}

/// Adds `U(-scale, scale)` to every parameter, moving the check away from
/// the initialization where some paths carry vanishing gradients.
pub fn jitter(store: &mut ParamStore<f64>, scale: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.get_mut(id).value.data_mut() {
            *v += rng.random_range(-scale..scale);
        }
    }
}

/// Smallest gradient magnitude resolved by f64 central differences at
/// `h = 1e-5` on losses of order one; used as the relative-error floor.
pub const RESOLUTION_FLOOR: f64 = 1e-6;

/// Defaults used by [`embedding_check`] and [`objective_check`]: central
/// differences with `h = 1e-5`, a handful of entries per block.
pub fn default_options(seed: u64) -> FdOptions {
    FdOptions {
        abs_floor: RESOLUTION_FLOOR,
        per_block: Some(4),
        seed,
        ..FdOptions::default()
    }
}

pub const JITTER: f64 = 0.2;

/// Checks the patch embedding: loss is a fixed random linear functional of
/// the tokens, scaled to order one. Parameters are jittered by [`JITTER`].
pub fn embedding_check(cfg: &ModelConfig, c: usize, seed: u64, opts: &FdOptions) -> Result<FdReport> {
    let mut store = ParamStore::<f64>::new();
    let model = HyperMae::build(cfg, &mut store, seed)?;
    jitter(&mut store, JITTER, seed ^ 4);
    let (x, spec) = toy_input(c, cfg.backbone.image_size, seed ^ 1);
    let provider = TextEmbeddingProvider::builtin();
    let n = cfg.backbone.tokens();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 2);
    let d = cfg.backbone.embed_dim;
    let unit = 1.0 / ((n * d) as f64).sqrt();
    let probe = Tensor::from_fn([n, d], |_| unit * rng.random_range(-1.0..1.0));
    let report = finite_diff_check(
        &mut store,
        |s, t| {
            let mut g = Graph::new(s);
            let xv = g.constant(x.clone());
            let (tokens, _) = model
                .embed
                .forward(&mut g, xv, &spec, &spec.name, &provider)
                .map_err(lift)?;
            let w = g.constant(probe.clone());
            let prod = g.mul(tokens, w)?;
            let v = g.sum_all(prod)?;
            *t = g.into_tape();
            Ok(v)
        },
        opts,
    )?;
    Ok(report)
}

/// Checks the full masked objective: embedding, encoder, decoder,
/// reconstruction head and hybrid loss, with half of the tokens masked.
/// Parameters are jittered by [`JITTER`].
pub fn objective_check(cfg: &ModelConfig, c: usize, seed: u64, opts: &FdOptions) -> Result<FdReport> {
    let mut store = ParamStore::<f64>::new();
    let model = HyperMae::build(cfg, &mut store, seed)?;
    jitter(&mut store, JITTER, seed ^ 4);
    let (x, spec) = toy_input(c, cfg.backbone.image_size, seed ^ 1);
    let provider = TextEmbeddingProvider::builtin();
    let plan = random_masking(cfg.backbone.tokens(), 0.5, seed ^ 3)?;
    let loss_cfg = LossConfig::default();
    let report = finite_diff_check(
        &mut store,
        |s, t| {
            let mut g = Graph::new(s);
            let out = model
                .forward_mim(&mut g, &x, &spec, &spec.name, &provider, &plan, None)
                .map_err(lift)?;
            let terms = total_loss(&mut g, out.target, out.reconstruction, &loss_cfg, &plan).map_err(lift)?;
            *t = g.into_tape();
            Ok(terms.total)
        },
        opts,
    )?;
    Ok(report)
}
