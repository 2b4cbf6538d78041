#![allow(dead_code, clippy::needless_range_loop, clippy::type_complexity)]

use hyperspec::data::storage::Patch;
use hyperspec::data::{generate, Dataset, GenConfig, StatsOptions};
use hyperspec::sensor::{builtin, subset};
use hyperspec::{BandSelection, Level, SensorSpec};
use numerics::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a
        .iter()
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
        .max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Builtin sensor truncated or taken whole to give `c` bands.
pub fn sensor_with_bands(c: usize) -> SensorSpec {
    let base = [("AVIRIS-Classic", 224), ("AVIRIS-3", 284), ("AVIRIS-NG", 425)]
        .into_iter()
        .find(|&(_, n)| n >= c)
        .map(|(name, _)| builtin(name, Level::L2Reflectance).unwrap())
        .expect("at most 425 bands");
    subset(&base, BandSelection::new(0, c)).unwrap()
}

/// Same bands as `spec`, reordered by `perm`.
pub fn permute_spec(spec: &SensorSpec, perm: &[usize]) -> SensorSpec {
    SensorSpec {
        name: spec.name.clone(),
        level: spec.level,
        wavelengths_um: perm.iter().map(|&i| spec.wavelengths_um[i]).collect(),
        fwhm_um: perm.iter().map(|&i| spec.fwhm_um[i]).collect(),
    }
}

/// Channels of a `[C, H, W]` cube reordered by `perm`.
pub fn permute_channels(x: &Tensor<f64>, perm: &[usize]) -> Tensor<f64> {
    let s = x.shape();
    let hw = s[1] * s[2];
    let d = x.data();
    let data = perm
        .iter()
        .flat_map(|&c| d[c * hw..(c + 1) * hw].iter().copied())
        .collect();
    Tensor::new(s.to_vec(), data).unwrap()
}

/// Synthetic dataset of all six sensor keys with statistics.
pub fn synthetic(patches_per_sensor: usize, size: usize, seed: u64) -> Dataset {
    let (mut ds, _) = generate(&GenConfig {
        patches_per_sensor,
        size,
        seed,
        ..GenConfig::default()
    })
    .unwrap();
    ds.compute_stats(&StatsOptions::default()).unwrap();
    ds
}

/// In-memory patches of one sensor key with per-band random values.
pub fn random_patches(spec: &SensorSpec, count: usize, size: usize, seed: u64) -> Vec<Patch> {
    let mut r = rng(seed);
    (0..count)
        .map(|i| Patch {
            cube: hyperspec::data::HsiCube {
                sensor: spec.clone(),
                data: Tensor::from_fn([spec.band_count(), size, size], |_| r.random_range(0.5f32..1.5)),
                valid_fraction: 1.0,
            },
            label: Some(i % 4),
        })
        .collect()
}

/// Random factorization instance: patches `[N, C, k²]`, `U [C, D, r]`,
/// `V [C, r, k²]`, bias `[D]`.
pub struct Instance {
    pub p: Tensor<f64>,
    pub u: Tensor<f64>,
    pub v: Tensor<f64>,
    pub bias: Tensor<f64>,
}

impl Instance {
    pub fn random(seed: u64, max_c: usize, max_n: usize) -> Self {
        let mut r = rng(seed);
        let c = r.random_range(1..=max_c);
        let n = r.random_range(1..=max_n);
        let k2 = [1, 4, 9, 16][r.random_range(0..4)];
        let rank = r.random_range(1..=4);
        let d = r.random_range(1..=12);
        Self {
            p: uniform(&mut r, &[n, c, k2]),
            u: uniform(&mut r, &[c, d, rank]),
            v: uniform(&mut r, &[c, rank, k2]),
            bias: uniform(&mut r, &[d]),
        }
    }
}

/// `W_c = U_c·V_c` formed explicitly: `[C, rows, cols]`.
pub fn dense_weights(u: &Tensor<f64>, v: &Tensor<f64>) -> Vec<Vec<Vec<f64>>> {
    let (c, rows, rank) = (u.shape()[0], u.shape()[1], u.shape()[2]);
    let cols = v.shape()[2];
    (0..c)
        .map(|ci| {
            (0..rows)
                .map(|i| {
                    (0..cols)
                        .map(|j| (0..rank).map(|q| u.at(&[ci, i, q]) * v.at(&[ci, q, j])).sum())
                        .collect()
                })
                .collect()
        })
        .collect()
}

/// `out[n] = Σ_c W_c·P[n, c] + bias`, by explicit loops.
pub fn dense_embed(p: &Tensor<f64>, u: &Tensor<f64>, v: &Tensor<f64>, bias: &Tensor<f64>) -> Vec<f64> {
    let w = dense_weights(u, v);
    let (n, c, k2) = (p.shape()[0], p.shape()[1], p.shape()[2]);
    let d = u.shape()[1];
    let mut out = Vec::with_capacity(n * d);
    for ni in 0..n {
        for di in 0..d {
            let mut acc = bias.data()[di];
            for ci in 0..c {
                for j in 0..k2 {
                    acc += w[ci][di][j] * p.at(&[ni, ci, j]);
                }
            }
            out.push(acc);
        }
    }
    out
}

/// `out[n, c] = W′_c·x[n] + bias′` with `W′_c = U′_c·V′_c`, by explicit loops.
pub fn dense_reconstruct(x: &Tensor<f64>, u: &Tensor<f64>, v: &Tensor<f64>, bias: &Tensor<f64>) -> Vec<f64> {
    let w = dense_weights(u, v);
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let (c, k2) = (u.shape()[0], u.shape()[1]);
    let mut out = Vec::with_capacity(n * c * k2);
    for ni in 0..n {
        for wc in w.iter().take(c) {
            for (j, row) in wc.iter().enumerate() {
                out.push(bias.data()[j] + (0..d).map(|i| row[i] * x.at(&[ni, i])).sum::<f64>());
            }
        }
    }
    out
}

/// Runs `factorized_embed` and `hyperlinear` in `T` and returns both
/// outputs in f64. The reconstruction reuses the instance with `U` as
/// `[C, k², r]` and `V` as `[C, r, D]`, built from the same draws.
pub fn run_factorized<T: numerics::Scalar>(
    inst: &Instance,
) -> (Vec<f64>, Vec<f64>, Tensor<f64>, Tensor<f64>, Tensor<f64>) {
    use hyperspec::hyper::{factorized_embed, hyperlinear, HyperFactors};
    let store = numerics::ParamStore::<T>::new();
    let mut g = hyperspec::Graph::new(&store);
    let c = |g: &mut hyperspec::Graph<'_, T>, t: &Tensor<f64>| g.constant(t.cast());
    let (p, u, v, b) = (
        c(&mut g, &inst.p),
        c(&mut g, &inst.u),
        c(&mut g, &inst.v),
        c(&mut g, &inst.bias),
    );
    let out = factorized_embed(&mut g, p, &HyperFactors { u, v, bias: b }).unwrap();
    let emb: Vec<f64> = g.value(out).data().iter().map(|x| x.as_f64()).collect();

    // reconstruction: latents [N, D], U′ = Vᵀ per band [C, k², r], V′ = Uᵀ per band [C, r, D]
    let n = inst.p.shape()[0];
    let d = inst.u.shape()[1];
    let k2 = inst.v.shape()[2];
    let x = Tensor::from_fn([n, d], |i| ((i as f64) * 0.37).sin());
    let u2 = inst.v.permute(&[0, 2, 1]).unwrap();
    let v2 = inst.u.permute(&[0, 2, 1]).unwrap();
    let b2 = Tensor::from_fn([k2], |i| 0.1 * i as f64 - 0.2);
    let (xv, uv, vv, bv) = (c(&mut g, &x), c(&mut g, &u2), c(&mut g, &v2), c(&mut g, &b2));
    let rec = hyperlinear(&mut g, xv, &HyperFactors { u: uv, v: vv, bias: bv }).unwrap();
    let rec: Vec<f64> = g.value(rec).data().iter().map(|x| x.as_f64()).collect();
    (emb, rec, x, u2, v2)
}

/// Worst relative error of both factorized paths against the dense oracles.
pub fn oracle_error<T: numerics::Scalar>(inst: &Instance) -> f64 {
    let (emb, rec, x, u2, v2) = run_factorized::<T>(inst);
    let k2 = inst.v.shape()[2];
    let b2 = Tensor::from_fn([k2], |i| 0.1 * i as f64 - 0.2);
    let e1 = rel_err(&emb, &dense_embed(&inst.p, &inst.u, &inst.v, &inst.bias));
    let e2 = rel_err(&rec, &dense_reconstruct(&x, &u2, &v2, &b2));
    e1.max(e2)
}

/// One parameter set embeds cubes of every band count.
pub fn channel_flexibility(cfg: &hyperspec::ModelConfig, counts: &[usize]) -> Result<(), String> {
    let mut store = numerics::ParamStore::<f32>::new();
    let model = hyperspec::HyperMae::build(cfg, &mut store, 0).map_err(|e| e.to_string())?;
    let before = store.count("");
    let provider = hyperspec::TextEmbeddingProvider::builtin();
    let size = cfg.backbone.image_size;
    for &c in counts {
        let spec = sensor_with_bands(c);
        let x: Tensor<f32> = uniform(&mut rng(c as u64), &[c, size, size]).cast();
        let mut g = hyperspec::Graph::new(&store);
        let xv = g.constant(x);
        let (tokens, _) = model
            .embed
            .forward(&mut g, xv, &spec, &spec.name, &provider)
            .map_err(|e| e.to_string())?;
        let t = g.value(tokens);
        if t.shape() != [cfg.backbone.tokens(), cfg.backbone.embed_dim] || !t.is_finite() {
            return Err(format!("C={c}: tokens {:?}", t.shape()));
        }
    }
    if store.count("") != before {
        return Err("parameter count changed".into());
    }
    Ok(())
}

/// Worst relative change of embedding tokens over `perms` random band
/// permutations of a `c`-band cube with irregular metadata, in f64.
pub fn permutation_error(cfg: &hyperspec::ModelConfig, c: usize, perms: usize, seed: u64) -> f64 {
    use rand::seq::SliceRandom;
    let mut store = numerics::ParamStore::<f64>::new();
    let model = hyperspec::HyperMae::build(cfg, &mut store, seed).unwrap();
    hyperspec::gradcheck::jitter(&mut store, hyperspec::gradcheck::JITTER, seed ^ 7);
    let provider = hyperspec::TextEmbeddingProvider::builtin();
    let mut r = rng(seed);
    let mut wl: Vec<f64> = (0..c).map(|_| r.random_range(0.4..2.4)).collect();
    wl.sort_by(f64::total_cmp);
    let spec = SensorSpec {
        name: "AVIRIS-3".into(),
        level: Level::L1Radiance,
        wavelengths_um: wl,
        fwhm_um: (0..c).map(|_| r.random_range(0.004..0.02)).collect(),
    };
    let size = cfg.backbone.image_size;
    let x = uniform(&mut r, &[c, size, size]);
    let tokens = |x: &Tensor<f64>, spec: &SensorSpec| {
        let mut g = hyperspec::Graph::new(&store);
        let xv = g.constant(x.clone());
        let (t, _) = model.embed.forward(&mut g, xv, spec, &spec.name, &provider).unwrap();
        g.value(t).data().to_vec()
    };
    let base = tokens(&x, &spec);
    let mut worst: f64 = 0.0;
    for _ in 0..perms {
        let mut perm: Vec<usize> = (0..c).collect();
        perm.shuffle(&mut r);
        let out = tokens(&permute_channels(&x, &perm), &permute_spec(&spec, &perm));
        worst = worst.max(rel_err(&base, &out));
    }
    worst
}

pub struct LossCase {
    pub target: Tensor<f64>,
    pub recon: Tensor<f64>,
    pub cfg: hyperspec::loss::LossConfig,
    pub plan: hyperspec::MaskPlan,
}

impl LossCase {
    pub fn random(seed: u64) -> Self {
        let mut r = rng(seed);
        let (n, c, k2) = (
            r.random_range(1..10),
            r.random_range(1..8),
            [1, 4, 9][r.random_range(0..3)],
        );
        let cfg = hyperspec::loss::LossConfig {
            alpha: r.random_range(0.0..2.0),
            beta: r.random_range(0.0..2.0),
            epsilon: 10f64.powf(r.random_range(-4.0..-1.0)),
            masked_only: r.random_bool(0.5),
            sam_mode: if r.random_bool(0.5) {
                hyperspec::loss::SamMode::PerPixel
            } else {
                hyperspec::loss::SamMode::PerPatch
            },
        };
        let plan = hyperspec::mae::random_masking(n, r.random_range(0.0..0.9), r.random()).unwrap();
        Self {
            target: uniform(&mut r, &[n, c, k2]),
            recon: uniform(&mut r, &[n, c, k2]),
            cfg,
            plan,
        }
    }

    /// `(total, charbonnier, sam)` for the case with `recon` replaced.
    pub fn eval(&self, recon: &Tensor<f64>) -> (f64, f64, f64) {
        let store = numerics::ParamStore::<f64>::new();
        let mut g = hyperspec::Graph::new(&store);
        let x = g.constant(self.target.clone());
        let y = g.constant(recon.clone());
        let t = hyperspec::loss::total_loss(&mut g, x, y, &self.cfg, &self.plan).unwrap();
        let v = |v| g.value(v).data()[0];
        (v(t.total), v(t.charbonnier), v(t.sam))
    }
}

/// Checks the loss identities on `cases` random instances; the first
/// violation is returned.
pub fn loss_identities(cases: u64) -> Result<(), String> {
    for seed in 0..cases {
        let case = LossCase::random(seed);
        let (total, _, sam) = case.eval(&case.recon);
        if total < case.cfg.alpha * case.cfg.epsilon {
            return Err(format!("seed {seed}: total {total} below alpha*epsilon"));
        }
        if !(0.0..=2.0).contains(&sam) {
            return Err(format!("seed {seed}: sam {sam} outside [0, 2]"));
        }
        let s = 10f64.powf(rng(seed ^ 5).random_range(-2.0..2.0));
        let (_, _, scaled) = case.eval(&case.recon.scale(s));
        if (scaled - sam).abs() >= 1e-7 {
            return Err(format!(
                "seed {seed}: sam moved by {:e} under scaling by {s}",
                (scaled - sam).abs()
            ));
        }
        let (_, floor, _) = case.eval(&case.target);
        if (floor - case.cfg.epsilon).abs() > 1e-12 * case.cfg.epsilon.max(1.0) {
            return Err(format!(
                "seed {seed}: perfect reconstruction gives {floor}, not {}",
                case.cfg.epsilon
            ));
        }
    }
    Ok(())
}
