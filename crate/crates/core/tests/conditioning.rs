mod common;

use common::*;
use hyperspec::content::{dual_pool, ContentEncoder};
use hyperspec::gradcheck::default_options;
use hyperspec::meta::{fourier_wavelength_encoding, MetaEncoder};
use hyperspec::nn::Builder;
use hyperspec::sensor::{builtin_sensors, subset, validate};
use hyperspec::{BandSelection, Graph, HyperConfig, Level, ModelConfig, SensorSpec, TextEmbeddingProvider};
use numerics::{finite_diff_check, ParamStore, Tensor};
use proptest::prelude::*;
use rand::seq::SliceRandom;

fn six_band_spec() -> SensorSpec {
    SensorSpec {
        name: "AVIRIS-NG".into(),
        level: Level::L2Reflectance,
        wavelengths_um: vec![0.45, 0.62, 0.88, 1.25, 1.65, 2.2],
        fwhm_um: vec![0.005, 0.007, 0.01, 0.012, 0.006, 0.02],
    }
}

#[test]
fn builtin_specs_validate() {
    for s in builtin_sensors() {
        assert!(validate(&s).is_empty(), "{}: {:?}", s.key(), validate(&s));
    }
}

proptest! {
    #[test]
    fn nested_subsets_compose(which in 0usize..6, a0 in 0usize..200, alen in 1usize..200, b0 in 0usize..200, blen in 1usize..200) {
        let s = &builtin_sensors()[which];
        let c = s.band_count();
        let a = BandSelection::new(a0 % c, 1 + (alen - 1) % (c - a0 % c));
        let b = BandSelection::new(b0 % a.length, 1 + (blen - 1) % (a.length - b0 % a.length));
        let nested = subset(&subset(s, a).unwrap(), b).unwrap();
        prop_assert_eq!(nested, subset(s, a.then(b)).unwrap());
    }

    #[test]
    fn text_vectors_are_deterministic_unit_norm(text in ".{0,24}") {
        let p = TextEmbeddingProvider::builtin();
        let v = p.embed(&text);
        prop_assert_eq!(&v, &p.embed(&text));
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!((norm - 1.0).abs() < 1e-9);
    }

    #[test]
    fn fourier_columns_are_unit_pairs(x in proptest::collection::vec(0.21f64..2.99, 1..12), half in 1usize..64) {
        let d = 2 * half;
        let e = fourier_wavelength_encoding::<f64>(&x, d).unwrap();
        for r in 0..x.len() {
            for i in 0..half {
                let (c, s) = (e.at(&[r, 2 * i]), e.at(&[r, 2 * i + 1]));
                prop_assert!(c.abs() <= 1.0 && s.abs() <= 1.0);
                prop_assert!((c * c + s * s - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn dual_pool_max_dominates_avg(seed in any::<u64>(), flat in 0usize..4) {
        let mut r = rng(seed);
        let mut x = uniform(&mut r, &[2, 4, 4]);
        // make one 2×2 cell of band 0 constant
        let (cy, cx) = (2 * (flat / 2), 2 * (flat % 2));
        let v = x.at(&[0, cy, cx]);
        for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
            x.data_mut()[(cy + dy) * 4 + cx + dx] = v;
        }
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let xv = g.constant(x);
        let (avg, max) = dual_pool(&mut g, xv, 2).unwrap();
        let (a, m) = (g.value(avg).clone(), g.value(max).clone());
        for c in 0..2 {
            for n in 0..4 {
                let (a, m) = (a.at(&[c, n]), m.at(&[c, n]));
                prop_assert!(m >= a);
                let constant = c == 0 && n == flat;
                prop_assert_eq!(m == a, constant, "band {} cell {}", c, n);
            }
        }
    }
}

#[test]
fn meta_encoding_is_band_equivariant() {
    let mut store = ParamStore::<f64>::new();
    let enc = MetaEncoder::new(&mut Builder::new(&mut store, 3), &ModelConfig::toy().hyper);
    let provider = TextEmbeddingProvider::builtin();
    let spec = six_band_spec();
    let run = |s: &SensorSpec| {
        let mut g = Graph::new(&store);
        let v = enc.encode(&mut g, s, &s.name, &provider).unwrap();
        g.value(v).clone()
    };
    let base = run(&spec);
    let mut r = rng(4);
    for _ in 0..20 {
        let mut perm: Vec<usize> = (0..6).collect();
        perm.shuffle(&mut r);
        let out = run(&permute_spec(&spec, &perm));
        assert!(rel_err(out.data(), base.index_select(0, &perm).unwrap().data()) < 1e-12);
    }
}

#[test]
fn meta_encoding_is_finite_for_builtin_sensors_at_every_width() {
    let provider = TextEmbeddingProvider::builtin();
    for d in [64, 128, 256] {
        let cfg = HyperConfig {
            meta_dim: d,
            ..HyperConfig::default()
        };
        let mut store = ParamStore::<f32>::new();
        let enc = MetaEncoder::new(&mut Builder::new(&mut store, 0), &cfg);
        for s in builtin_sensors() {
            let mut g = Graph::new(&store);
            let v = enc.encode(&mut g, &s, &s.name, &provider).unwrap();
            assert_eq!(g.shape(v), &[s.band_count(), d]);
            assert!(g.value(v).is_finite(), "{} at d={d}", s.key());
        }
    }
}

#[test]
fn meta_encoder_gradients_match_central_differences() {
    let mut store = ParamStore::<f64>::new();
    let enc = MetaEncoder::new(&mut Builder::new(&mut store, 8), &ModelConfig::toy().hyper);
    let provider = TextEmbeddingProvider::builtin();
    let spec = six_band_spec();
    let w = uniform(&mut rng(9), &[6, enc.d]).scale(1.0 / (6.0 * enc.d as f64).sqrt());
    let mut opts = default_options(1);
    opts.per_block = None;
    let report = finite_diff_check(
        &mut store,
        |s, t| {
            let mut g = Graph::new(s);
            let v = enc
                .encode(&mut g, &spec, &spec.name, &provider)
                .map_err(|e| numerics::NumericsError::Invalid(e.to_string()))?;
            let wv = g.constant(w.clone());
            let p = g.mul(v, wv)?;
            let out = g.sum_all(p)?;
            *t = g.into_tape();
            Ok(out)
        },
        &opts,
    )
    .unwrap();
    assert!(report.passed(), "{report}");
}

#[test]
fn content_encoding_is_band_equivariant() {
    let mut store = ParamStore::<f64>::new();
    let enc = ContentEncoder::new(&mut Builder::new(&mut store, 2), 4, 8);
    let x = uniform(&mut rng(5), &[7, 16, 16]);
    let run = |x: &Tensor<f64>| {
        let mut g = Graph::new(&store);
        let xv = g.constant(x.clone());
        let v = enc.encode(&mut g, xv, 4).unwrap();
        g.value(v).clone()
    };
    let base = run(&x);
    let mut perm: Vec<usize> = (0..7).collect();
    perm.shuffle(&mut rng(6));
    assert_eq!(run(&permute_channels(&x, &perm)), base.index_select(0, &perm).unwrap());
    // other resolutions are re-pooled onto the configured grid
    let big = uniform(&mut rng(7), &[3, 32, 32]);
    let mut g = Graph::new(&store);
    let bv = g.constant(big);
    let v = enc.encode(&mut g, bv, 4).unwrap();
    assert_eq!(g.shape(v), &[3, 8]);
}

#[test]
fn content_gradients_reach_the_cube_through_both_pools() {
    let mut store = ParamStore::<f64>::new();
    let enc = ContentEncoder::new(&mut Builder::new(&mut store, 2), 2, 6);
    // continuous random values: no ties inside pooling cells
    let x = store.add("cube", uniform(&mut rng(11), &[3, 8, 8]));
    let w = uniform(&mut rng(12), &[3, 6]).scale(1.0 / 18f64.sqrt());
    let mut opts = default_options(2);
    opts.per_block = None;
    let report = finite_diff_check(
        &mut store,
        |s, t| {
            let mut g = Graph::new(s);
            let xv = g.p(x);
            let v = enc
                .encode(&mut g, xv, 4)
                .map_err(|e| numerics::NumericsError::Invalid(e.to_string()))?;
            let wv = g.constant(w.clone());
            let p = g.mul(v, wv)?;
            let out = g.sum_all(p)?;
            *t = g.into_tape();
            Ok(out)
        },
        &opts,
    )
    .unwrap();
    assert!(report.passed(), "{report}");
    assert!(report.block("cube").unwrap().checked == 3 * 64);
}

#[test]
fn embedding_ignores_band_order() {
    let cfg = ModelConfig::toy();
    for c in [3, 9] {
        let err = permutation_error(&cfg, c, 10, c as u64);
        assert!(err < 1e-6, "C={c}: {err:e}");
    }
}

#[test]
fn sensor_name_changes_the_encoding() {
    let mut store = ParamStore::<f64>::new();
    let enc = MetaEncoder::new(&mut Builder::new(&mut store, 3), &ModelConfig::toy().hyper);
    let provider = TextEmbeddingProvider::builtin();
    let spec = six_band_spec();
    let mut g = Graph::new(&store);
    let a = enc.encode(&mut g, &spec, &spec.name, &provider).unwrap();
    let b = enc.encode(&mut g, &spec, "unknown", &provider).unwrap();
    assert!(rel_err(g.value(a).data(), g.value(b).data()) > 1e-3);
}
