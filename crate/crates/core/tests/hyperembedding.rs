mod common;

use common::*;
use hyperspec::accounting::{accounting_config, param_report, vanilla_patch_embed_params};
use hyperspec::hyper::{factorized_embed, unfold_patches, HyperFactors, HyperNet};
use hyperspec::nn::Builder;
use hyperspec::{Graph, ModelConfig};
use numerics::{ParamStore, Tensor};
use proptest::prelude::*;
use rand::seq::SliceRandom;

fn embed_with(p: &Tensor<f64>, u: &Tensor<f64>, v: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    let store = ParamStore::<f64>::new();
    let mut g = Graph::new(&store);
    let f = HyperFactors {
        u: g.constant(u.clone()),
        v: g.constant(v.clone()),
        bias: g.constant(b.clone()),
    };
    let pv = g.constant(p.clone());
    let out = factorized_embed(&mut g, pv, &f).unwrap();
    g.value(out).data().to_vec()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn factorized_paths_match_dense_composition(seed in any::<u64>()) {
        let inst = Instance::random(seed, 8, 16);
        prop_assert!(oracle_error::<f64>(&inst) < 1e-12);
        prop_assert!(oracle_error::<f32>(&inst) < 1e-5);
    }

    #[test]
    fn embedding_is_affine_in_patches(seed in any::<u64>(), a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let inst = Instance::random(seed, 8, 16);
        let mut r = rng(seed ^ 1);
        let p2 = uniform(&mut r, inst.p.shape());
        let mixed = Tensor::from_fn(inst.p.shape().to_vec(), |i| a * inst.p.data()[i] + b * p2.data()[i]);
        let lhs = embed_with(&mixed, &inst.u, &inst.v, &inst.bias);
        let e1 = embed_with(&inst.p, &inst.u, &inst.v, &inst.bias);
        let e2 = embed_with(&p2, &inst.u, &inst.v, &inst.bias);
        let d = inst.bias.numel();
        let rhs: Vec<f64> = (0..lhs.len())
            .map(|i| a * e1[i] + b * e2[i] - (a + b - 1.0) * inst.bias.data()[i % d])
            .collect();
        prop_assert!(rel_err(&lhs, &rhs) < 1e-5);
    }

    #[test]
    fn band_order_does_not_change_tokens(seed in any::<u64>()) {
        let inst = Instance::random(seed, 8, 16);
        let c = inst.p.shape()[1];
        let mut perm: Vec<usize> = (0..c).collect();
        perm.shuffle(&mut rng(seed ^ 2));
        let p = inst.p.index_select(1, &perm).unwrap();
        let u = inst.u.index_select(0, &perm).unwrap();
        let v = inst.v.index_select(0, &perm).unwrap();
        let a = embed_with(&inst.p, &inst.u, &inst.v, &inst.bias);
        let b = embed_with(&p, &u, &v, &inst.bias);
        prop_assert!(rel_err(&a, &b) < 1e-6);
    }
}

#[test]
fn zero_patches_give_bias_on_every_token() {
    let inst = Instance::random(3, 8, 16);
    let zero = Tensor::zeros(inst.p.shape().to_vec());
    let out = embed_with(&zero, &inst.u, &inst.v, &inst.bias);
    let d = inst.bias.numel();
    for (i, v) in out.iter().enumerate() {
        assert_eq!(*v, inst.bias.data()[i % d]);
    }
}

#[test]
fn generated_factor_shapes_at_base_geometry() {
    let cfg = accounting_config();
    let mut store = ParamStore::<f32>::new();
    let h = &cfg.hyper;
    let net = HyperNet::new(
        &mut Builder::new(&mut store, 0),
        h.meta_dim,
        h.hyper_hidden,
        768,
        64,
        4,
        1.0,
        1.0,
    );
    let mut g = Graph::new(&store);
    let e = g.constant(Tensor::from_fn([100, h.meta_dim], |i| ((i % 97) as f32 * 0.01).sin()));
    let f = net.generate(&mut g, e).unwrap();
    assert_eq!(g.shape(f.u), &[100, 768, 4]);
    assert_eq!(g.shape(f.v), &[100, 4, 64]);
    assert_eq!(g.shape(f.bias), &[768]);

    let x = Tensor::<f32>::zeros([100, 224, 224]);
    let p = unfold_patches(&x, 8).unwrap();
    assert_eq!(p.shape(), &[784, 100, 64]);
}

#[test]
fn permuting_conditioning_rows_permutes_factors() {
    let mut store = ParamStore::<f64>::new();
    let net = HyperNet::new(&mut Builder::new(&mut store, 5), 6, 10, 5, 4, 3, 1.0, 1.0);
    let e = uniform(&mut rng(1), &[7, 6]);
    let mut perm: Vec<usize> = (0..7).collect();
    perm.shuffle(&mut rng(2));
    let run = |e: &Tensor<f64>| {
        let mut g = Graph::new(&store);
        let ev = g.constant(e.clone());
        let f = net.generate(&mut g, ev).unwrap();
        (g.value(f.u).clone(), g.value(f.v).clone(), g.value(f.bias).clone())
    };
    let (u, v, b) = run(&e);
    let (up, vp, bp) = run(&e.index_select(0, &perm).unwrap());
    assert_eq!(up, u.index_select(0, &perm).unwrap());
    assert_eq!(vp, v.index_select(0, &perm).unwrap());
    assert!(rel_err(bp.data(), b.data()) < 1e-12);
}

#[test]
fn one_parameter_set_handles_every_band_count() {
    let cfg = ModelConfig::toy();
    channel_flexibility(&cfg, &[50, 100, 224, 284, 425]).unwrap();
    let a = param_report(&accounting_config(), 50).unwrap();
    let b = param_report(&accounting_config(), 425).unwrap();
    assert_eq!(a.total, b.total);
    assert_eq!(a.blocks, b.blocks);
}

#[test]
fn vanilla_baseline_count() {
    assert_eq!(vanilla_patch_embed_params(100, 8, 768), 4_915_968);
    let r = param_report(&accounting_config(), 100).unwrap();
    assert_eq!(r.vanilla, 4_915_968);
    assert_eq!(r.blocks.iter().map(|(_, n)| n).sum::<usize>(), r.total);
}
