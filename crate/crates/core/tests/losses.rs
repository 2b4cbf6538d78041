mod common;

use common::*;
use hyperspec::loss::{charbonnier, sam_loss, total_loss, LossConfig, SamMode, SAM_EPS};
use hyperspec::mae::random_masking;
use hyperspec::Graph;
use numerics::{finite_diff_check, FdOptions, NumericsError, ParamStore};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn total_is_at_least_alpha_epsilon(seed in any::<u64>()) {
        let case = LossCase::random(seed);
        let (total, ch, sam) = case.eval(&case.recon);
        prop_assert!(total >= case.cfg.alpha * case.cfg.epsilon);
        prop_assert!((total - (case.cfg.alpha * ch + case.cfg.beta * sam)).abs() < 1e-12);
    }

    #[test]
    fn sam_is_bounded_and_scale_free(seed in any::<u64>(), log_s in -3.0f64..3.0) {
        let case = LossCase::random(seed);
        let (_, _, sam) = case.eval(&case.recon);
        prop_assert!((0.0..=2.0).contains(&sam));
        let scale = 10f64.powf(log_s);
        // invariance holds while every spectrum stays well above ε
        prop_assume!(min_spectrum_norm(&case.recon) * scale.min(1.0) >= 1e-4);
        let (_, _, scaled) = case.eval(&case.recon.scale(scale));
        prop_assert!((scaled - sam).abs() < 1e-7);
    }

    #[test]
    fn perfect_reconstruction_sits_on_the_floor(seed in any::<u64>()) {
        let case = LossCase::random(seed);
        let (total, ch, sam) = case.eval(&case.target);
        prop_assert!((ch - case.cfg.epsilon).abs() < 1e-15);
        // ε² in the norms leaves ε²/(|x|² + ε²) per spectrum
        let floor = sam_floor_bound(&case.target);
        prop_assert!(sam >= 0.0 && sam <= floor + 64.0 * f64::EPSILON, "{} > {}", sam, floor);
        prop_assert!((total - case.cfg.alpha * case.cfg.epsilon - case.cfg.beta * sam).abs() < 1e-12);
    }
}

/// Squared norms of every spectrum SAM can see in a `[N, C, k²]` tensor:
/// each pixel across bands, and each patch's band-mean vector.
fn spectrum_sq_norms(x: &numerics::Tensor<f64>) -> Vec<f64> {
    let s = x.shape();
    let (n, c, k2) = (s[0], s[1], s[2]);
    let at = |i: usize, b: usize, p: usize| x.data()[(i * c + b) * k2 + p];
    let mut out = Vec::new();
    for i in 0..n {
        for p in 0..k2 {
            out.push((0..c).map(|b| at(i, b, p).powi(2)).sum());
        }
        out.push((0..c).map(|b| ((0..k2).map(|p| at(i, b, p)).sum::<f64>() / k2 as f64).powi(2)).sum());
    }
    out
}

/// Largest `ε²/(|x|² + ε²)` over those spectra.
fn sam_floor_bound(x: &numerics::Tensor<f64>) -> f64 {
    let eps2 = SAM_EPS * SAM_EPS;
    spectrum_sq_norms(x).into_iter().map(|sq| eps2 / (sq + eps2)).fold(0.0, f64::max)
}

fn min_spectrum_norm(x: &numerics::Tensor<f64>) -> f64 {
    spectrum_sq_norms(x).into_iter().fold(f64::INFINITY, f64::min).sqrt()
}

#[test]
fn identities_hold_on_a_thousand_cases() {
    loss_identities(1000).unwrap();
}

#[test]
fn opposite_spectra_reach_the_upper_bound() {
    let store = ParamStore::<f64>::new();
    let mut g = Graph::new(&store);
    let x = uniform(&mut rng(1), &[5, 7]);
    let xv = g.constant(x.clone());
    let yv = g.constant(x.scale(-3.0));
    let s = sam_loss(&mut g, xv, yv, 1).unwrap();
    assert!((g.value(s.value).data()[0] - 2.0).abs() < 1e-12);
}

#[test]
fn masked_only_reads_masked_patches() {
    let plan = random_masking(8, 0.5, 3).unwrap();
    let target = uniform(&mut rng(2), &[8, 3, 4]);
    let mut recon = target.clone();
    // corrupt only visible patches
    for &v in &plan.visible {
        for i in 0..12 {
            recon.data_mut()[v * 12 + i] += 1.0;
        }
    }
    let cfg = LossConfig::default();
    let store = ParamStore::<f64>::new();
    let mut g = Graph::new(&store);
    let (x, y) = (g.constant(target), g.constant(recon));
    let t = total_loss(&mut g, x, y, &cfg, &plan).unwrap();
    assert!((g.value(t.charbonnier).data()[0] - cfg.epsilon).abs() < 1e-15);
    let all = LossConfig {
        masked_only: false,
        ..cfg
    };
    let t = total_loss(&mut g, x, y, &all, &plan).unwrap();
    assert!(g.value(t.charbonnier).data()[0] > 0.4);
}

fn gradient_case(mode: SamMode, seed: u64) {
    let mut store = ParamStore::<f64>::new();
    let mut r = rng(seed);
    let target = uniform(&mut r, &[6, 4, 4]);
    // keep spectra well away from zero norm
    let recon = store.add("recon", uniform(&mut r, &[6, 4, 4]).map(|v| v + 0.3));
    let plan = random_masking(6, 0.5, seed).unwrap();
    let cfg = LossConfig {
        sam_mode: mode,
        ..LossConfig::default()
    };
    for which in 0..3 {
        let report = finite_diff_check(
            &mut store,
            |s, t| {
                let mut g = Graph::new(s);
                let x = g.constant(target.clone());
                let y = g.p(recon);
                let lift = |e: hyperspec::Error| NumericsError::Invalid(e.to_string());
                let out = match which {
                    0 => charbonnier(&mut g, x, y, 0.05).map_err(lift)?,
                    1 => sam_loss(&mut g, x, y, 1).map_err(lift)?.value,
                    _ => total_loss(&mut g, x, y, &cfg, &plan).map_err(lift)?.total,
                };
                *t = g.into_tape();
                Ok(out)
            },
            &FdOptions::default(),
        )
        .unwrap();
        assert!(report.passed(), "{mode:?} term {which}:\n{report}");
    }
}

#[test]
fn loss_gradients_match_central_differences() {
    for seed in 0..10 {
        gradient_case(SamMode::PerPixel, seed);
        gradient_case(SamMode::PerPatch, seed);
    }
}
