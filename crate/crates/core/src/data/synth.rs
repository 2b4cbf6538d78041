//! Synthetic scenes: smooth endmember spectra mixed by random abundance
//! fields, observed through a sensor's Gaussian band responses.

use numerics::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::sensor::{Level, SensorSpec};

/// A continuous material spectrum: offset plus Gaussian bumps (µm).
#[derive(Debug, Clone, PartialEq)]
pub struct Endmember {
    pub offset: f64,
    pub bumps: Vec<(f64, f64, f64)>,
}

impl Endmember {
    /// Bumps are `(center, width, amplitude)`.
    pub fn value(&self, lambda: f64) -> f64 {
        self.offset
            + self
                .bumps
                .iter()
                .map(|&(c, w, a)| a * (-(lambda - c).powi(2) / (2.0 * w * w)).exp())
                .sum::<f64>()
    }

    pub fn constant(v: f64) -> Self {
        Self {
            offset: v,
            bumps: Vec::new(),
        }
    }

    pub fn random(rng: &mut ChaCha8Rng) -> Self {
        let n = rng.random_range(2..=4);
        Self {
            offset: rng.random_range(0.05..0.25),
            bumps: (0..n)
                .map(|_| {
                    (
                        rng.random_range(0.4..2.4),
                        rng.random_range(0.06..0.3),
                        rng.random_range(-0.04..0.45),
                    )
                })
                .collect(),
        }
    }
}

/// Library of endmembers shared by all scenes of a dataset.
pub fn endmember_library(count: usize, seed: u64) -> Vec<Endmember> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| Endmember::random(&mut rng)).collect()
}

/// Smooth random field: a sum of low-frequency plane waves.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    pub bias: f64,
    /// `(kx, ky, phase, amplitude)` in cycles per scene.
    pub waves: Vec<(f64, f64, f64, f64)>,
}

impl Field {
    pub fn flat(bias: f64) -> Self {
        Self {
            bias,
            waves: Vec::new(),
        }
    }

    pub fn at(&self, u: f64, v: f64) -> f64 {
        self.bias
            + self
                .waves
                .iter()
                .map(|&(kx, ky, p, a)| a * (std::f64::consts::TAU * (kx * u + ky * v) + p).cos())
                .sum::<f64>()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneRecipe {
    pub endmembers: Vec<Endmember>,
    /// One logit field per endmember; abundances are their softmax.
    pub fields: Vec<Field>,
    pub noise: f64,
    /// Scale of the L1 illumination curve.
    pub illumination: f64,
    /// Fraction of image columns, from the right edge, without data.
    pub missing_columns: f64,
}

impl SceneRecipe {
    /// Scene dominated by endmember `dominant` of `library`.
    pub fn random(library: &[Endmember], dominant: usize, noise: f64, rng: &mut ChaCha8Rng) -> Self {
        let fields = (0..library.len())
            .map(|m| {
                let bias = if m == dominant {
                    2.0
                } else {
                    rng.random_range(-0.5..0.5)
                };
                let waves = (0..3)
                    .map(|_| {
                        (
                            rng.random_range(-2.0..2.0),
                            rng.random_range(-2.0..2.0),
                            rng.random_range(0.0..std::f64::consts::TAU),
                            rng.random_range(0.2..1.0),
                        )
                    })
                    .collect();
                Field { bias, waves }
            })
            .collect();
        let missing_columns = if rng.random_bool(0.15) {
            rng.random_range(0.05..0.4)
        } else {
            0.0
        };
        Self {
            endmembers: library.to_vec(),
            fields,
            noise,
            illumination: rng.random_range(8.0..12.0),
            missing_columns,
        }
    }

    /// Per-pixel abundances at normalized coordinates; nonnegative and
    /// summing to one.
    pub fn abundances(&self, u: f64, v: f64) -> Vec<f64> {
        let logits: Vec<f64> = self.fields.iter().map(|f| f.at(u, v)).collect();
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|x| x / s).collect()
    }
}

/// Solar-like illumination: a 5800 K blackbody normalized to its peak
/// near 0.5 µm. Positive for every wavelength.
pub fn illumination_curve(lambda: f64) -> f64 {
    let c2 = 14387.77 / 5800.0;
    let f = |l: f64| l.powi(-5) / ((c2 / l).exp() - 1.0);
    f(lambda) / f(0.4996)
}

/// Band value of a continuous spectrum under a Gaussian response of
/// `σ = fwhm / 2.355`, by normalized quadrature over ±4σ.
pub fn band_response(spectrum: impl Fn(f64) -> f64, center: f64, fwhm: f64) -> f64 {
    const STEPS: usize = 33;
    let sigma = fwhm / 2.355;
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..STEPS {
        let z = -4.0 + 8.0 * i as f64 / (STEPS - 1) as f64;
        let w = (-0.5 * z * z).exp();
        num += w * spectrum(center + z * sigma);
        den += w;
    }
    num / den
}

/// A rendered scene.
#[derive(Debug, Clone, PartialEq)]
pub struct HsiCube {
    pub sensor: SensorSpec,
    /// `[C, H, W]`
    pub data: Tensor<f32>,
    pub valid_fraction: f64,
}

impl HsiCube {
    pub fn bands(&self) -> usize {
        self.data.shape()[0]
    }
}

/// Renders `recipe` on the band grid of `spec`. Columns without data hold
/// all-zero spectra. The label is the endmember with the largest mean
/// abundance over valid pixels.
pub fn render_cube(recipe: &SceneRecipe, spec: &SensorSpec, h: usize, w: usize, seed: u64) -> (HsiCube, usize) {
    let c = spec.band_count();
    let m = recipe.endmembers.len();
    // per-band gain: illumination for radiance, one for reflectance
    let gain: Vec<f64> = spec
        .wavelengths_um
        .iter()
        .zip(&spec.fwhm_um)
        .map(|(&l, &f)| match spec.level {
            Level::L1Radiance => recipe.illumination * band_response(illumination_curve, l, f),
            Level::L2Reflectance => 1.0,
        })
        .collect();
    // endmember band values, [m][c]
    let resampled: Vec<Vec<f64>> = recipe
        .endmembers
        .iter()
        .map(|e| {
            spec.wavelengths_um
                .iter()
                .zip(&spec.fwhm_um)
                .zip(&gain)
                .map(|((&l, &f), &g)| g * band_response(|x| e.value(x), l, f))
                .collect()
        })
        .collect();
    let valid_cols = w - ((recipe.missing_columns * w as f64).round() as usize).min(w);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, recipe.noise.max(0.0)).expect("finite noise level");
    let mut data = vec![0f32; c * h * w];
    let mut mean_ab = vec![0.0; m];
    for y in 0..h {
        for x in 0..valid_cols {
            let ab = recipe.abundances(x as f64 / w as f64, y as f64 / h as f64);
            for (acc, a) in mean_ab.iter_mut().zip(&ab) {
                *acc += a;
            }
            for b in 0..c {
                let clean: f64 = (0..m).map(|k| ab[k] * resampled[k][b]).sum();
                let n = if recipe.noise > 0.0 {
                    noise.sample(&mut rng) * gain[b]
                } else {
                    0.0
                };
                data[(b * h + y) * w + x] = (clean + n) as f32;
            }
        }
    }
    let label = mean_ab
        .iter()
        .enumerate()
        .fold(
            (0, f64::NEG_INFINITY),
            |best, (i, &v)| if v > best.1 { (i, v) } else { best },
        )
        .0;
    let cube = HsiCube {
        sensor: spec.clone(),
        data: Tensor::new([c, h, w], data).expect("cube extents"),
        valid_fraction: valid_cols as f64 / w as f64,
    };
    (cube, label)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sensor::builtin;

    fn flat_recipe(e: Endmember) -> SceneRecipe {
        SceneRecipe {
            endmembers: vec![e],
            fields: vec![Field::flat(0.0)],
            noise: 0.0,
            illumination: 10.0,
            missing_columns: 0.0,
        }
    }

    #[test]
    fn flat_single_endmember_scene_is_uniform() {
        let spec = builtin("AVIRIS-Classic", Level::L1Radiance).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (cube, label) = render_cube(&flat_recipe(Endmember::random(&mut rng)), &spec, 4, 4, 0);
        assert_eq!(label, 0);
        let d = cube.data.data();
        for b in 0..spec.band_count() {
            let band = &d[b * 16..(b + 1) * 16];
            assert!(band.iter().all(|&v| v == band[0]));
        }
    }

    #[test]
    fn constant_spectrum_resamples_to_constant() {
        let spec = builtin("AVIRIS-NG", Level::L2Reflectance).unwrap();
        let (cube, _) = render_cube(&flat_recipe(Endmember::constant(0.3)), &spec, 2, 2, 0);
        assert!(cube.data.data().iter().all(|&v| (v - 0.3).abs() < 1e-6));
    }

    #[test]
    fn abundances_are_a_partition_of_unity() {
        let lib = endmember_library(5, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let r = SceneRecipe::random(&lib, 2, 0.01, &mut rng);
        for (u, v) in [(0.0, 0.0), (0.3, 0.9), (0.77, 0.12)] {
            let a = r.abundances(u, v);
            assert!(a.iter().all(|&x| x >= 0.0));
            assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!((0..50).all(|i| illumination_curve(0.35 + 0.045 * i as f64) > 0.0));
    }

    #[test]
    fn label_is_dominant_endmember() {
        let lib = endmember_library(4, 9);
        let spec = builtin("AVIRIS-3", Level::L2Reflectance).unwrap();
        for class in 0..4 {
            let mut rng = ChaCha8Rng::seed_from_u64(class as u64);
            let r = SceneRecipe::random(&lib, class, 0.0, &mut rng);
            assert_eq!(render_cube(&r, &spec, 8, 8, 1).1, class);
        }
    }
}
