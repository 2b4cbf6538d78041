//! Cross-modal feature fusion of two per-band feature matrices.

use numerics::{Scalar, Var};

use crate::graph::Graph;
use crate::nn::{Builder, Linear, Mlp};
use crate::{Error, Result};

/// Projects `a: [C, da]` and `b: [C, db]` to width `d`, concatenates,
/// reduces `2d → d` and refines with a residual MLP.
#[derive(Debug, Clone)]
pub struct Cff {
    pub proj_a: Linear,
    pub proj_b: Linear,
    pub reduce: Linear,
    pub mlp: Mlp,
}

impl Cff {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, leaf: &str, da: usize, db: usize, d: usize) -> Self {
        b.scoped(leaf, |b| Self {
            proj_a: b.linear("proj_a", da, d),
            proj_b: b.linear("proj_b", db, d),
            reduce: b.linear("reduce", 2 * d, d),
            mlp: b.mlp("mlp", &[d, d, d], 1.0),
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (g.shape(a).to_vec(), g.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(Error::Geometry(format!(
                "cff inputs {sa:?} and {sb:?} must be [C, *] with equal C"
            )));
        }
        if sa[1] != self.proj_a.fan_in || sb[1] != self.proj_b.fan_in {
            return Err(Error::Geometry(format!(
                "cff expects widths {} and {}, got {} and {}",
                self.proj_a.fan_in, self.proj_b.fan_in, sa[1], sb[1]
            )));
        }
        let pa = self.proj_a.forward(g, a)?;
        let pb = self.proj_b.forward(g, b)?;
        let cat = g.concat(&[pa, pb], 1)?;
        let h = self.reduce.forward(g, cat)?;
        let m = self.mlp.forward(g, h)?;
        Ok(g.add(h, m)?)
    }

    pub fn param_count(&self) -> usize {
        self.proj_a.param_count()
            + self.proj_b.param_count()
            + self.reduce.param_count()
            + self.mlp.layers.iter().map(Linear::param_count).sum::<usize>()
    }

    pub fn macs(&self) -> usize {
        self.proj_a.macs() + self.proj_b.macs() + self.reduce.macs() + self.mlp.macs()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use numerics::{ParamStore, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape.to_vec(), |_| rng.sample::<f64, _>(rand_distr::StandardNormal))
    }

    #[test]
    fn zero_inputs_give_zero_output() {
        let mut store = ParamStore::<f64>::new();
        let cff = Cff::new(&mut Builder::new(&mut store, 1), "cff", 8, 8, 8);
        let mut g = Graph::new(&store);
        let z = g.constant(Tensor::zeros([5, 8]));
        let out = cff.forward(&mut g, z, z).unwrap();
        assert_eq!(g.value(out).max_abs(), 0.0);
    }

    #[test]
    fn bounded_and_asymmetric() {
        let mut store = ParamStore::<f64>::new();
        let cff = Cff::new(&mut Builder::new(&mut store, 2), "cff", 16, 16, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (ta, tb) = (normal(&mut rng, &[6, 16]), normal(&mut rng, &[6, 16]));
        let mut g = Graph::new(&store);
        let (a, b) = (g.constant(ta.clone()), g.constant(tb.clone()));
        let ab = cff.forward(&mut g, a, b).unwrap();
        let ba = cff.forward(&mut g, b, a).unwrap();
        let (vab, vba) = (g.value(ab).clone(), g.value(ba).clone());
        assert!(vab.is_finite());
        let input_norm = (ta.norm().powi(2) + tb.norm().powi(2)).sqrt();
        assert!(vab.norm() < 10.0 * input_norm);
        assert!(vab.sub(&vba).unwrap().max_abs() > 1e-6);
    }

    #[test]
    fn mismatched_rows_rejected() {
        let mut store = ParamStore::<f64>::new();
        let cff = Cff::new(&mut Builder::new(&mut store, 1), "cff", 4, 4, 4);
        let mut g = Graph::new(&store);
        let a = g.constant(Tensor::zeros([3, 4]));
        let b = g.constant(Tensor::zeros([2, 4]));
        assert!(cff.forward(&mut g, a, b).is_err());
    }
}
