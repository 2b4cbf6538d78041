//! Charbonnier plus spectral-angle reconstruction objective.

use numerics::{Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::graph::Graph;
use crate::mae::MaskPlan;
use crate::{Error, Result};

/// Stabilizer inside the spectral norms.
pub const SAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamMode {
    /// One spectrum per pixel of each patch.
    PerPixel,
    /// One spectrum per patch, averaged over its pixels.
    PerPatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub epsilon: f64,
    pub masked_only: bool,
    pub sam_mode: SamMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            epsilon: 1e-3,
            masked_only: true,
            sam_mode: SamMode::PerPixel,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) || !(self.alpha >= 0.0) || !(self.beta >= 0.0) {
            return Err(Error::Config("loss needs epsilon > 0 and non-negative weights".into()));
        }
        Ok(())
    }
}

fn same_shape<T: Scalar>(g: &Graph<'_, T>, x: Var, y: Var) -> Result<()> {
    if g.shape(x) != g.shape(y) {
        return Err(Error::Geometry(format!(
            "loss inputs {:?} and {:?} differ",
            g.shape(x),
            g.shape(y)
        )));
    }
    Ok(())
}

/// Mean of `sqrt((x − x̂)² + ε²)`.
pub fn charbonnier<T: Scalar>(g: &mut Graph<'_, T>, x: Var, xhat: Var, epsilon: f64) -> Result<Var> {
    same_shape(g, x, xhat)?;
    let d = g.sub(x, xhat)?;
    let d2 = g.square(d)?;
    let s = g.add_scalar(d2, T::lit(epsilon * epsilon));
    let r = g.sqrt(s)?;
    Ok(g.mean_all(r)?)
}

/// Spectral angle term with its zero-norm diagnostic.
#[derive(Debug, Clone, Copy)]
pub struct SamValue {
    pub value: Var,
    /// Spectra whose norm is zero in `x` or `x̂`.
    pub zero_norm: usize,
}

/// Mean of `1 − cos` between spectra taken along `axis`.
pub fn sam_loss<T: Scalar>(g: &mut Graph<'_, T>, x: Var, xhat: Var, axis: usize) -> Result<SamValue> {
    same_shape(g, x, xhat)?;
    let zero_norm = count_zero_norm(g.value(x), axis)? + count_zero_norm(g.value(xhat), axis)?;
    let xy = g.mul(x, xhat)?;
    let dot = g.sum(xy, axis)?;
    let mut norms = Vec::with_capacity(2);
    for v in [x, xhat] {
        let sq = g.square(v)?;
        let s = g.sum(sq, axis)?;
        let s = g.add_scalar(s, T::lit(SAM_EPS * SAM_EPS));
        norms.push(g.sqrt(s)?);
    }
    let den = g.mul(norms[0], norms[1])?;
    let cos = g.div(dot, den)?;
    let cos = g.clamp(cos, -T::one(), T::one());
    let one_minus = g.scale(cos, -T::one());
    let one_minus = g.add_scalar(one_minus, T::one());
    Ok(SamValue {
        value: g.mean_all(one_minus)?,
        zero_norm,
    })
}

fn count_zero_norm<T: Scalar>(t: &Tensor<T>, axis: usize) -> Result<usize> {
    let sq = t.map(|v| v * v).sum_axis(axis)?;
    Ok(sq.data().iter().filter(|&&v| v == T::zero()).count())
}

#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Var,
    pub charbonnier: Var,
    pub sam: Var,
    pub zero_norm: usize,
}

/// `α·charbonnier + β·sam` over `[N, C, k²]` patches; with `masked_only`
/// the support is the masked tokens of `plan` (all tokens if none are
/// masked).
pub fn total_loss<T: Scalar>(
    g: &mut Graph<'_, T>,
    target: Var,
    recon: Var,
    cfg: &LossConfig,
    plan: &MaskPlan,
) -> Result<LossTerms> {
    same_shape(g, target, recon)?;
    if g.shape(target).len() != 3 {
        return Err(Error::Geometry("loss expects [N, C, k²] patches".into()));
    }
    let (x, xhat) = if cfg.masked_only && !plan.masked.is_empty() {
        (
            g.index_select(target, 0, &plan.masked)?,
            g.index_select(recon, 0, &plan.masked)?,
        )
    } else {
        (target, recon)
    };
    let ch = charbonnier(g, x, xhat, cfg.epsilon)?;
    let sam = match cfg.sam_mode {
        SamMode::PerPixel => sam_loss(g, x, xhat, 1)?,
        SamMode::PerPatch => {
            let mx = g.mean(x, 2)?;
            let mh = g.mean(xhat, 2)?;
            sam_loss(g, mx, mh, 1)?
        }
    };
    let a = g.scale(ch, T::lit(cfg.alpha));
    let b = g.scale(sam.value, T::lit(cfg.beta));
    Ok(LossTerms {
        total: g.add(a, b)?,
        charbonnier: ch,
        sam: sam.value,
        zero_norm: sam.zero_norm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use numerics::ParamStore;

    fn eval(f: impl FnOnce(&mut Graph<'_, f64>) -> Var) -> f64 {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let v = f(&mut g);
        g.value(v).item().unwrap()
    }

    #[test]
    fn charbonnier_values() {
        let v = eval(|g| {
            let x = g.constant(Tensor::from_fn([4], |i| i as f64));
            charbonnier(g, x, x, 1e-3).unwrap()
        });
        assert_eq!(v, 1e-3);
        let v = eval(|g| {
            let x = g.constant(Tensor::from_f64([1], &[3.0]).unwrap());
            let y = g.constant(Tensor::zeros([1]));
            charbonnier(g, x, y, 1e-3).unwrap()
        });
        assert!((v - (9.0f64 + 1e-6).sqrt()).abs() < 1e-15);
        assert!((v - 3.000_000_17).abs() < 1e-8);
    }

    #[test]
    fn sam_reference_angles() {
        let sam = |a: [f64; 3], b: [f64; 3]| {
            eval(|g| {
                let x = g.constant(Tensor::from_f64([1, 3], &a).unwrap());
                let y = g.constant(Tensor::from_f64([1, 3], &b).unwrap());
                sam_loss(g, x, y, 1).unwrap().value
            })
        };
        assert!(sam([1.0, 2.0, 3.0], [2.0, 4.0, 6.0]).abs() < 1e-12);
        assert!((sam([1.0, 0.0, 0.0], [0.0, 3.0, 0.0]) - 1.0).abs() < 1e-12);
        assert!((sam([1.0, -2.0, 0.5], [-1.0, 2.0, -0.5]) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn zero_norm_is_flagged_and_finite() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let x = g.constant(Tensor::zeros([2, 3]));
        let y = g.constant(Tensor::ones([2, 3]));
        let s = sam_loss(&mut g, x, y, 1).unwrap();
        assert_eq!(s.zero_norm, 2);
        assert!((g.value(s.value).item().unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn perfect_reconstruction_hits_floor() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let x = g.constant(Tensor::from_fn([4, 3, 4], |i| (i as f64).sin() + 1.5));
        let plan = crate::mae::random_masking(4, 0.5, 0).unwrap();
        let t = total_loss(&mut g, x, x, &LossConfig::default(), &plan).unwrap();
        let total = g.value(t.total).item().unwrap();
        assert!((total - 1e-3).abs() < 1e-12);
        let cfg = LossConfig {
            beta: 0.0,
            ..Default::default()
        };
        let y = g.constant(Tensor::zeros([4, 3, 4]));
        let t = total_loss(&mut g, x, y, &cfg, &plan).unwrap();
        assert_eq!(g.value(t.total).item(), g.value(t.charbonnier).item());
    }
}
