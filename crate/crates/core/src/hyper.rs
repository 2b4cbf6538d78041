//! Hypernetworks that emit per-band low-rank factors, and the factorized
//! patch embedding and reconstruction they drive.

use numerics::{Scalar, Tensor, Var};

use crate::config::{Conditioning, ModelConfig};
use crate::content::{condition_fuse, ContentEncoder};
use crate::fusion::Cff;
use crate::graph::Graph;
use crate::meta::MetaEncoder;
use crate::nn::{Builder, Linear, Mlp};
use crate::sensor::SensorSpec;
use crate::text::TextEmbeddingProvider;
use crate::{Error, Result};

/// Generated factors: `u: [C, rows, r]`, `v: [C, r, cols]`, `bias: [rows]`.
#[derive(Debug, Clone, Copy)]
pub struct HyperFactors {
    pub u: Var,
    pub v: Var,
    pub bias: Var,
}

/// Three fully connected stacks mapping each conditioning row to the factors
/// of a `rows × cols` per-band map of rank `r`; the bias stack reads the
/// channel mean.
#[derive(Debug, Clone)]
pub struct HyperNet {
    pub f_u: Mlp,
    pub f_v: Mlp,
    pub f_b: Mlp,
    pub cond_dim: usize,
    pub rows: usize,
    pub cols: usize,
    pub rank: usize,
}

impl HyperNet {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        b: &mut Builder<'_, T>,
        cond_dim: usize,
        hidden: usize,
        rows: usize,
        cols: usize,
        rank: usize,
        gain_u: f64,
        gain_v: f64,
    ) -> Self {
        Self {
            f_u: b.mlp("f_u", &[cond_dim, hidden, hidden, rows * rank], gain_u),
            f_v: b.mlp("f_v", &[cond_dim, hidden, hidden, rank * cols], gain_v),
            f_b: b.mlp("f_b", &[cond_dim, hidden, hidden, rows], 1.0),
            cond_dim,
            rows,
            cols,
            rank,
        }
    }

    pub fn generate<T: Scalar>(&self, g: &mut Graph<'_, T>, e: Var) -> Result<HyperFactors> {
        let s = g.shape(e).to_vec();
        if s.len() != 2 || s[1] != self.cond_dim {
            return Err(Error::Geometry(format!(
                "hypernetwork expects [C, {}] conditioning, got {s:?}",
                self.cond_dim
            )));
        }
        let c = s[0];
        let u = self.f_u.forward(g, e)?;
        let u = g.reshape(u, [c, self.rows, self.rank])?;
        let v = self.f_v.forward(g, e)?;
        let v = g.reshape(v, [c, self.rank, self.cols])?;
        let mean = g.mean(e, 0)?;
        let bias = self.f_b.forward(g, mean)?;
        Ok(HyperFactors { u, v, bias })
    }

    pub fn param_count(&self) -> usize {
        [&self.f_u, &self.f_v, &self.f_b]
            .iter()
            .flat_map(|m| m.layers.iter())
            .map(Linear::param_count)
            .sum()
    }

    /// Multiply-accumulates for generating factors for `c` bands.
    pub fn macs(&self, c: usize) -> usize {
        c * (self.f_u.macs() + self.f_v.macs()) + self.f_b.macs()
    }
}

/// `x: [C, H, W] → P: [N, C, k²]`, patches and pixels in row-major order.
pub fn unfold_patches<T: Scalar>(x: &Tensor<T>, k: usize) -> Result<Tensor<T>> {
    let (c, gh, gw) = unfold_geometry(x.shape(), k)?;
    Ok(x.reshape([c, gh, k, gw, k])?
        .permute(&[1, 3, 0, 2, 4])?
        .reshape([gh * gw, c, k * k])?)
}

/// Inverse of [`unfold_patches`] for a `gh × gw` patch grid.
pub fn refold_patches<T: Scalar>(p: &Tensor<T>, k: usize, gh: usize, gw: usize) -> Result<Tensor<T>> {
    let s = p.shape();
    if s.len() != 3 || s[0] != gh * gw || s[2] != k * k {
        return Err(Error::Geometry(format!(
            "cannot refold {s:?} onto a {gh}×{gw} grid of {k}×{k}"
        )));
    }
    let c = s[1];
    Ok(p.reshape([gh, gw, c, k, k])?
        .permute(&[2, 0, 3, 1, 4])?
        .reshape([c, gh * k, gw * k])?)
}

fn unfold_geometry(s: &[usize], k: usize) -> Result<(usize, usize, usize)> {
    if s.len() != 3 || k == 0 || !s[1].is_multiple_of(k) || !s[2].is_multiple_of(k) {
        return Err(Error::Geometry(format!("cannot unfold {s:?} into {k}×{k} patches")));
    }
    Ok((s[0], s[1] / k, s[2] / k))
}

/// Differentiable [`unfold_patches`].
pub fn unfold_var<T: Scalar>(g: &mut Graph<'_, T>, x: Var, k: usize) -> Result<Var> {
    let (c, gh, gw) = unfold_geometry(g.shape(x), k)?;
    let r = g.reshape(x, [c, gh, k, gw, k])?;
    let p = g.permute(r, &[1, 3, 0, 2, 4])?;
    Ok(g.reshape(p, [gh * gw, c, k * k])?)
}

/// `Z = P·Vᵀ`, `O = Z·Uᵀ` per band, summed over bands, plus bias: `[N, D]`.
pub fn factorized_embed<T: Scalar>(g: &mut Graph<'_, T>, p: Var, f: &HyperFactors) -> Result<Var> {
    let (ps, vs) = (g.shape(p).to_vec(), g.shape(f.v).to_vec());
    if ps.len() != 3 || ps[1] != vs[0] || ps[2] != vs[2] {
        return Err(Error::Geometry(format!("patches {ps:?} do not match factors V {vs:?}")));
    }
    let z = g.contract(p, f.v, "ncp,crp->ncr")?;
    let o = g.contract(z, f.u, "ncr,cdr->nd")?;
    Ok(g.add(o, f.bias)?)
}

/// Replicates each latent `x: [N, D']` across bands and applies
/// `x·V′ᵀ·U′ᵀ + bias′` per band: `[N, C, k²]`.
pub fn hyperlinear<T: Scalar>(g: &mut Graph<'_, T>, x: Var, f: &HyperFactors) -> Result<Var> {
    let (xs, vs) = (g.shape(x).to_vec(), g.shape(f.v).to_vec());
    if xs.len() != 2 || xs[1] != vs[2] {
        return Err(Error::Geometry(format!(
            "latents {xs:?} do not match factors V′ {vs:?}"
        )));
    }
    let z = g.contract(x, f.v, "nj,crj->ncr")?;
    let o = g.contract(z, f.u, "ncr,cpr->ncp")?;
    Ok(g.add(o, f.bias)?)
}

/// Conditioning values for one sample.
#[derive(Debug, Clone, Copy)]
pub struct Condition {
    pub meta: Var,
    pub content: Var,
    pub e: Var,
}

/// Metadata and content encoders, their fusion, and the embedding
/// hypernetwork.
#[derive(Debug, Clone)]
pub struct HyperEmbedding {
    pub meta: MetaEncoder,
    pub content: ContentEncoder,
    pub fuse: Cff,
    pub hyper: HyperNet,
    pub conditioning: Conditioning,
    pub patch: usize,
    pub dim: usize,
}

impl HyperEmbedding {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, cfg: &ModelConfig) -> Self {
        let h = &cfg.hyper;
        let bb = &cfg.backbone;
        let d = h.meta_dim;
        let k2 = bb.patch * bb.patch;
        Self {
            meta: b.scoped("meta", |b| MetaEncoder::new(b, h)),
            content: b.scoped("content", |b| ContentEncoder::new(b, bb.grid(), d)),
            fuse: Cff::new(b, "fuse", d, d, d),
            hyper: b.scoped("hyper", |b| {
                HyperNet::new(
                    b,
                    d,
                    h.hyper_hidden,
                    bb.embed_dim,
                    k2,
                    h.rank,
                    1.0 / ((h.rank * 100) as f64).sqrt(),
                    1.0 / bb.patch as f64,
                )
            }),
            conditioning: h.conditioning,
            patch: bb.patch,
            dim: bb.embed_dim,
        }
    }

    /// `E` for cube `x: [C, H, W]`; a precomputed `E_meta` may be supplied.
    pub fn condition<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        x: Var,
        spec: &SensorSpec,
        name: &str,
        provider: &TextEmbeddingProvider,
        meta: Option<Var>,
    ) -> Result<Condition> {
        let c = g.shape(x).first().copied().unwrap_or(0);
        if c != spec.band_count() {
            return Err(Error::Geometry(format!(
                "cube has {c} bands but {} describes {}",
                spec.key(),
                spec.band_count()
            )));
        }
        let meta = match meta {
            Some(m) => m,
            None => self.meta.encode(g, spec, name, provider)?,
        };
        let content = match self.conditioning {
            Conditioning::MetaOnly => g.constant(Tensor::zeros([c, self.meta.d])),
            _ => self.content.encode(g, x, self.patch)?,
        };
        let e = condition_fuse(g, &self.fuse, self.conditioning, meta, content)?;
        Ok(Condition { meta, content, e })
    }

    /// Tokens `[N, D]` for cube `x` under conditioning `e`.
    pub fn embed<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var, e: Var) -> Result<Var> {
        let p = unfold_var(g, x, self.patch)?;
        let f = self.hyper.generate(g, e)?;
        factorized_embed(g, p, &f)
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        x: Var,
        spec: &SensorSpec,
        name: &str,
        provider: &TextEmbeddingProvider,
    ) -> Result<(Var, Condition)> {
        let cond = self.condition(g, x, spec, name, provider, None)?;
        Ok((self.embed(g, x, cond.e)?, cond))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::zero_params;
    use numerics::ParamStore;

    #[test]
    fn unfold_order_and_inverse() {
        let x = Tensor::<f64>::from_fn([1, 2, 2], |i| i as f64);
        let p = unfold_patches(&x, 2).unwrap();
        assert_eq!(p.shape(), &[1, 1, 4]);
        assert_eq!(p.data(), &[0.0, 1.0, 2.0, 3.0]);

        let x = Tensor::<f64>::from_fn([3, 8, 12], |i| i as f64 * 0.5);
        let p = unfold_patches(&x, 4).unwrap();
        assert_eq!(p.shape(), &[6, 3, 16]);
        // patch 1 is the second patch of the first patch row
        assert_eq!(p.at(&[1, 0, 0]), x.at(&[0, 0, 4]));
        assert_eq!(p.at(&[4, 2, 5]), x.at(&[2, 5, 5]));
        assert_eq!(refold_patches(&p, 4, 2, 3).unwrap(), x);
        assert!(unfold_patches(&x, 5).is_err());
    }

    #[test]
    fn zero_conditioning_with_zero_nets_gives_zero_factors() {
        let mut store = ParamStore::<f64>::new();
        let net = HyperNet::new(&mut Builder::new(&mut store, 0), 6, 8, 5, 4, 2, 1.0, 1.0);
        zero_params(&mut store, "");
        let mut g = Graph::new(&store);
        let e = g.constant(Tensor::zeros([3, 6]));
        let f = net.generate(&mut g, e).unwrap();
        assert_eq!(g.shape(f.u), &[3, 5, 2]);
        assert_eq!(g.shape(f.v), &[3, 2, 4]);
        assert_eq!(g.shape(f.bias), &[5]);
        for v in [f.u, f.v, f.bias] {
            assert_eq!(g.value(v).max_abs(), 0.0);
        }
    }

    #[test]
    fn zero_patches_give_bias_tokens() {
        let mut store = ParamStore::<f64>::new();
        let net = HyperNet::new(&mut Builder::new(&mut store, 7), 6, 8, 5, 4, 2, 1.0, 1.0);
        let mut g = Graph::new(&store);
        let e = g.constant(Tensor::from_fn([3, 6], |i| (i as f64).sin()));
        let f = net.generate(&mut g, e).unwrap();
        let p = g.constant(Tensor::zeros([7, 3, 4]));
        let out = factorized_embed(&mut g, p, &f).unwrap();
        let bias = g.value(f.bias).clone();
        let out = g.value(out);
        for n in 0..7 {
            assert_eq!(out.narrow(0, n, 1).unwrap().data(), bias.data());
        }
    }

    #[test]
    fn zero_u_gives_bias_reconstruction() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let u = g.constant(Tensor::zeros([3, 4, 2]));
        let v = g.constant(Tensor::from_fn([3, 2, 5], |i| i as f64));
        let bias = g.constant(Tensor::from_fn([4], |i| i as f64 - 1.5));
        let x = g.constant(Tensor::from_fn([6, 5], |i| (i as f64).cos()));
        let out = hyperlinear(&mut g, x, &HyperFactors { u, v, bias }).unwrap();
        assert_eq!(g.shape(out), &[6, 3, 4]);
        let b = g.value(bias).data().to_vec();
        for (i, &o) in g.value(out).data().iter().enumerate() {
            assert_eq!(o, b[i % 4]);
        }
    }
}
