//! Masked autoencoder around the hypernetwork embedding and reconstruction
//! head.

use numerics::{ParamId, ParamStore, Scalar, Tensor, Var};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::fusion::Cff;
use crate::graph::Graph;
use crate::hyper::{hyperlinear, unfold_patches, Condition, HyperEmbedding, HyperNet};
use crate::nn::{Block, Builder, LayerNorm, Linear};
use crate::sensor::SensorSpec;
use crate::text::TextEmbeddingProvider;
use crate::{Error, Result};

/// Partition of `0..n` into visible and masked token indices, both sorted.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPlan {
    pub n: usize,
    pub ratio: f64,
    pub seed: u64,
    pub visible: Vec<usize>,
    pub masked: Vec<usize>,
}

impl MaskPlan {
    /// Everything visible.
    pub fn none(n: usize) -> Self {
        Self {
            n,
            ratio: 0.0,
            seed: 0,
            visible: (0..n).collect(),
            masked: Vec::new(),
        }
    }

    /// For each position, its row in `[visible…, masked…]`.
    pub fn restore_order(&self) -> Vec<usize> {
        let mut order = vec![0; self.n];
        for (i, &p) in self.visible.iter().chain(&self.masked).enumerate() {
            order[p] = i;
        }
        order
    }
}

/// Uniformly random subset of `round(ratio·n)` masked tokens.
pub fn random_masking(n: usize, ratio: f64, seed: u64) -> Result<MaskPlan> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::Config(format!("mask ratio {ratio} outside [0, 1)")));
    }
    let count = (ratio * n as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut is_masked = vec![false; n];
    for i in sample(&mut rng, n, count.min(n)) {
        is_masked[i] = true;
    }
    let (masked, visible): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| is_masked[i]);
    Ok(MaskPlan {
        n,
        ratio,
        seed,
        visible,
        masked,
    })
}

/// 2-d sine-cosine positional table `[gh·gw, dim]`: the first half encodes
/// the column, the second the row, each as `[sin | cos]` over `dim/4`
/// frequencies.
pub fn sincos_pos_embed_2d<T: Scalar>(dim: usize, gh: usize, gw: usize) -> Result<Tensor<T>> {
    if dim == 0 || !dim.is_multiple_of(4) {
        return Err(Error::Config(format!("positional width {dim} must be divisible by 4")));
    }
    let q = dim / 4;
    let omega: Vec<f64> = (0..q).map(|i| 1.0 / 10000f64.powf(i as f64 / q as f64)).collect();
    let mut data = Vec::with_capacity(gh * gw * dim);
    for r in 0..gh {
        for c in 0..gw {
            for pos in [c as f64, r as f64] {
                data.extend(omega.iter().map(|w| T::lit((pos * w).sin())));
                data.extend(omega.iter().map(|w| T::lit((pos * w).cos())));
            }
        }
    }
    Ok(Tensor::new([gh * gw, dim], data)?)
}

/// Values produced by one masked-reconstruction forward pass.
#[derive(Debug, Clone)]
pub struct MimOutput {
    /// `[N, C, k²]`
    pub reconstruction: Var,
    /// Unfolded input, `[N, C, k²]`, recorded as a constant.
    pub target: Var,
    pub condition: Condition,
    pub tokens: Var,
    pub latents: Var,
    pub decoded: Var,
}

#[derive(Debug, Clone)]
pub struct HyperMae {
    pub cfg: ModelConfig,
    pub embed: HyperEmbedding,
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
    pub dec_embed: Linear,
    pub mask_token: ParamId,
    pub dec_blocks: Vec<Block>,
    pub dec_norm: LayerNorm,
    pub dec_content: Block,
    pub dec_fuse: Cff,
    pub dec_hyper: HyperNet,
}

impl HyperMae {
    /// Registers all parameters in `store`, initialized from `seed`.
    pub fn build<T: Scalar>(cfg: &ModelConfig, store: &mut ParamStore<T>, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut b = Builder::new(store, seed);
        let h = &cfg.hyper;
        let bb = &cfg.backbone;
        let (dim, dd) = (bb.embed_dim, bb.decoder_dim);
        let embed = b.scoped("embed", |b| HyperEmbedding::new(b, cfg));
        let blocks = (0..bb.depth)
            .map(|i| b.block(&format!("encoder.blocks.{i}"), dim, bb.heads, bb.mlp_ratio * dim, true))
            .collect();
        let norm = b.layer_norm("encoder.norm", dim);
        let dec_embed = b.linear("decoder.embed", dim, dd);
        let mask_token = b.uniform("decoder.mask_token", &[1, dd], 0.02);
        let dec_blocks = (0..bb.decoder_depth)
            .map(|i| {
                b.block(
                    &format!("decoder.blocks.{i}"),
                    dd,
                    bb.decoder_heads,
                    bb.mlp_ratio * dd,
                    true,
                )
            })
            .collect();
        let dec_norm = b.layer_norm("decoder.norm", dd);
        let dec_content = b.block("recon.content", dd, bb.decoder_heads, bb.mlp_ratio * dd, true);
        let dec_fuse = Cff::new(&mut b, "recon.fuse", h.meta_dim, dd, h.meta_dim);
        let dec_hyper = b.scoped("recon.hyper", |b| {
            HyperNet::new(
                b,
                h.meta_dim,
                h.hyper_hidden,
                bb.patch * bb.patch,
                dd,
                h.rank,
                1.0 / (h.rank as f64).sqrt(),
                1.0 / (dd as f64).sqrt(),
            )
        });
        Ok(Self {
            cfg: cfg.clone(),
            embed,
            blocks,
            norm,
            dec_embed,
            mask_token,
            dec_blocks,
            dec_norm,
            dec_content,
            dec_fuse,
            dec_hyper,
        })
    }

    pub fn patch(&self) -> usize {
        self.cfg.backbone.patch
    }

    fn grid_of(&self, shape: &[usize]) -> Result<(usize, usize)> {
        let k = self.patch();
        if shape.len() != 3 || !shape[1].is_multiple_of(k) || !shape[2].is_multiple_of(k) {
            return Err(Error::Geometry(format!(
                "cube {shape:?} is not a multiple of patch {k}"
            )));
        }
        Ok((shape[1] / k, shape[2] / k))
    }

    /// Adds positions, keeps the visible tokens and runs the encoder:
    /// `[|visible|, D]` plus per-block attention.
    pub fn encode<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        tokens: Var,
        plan: &MaskPlan,
        grid: (usize, usize),
    ) -> Result<(Var, Vec<Var>)> {
        let dim = self.cfg.backbone.embed_dim;
        let pos = g.constant(sincos_pos_embed_2d(dim, grid.0, grid.1)?);
        let x = g.add(tokens, pos)?;
        let mut x = g.index_select(x, 0, &plan.visible)?;
        let mut attention = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (y, a) = b.forward_traced(g, x)?;
            x = y;
            attention.push(a);
        }
        Ok((self.norm.forward(g, x)?, attention))
    }

    /// Projects latents to decoder width and places the mask token at every
    /// masked position, in original token order: `[N, D_dec]`.
    pub fn decoder_input<T: Scalar>(&self, g: &mut Graph<'_, T>, latents: Var, plan: &MaskPlan) -> Result<Var> {
        let x = self.dec_embed.forward(g, latents)?;
        if plan.masked.is_empty() {
            return Ok(x);
        }
        let dd = self.cfg.backbone.decoder_dim;
        let token = g.p(self.mask_token);
        let fill = g.broadcast_to(token, &[plan.masked.len(), dd])?;
        let full = g.concat(&[x, fill], 0)?;
        Ok(g.index_select(full, 0, &plan.restore_order())?)
    }

    /// Full-length decoder output `X′: [N, D_dec]`.
    pub fn decode<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        latents: Var,
        plan: &MaskPlan,
        grid: (usize, usize),
    ) -> Result<Var> {
        let x = self.decoder_input(g, latents, plan)?;
        let pos = g.constant(sincos_pos_embed_2d(self.cfg.backbone.decoder_dim, grid.0, grid.1)?);
        let mut x = g.add(x, pos)?;
        for b in &self.dec_blocks {
            x = b.forward(g, x)?;
        }
        self.dec_norm.forward(g, x)
    }

    /// Global average of `X′`, refined by one transformer block and
    /// broadcast to `C` rows.
    pub fn decoder_content<T: Scalar>(&self, g: &mut Graph<'_, T>, decoded: Var, c: usize) -> Result<Var> {
        let dd = g.shape(decoded)[1];
        let pooled = g.mean(decoded, 0)?;
        let pooled = g.reshape(pooled, [1, dd])?;
        let refined = self.dec_content.forward(g, pooled)?;
        Ok(g.broadcast_to(refined, &[c, dd])?)
    }

    /// Per-band reconstruction `[N, C, k²]` from `X′` and `E_meta`.
    pub fn reconstruct<T: Scalar>(&self, g: &mut Graph<'_, T>, decoded: Var, meta: Var) -> Result<Var> {
        let c = g.shape(meta)[0];
        let content = self.decoder_content(g, decoded, c)?;
        let e = self.dec_fuse.forward(g, meta, content)?;
        let f = self.dec_hyper.generate(g, e)?;
        hyperlinear(g, decoded, &f)
    }

    /// Condition, embed, mask, encode, decode and reconstruct `x: [C, H, W]`.
    /// `meta` reuses an `E_meta` already recorded on this graph.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_mim<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        x: &Tensor<T>,
        spec: &SensorSpec,
        name: &str,
        provider: &TextEmbeddingProvider,
        plan: &MaskPlan,
        meta: Option<Var>,
    ) -> Result<MimOutput> {
        let grid = self.grid_of(x.shape())?;
        if plan.n != grid.0 * grid.1 {
            return Err(Error::Geometry(format!(
                "mask plan covers {} tokens, cube has {}",
                plan.n,
                grid.0 * grid.1
            )));
        }
        let target = g.constant(unfold_patches(x, self.patch())?);
        let xv = g.constant(x.clone());
        let condition = self.embed.condition(g, xv, spec, name, provider, meta)?;
        let tokens = self.embed.embed(g, xv, condition.e)?;
        let (latents, _) = self.encode(g, tokens, plan, grid)?;
        let decoded = self.decode(g, latents, plan, grid)?;
        let reconstruction = self.reconstruct(g, decoded, condition.meta)?;
        Ok(MimOutput {
            reconstruction,
            target,
            condition,
            tokens,
            latents,
            decoded,
        })
    }

    /// Mean-pooled encoder output with nothing masked: `[D]`.
    pub fn features<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        x: &Tensor<T>,
        spec: &SensorSpec,
        provider: &TextEmbeddingProvider,
    ) -> Result<Var> {
        let grid = self.grid_of(x.shape())?;
        let xv = g.constant(x.clone());
        let (tokens, _) = self.embed.forward(g, xv, spec, &spec.name, provider)?;
        let (latents, _) = self.encode(g, tokens, &MaskPlan::none(grid.0 * grid.1), grid)?;
        Ok(g.mean(latents, 0)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn masking_counts() {
        let p = random_masking(784, 0.75, 9).unwrap();
        assert_eq!((p.masked.len(), p.visible.len()), (588, 196));
        assert_eq!(p, random_masking(784, 0.75, 9).unwrap());
        let none = random_masking(10, 0.0, 1).unwrap();
        assert_eq!(none.visible, (0..10).collect::<Vec<_>>());
        assert!(random_masking(10, 1.0, 1).is_err());
    }

    #[test]
    fn restore_order_inverts_concatenation() {
        let p = random_masking(12, 0.5, 4).unwrap();
        let cat: Vec<usize> = p.visible.iter().chain(&p.masked).copied().collect();
        let order = p.restore_order();
        for (pos, &row) in order.iter().enumerate() {
            assert_eq!(cat[row], pos);
        }
    }

    #[test]
    fn positional_table_shape_and_origin() {
        let t = sincos_pos_embed_2d::<f64>(8, 2, 3).unwrap();
        assert_eq!(t.shape(), &[6, 8]);
        // position (0, 0): sines 0, cosines 1
        assert_eq!(
            t.narrow(0, 0, 1).unwrap().data(),
            &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0]
        );
        assert!(sincos_pos_embed_2d::<f64>(6, 2, 2).is_err());
    }
}
