//! Parameter and FLOP accounting for the hypernetwork embedding.

use std::fmt;

use numerics::ParamStore;

use crate::config::{BackboneConfig, ModelConfig};
use crate::hyper::HyperEmbedding;
use crate::nn::Builder;
use crate::Result;

/// Parameter counts of the embedding module, by sub-block.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamReport {
    pub blocks: Vec<(String, usize)>,
    pub total: usize,
    pub hypernetwork: usize,
    /// `C·k²·D + D` for a dense per-band patch embedding at `channels`.
    pub vanilla: usize,
    pub channels: usize,
}

impl ParamReport {
    pub fn hypernet_share(&self) -> f64 {
        self.hypernetwork as f64 / self.total as f64
    }
}

pub fn vanilla_patch_embed_params(c: usize, k: usize, d: usize) -> usize {
    c * k * k * d + d
}

/// Counts the parameters the embedding module actually registers.
pub fn param_report(cfg: &ModelConfig, channels: usize) -> Result<ParamReport> {
    cfg.validate()?;
    let mut store = ParamStore::<f32>::new();
    HyperEmbedding::new(&mut Builder::new(&mut store, 0), cfg);
    let groups = [
        (
            "meta.wavelength_fwhm",
            vec!["meta.fwhm.", "meta.alpha", "meta.beta", "meta.fuse."],
        ),
        ("meta.text", vec!["meta.name.", "meta.level."]),
        ("meta.cff", vec!["meta.cff."]),
        ("meta.transformer", vec!["meta.blocks.", "meta.norm."]),
        ("content", vec!["content."]),
        ("condition_cff", vec!["fuse."]),
        ("hyper.f_u", vec!["hyper.f_u."]),
        ("hyper.f_v", vec!["hyper.f_v."]),
        ("hyper.f_b", vec!["hyper.f_b."]),
    ];
    let blocks: Vec<(String, usize)> = groups
        .iter()
        .map(|(name, prefixes)| (name.to_string(), prefixes.iter().map(|p| store.count(p)).sum::<usize>()))
        .collect();
    let total = store.count("");
    let hypernetwork = store.count("hyper.");
    let b = &cfg.backbone;
    Ok(ParamReport {
        blocks,
        total,
        hypernetwork,
        vanilla: vanilla_patch_embed_params(channels, b.patch, b.embed_dim),
        channels,
    })
}

impl fmt::Display for ParamReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (name, n) in &self.blocks {
            writeln!(f, "params.{name} = {n}")?;
        }
        writeln!(f, "params.total = {}", self.total)?;
        writeln!(f, "params.hypernetwork = {}", self.hypernetwork)?;
        writeln!(f, "params.hypernetwork_share = {:.4}", self.hypernet_share())?;
        write!(f, "params.vanilla_patch_embed[C={}] = {}", self.channels, self.vanilla)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlopReport {
    pub channels: usize,
    pub tokens: usize,
    /// Factor generation by the three stacks.
    pub hypernetwork: u64,
    /// `2·N·C·(k²·r + r·D)`.
    pub factorized: u64,
    /// Metadata and content encoders plus condition fusion.
    pub conditioning: u64,
    pub vit_forward: u64,
}

impl FlopReport {
    pub fn total(&self) -> u64 {
        self.hypernetwork + self.factorized
    }

    pub fn ratio(&self) -> f64 {
        self.total() as f64 / self.vit_forward as f64
    }
}

/// Forward FLOPs of a transformer encoder at `n` tokens (two per MAC,
/// projections, attention products and feed-forward).
pub fn transformer_forward_flops(b: &BackboneConfig, n: usize) -> u64 {
    let (n, d, m) = (n as u64, b.embed_dim as u64, b.mlp_ratio as u64);
    let per_layer = 2 * n * (4 * d * d + 2 * m * d * d) + 4 * n * n * d;
    b.depth as u64 * per_layer
}

/// FLOPs of the embedding at `channels` bands over `tokens` patches.
pub fn flops_report(cfg: &ModelConfig, channels: usize, tokens: usize) -> Result<FlopReport> {
    cfg.validate()?;
    let mut store = ParamStore::<f32>::new();
    let emb = HyperEmbedding::new(&mut Builder::new(&mut store, 0), cfg);
    let b = &cfg.backbone;
    let (c, n, k2, r, d) = (
        channels as u64,
        tokens as u64,
        (b.patch * b.patch) as u64,
        cfg.hyper.rank as u64,
        b.embed_dim as u64,
    );
    let cond_macs = emb.meta.macs(channels) + channels * (emb.content.mlp.macs() + emb.fuse.macs());
    Ok(FlopReport {
        channels,
        tokens,
        hypernetwork: 2 * emb.hyper.macs(channels) as u64,
        factorized: 2 * n * c * (k2 * r + r * d),
        conditioning: 2 * cond_macs as u64,
        vit_forward: transformer_forward_flops(b, tokens),
    })
}

impl fmt::Display for FlopReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "flops.channels = {}", self.channels)?;
        writeln!(f, "flops.tokens = {}", self.tokens)?;
        writeln!(f, "flops.hypernetwork = {}", self.hypernetwork)?;
        writeln!(f, "flops.factorized = {}", self.factorized)?;
        writeln!(f, "flops.total = {}", self.total())?;
        writeln!(f, "flops.total_gflops = {:.4}", self.total() as f64 / 1e9)?;
        writeln!(f, "flops.conditioning_encoders = {}", self.conditioning)?;
        writeln!(f, "flops.vit_forward = {}", self.vit_forward)?;
        write!(f, "flops.ratio_to_vit = {:.5}", self.ratio())
    }
}

/// Hypernetwork widths with a ViT-Base backbone at 224×224.
pub fn accounting_config() -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig::vit_base(),
        ..Default::default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn factorized_term_is_linear_in_channels() {
        let cfg = ModelConfig::toy();
        let a = flops_report(&cfg, 10, 16).unwrap();
        let b = flops_report(&cfg, 20, 16).unwrap();
        assert_eq!(b.factorized, 2 * a.factorized);
    }

    #[test]
    fn counts_do_not_depend_on_channels() {
        let cfg = ModelConfig::toy();
        let a = param_report(&cfg, 50).unwrap();
        let b = param_report(&cfg, 425).unwrap();
        assert_eq!(a.total, b.total);
        assert_eq!(a.blocks.iter().map(|b| b.1).sum::<usize>(), a.total);
    }
}
