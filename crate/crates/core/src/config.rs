use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Which signals drive the hypernetworks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Conditioning {
    Full,
    MetaOnly,
    ContentOnly,
}

impl std::fmt::Display for Conditioning {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Conditioning::Full => "meta+content",
            Conditioning::MetaOnly => "meta-only",
            Conditioning::ContentOnly => "content-only",
        })
    }
}

/// Conditioning encoders and hypernetworks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HyperConfig {
    /// Width `d` of the per-band conditioning embedding.
    pub meta_dim: usize,
    /// Width of the text-embedding provider vectors.
    pub text_dim: usize,
    pub meta_layers: usize,
    pub meta_heads: usize,
    pub meta_ffn_mult: usize,
    pub meta_prenorm: bool,
    /// Hidden width of the three-layer hypernetwork stacks.
    pub hyper_hidden: usize,
    /// Latent rank `r` of the generated factors.
    pub rank: usize,
    pub conditioning: Conditioning,
}

impl Default for HyperConfig {
    fn default() -> Self {
        Self {
            meta_dim: 128,
            text_dim: 32,
            meta_layers: 2,
            meta_heads: 4,
            meta_ffn_mult: 4,
            meta_prenorm: true,
            hyper_hidden: 512,
            rank: 4,
            conditioning: Conditioning::Full,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    /// Patch size `k`.
    pub patch: usize,
    /// Square input extent the content encoder is configured for.
    pub image_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub decoder_dim: usize,
    pub decoder_depth: usize,
    pub decoder_heads: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            patch: 8,
            image_size: 64,
            embed_dim: 192,
            depth: 4,
            heads: 4,
            mlp_ratio: 4,
            decoder_dim: 128,
            decoder_depth: 2,
            decoder_heads: 4,
        }
    }
}

impl BackboneConfig {
    /// ViT-Base at 224×224 with 8×8 patches; used for accounting.
    pub fn vit_base() -> Self {
        Self {
            patch: 8,
            image_size: 224,
            embed_dim: 768,
            depth: 12,
            heads: 12,
            mlp_ratio: 4,
            decoder_dim: 512,
            decoder_depth: 8,
            decoder_heads: 16,
        }
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch
    }

    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hyper: HyperConfig,
    pub backbone: BackboneConfig,
}

impl ModelConfig {
    /// Small geometry for tests and gradient checks.
    pub fn toy() -> Self {
        Self {
            hyper: HyperConfig {
                meta_dim: 16,
                text_dim: 32,
                meta_layers: 1,
                meta_heads: 2,
                meta_ffn_mult: 2,
                meta_prenorm: true,
                hyper_hidden: 24,
                rank: 2,
                conditioning: Conditioning::Full,
            },
            backbone: BackboneConfig {
                patch: 4,
                image_size: 16,
                embed_dim: 16,
                depth: 1,
                heads: 2,
                mlp_ratio: 2,
                decoder_dim: 8,
                decoder_depth: 1,
                decoder_heads: 2,
            },
        }
    }

    /// Narrow widths that pretrain on a laptop CPU in minutes.
    pub fn desk() -> Self {
        Self {
            hyper: HyperConfig {
                meta_dim: 32,
                text_dim: 32,
                meta_layers: 1,
                meta_heads: 2,
                meta_ffn_mult: 2,
                meta_prenorm: true,
                hyper_hidden: 64,
                rank: 4,
                conditioning: Conditioning::Full,
            },
            backbone: BackboneConfig {
                patch: 8,
                image_size: 64,
                embed_dim: 96,
                depth: 2,
                heads: 4,
                mlp_ratio: 2,
                decoder_dim: 96,
                decoder_depth: 2,
                decoder_heads: 4,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let h = &self.hyper;
        let b = &self.backbone;
        let mut problems = Vec::new();
        if h.meta_dim < 4 || !h.meta_dim.is_multiple_of(2) {
            problems.push(format!("meta_dim {} must be even and at least 4", h.meta_dim));
        }
        if h.meta_heads == 0 || !h.meta_dim.is_multiple_of(h.meta_heads) {
            problems.push("meta_dim must be divisible by meta_heads".to_string());
        }
        if h.rank == 0 {
            problems.push("rank must be at least 1".to_string());
        }
        if h.text_dim == 0 || h.hyper_hidden == 0 || h.meta_ffn_mult == 0 {
            problems.push("text_dim, hyper_hidden and meta_ffn_mult must be positive".to_string());
        }
        if b.patch == 0 || b.image_size == 0 || !b.image_size.is_multiple_of(b.patch) {
            problems.push(format!(
                "image_size {} must be a positive multiple of patch {}",
                b.image_size, b.patch
            ));
        }
        for (name, dim, heads) in [
            ("embed_dim", b.embed_dim, b.heads),
            ("decoder_dim", b.decoder_dim, b.decoder_heads),
        ] {
            if heads == 0 || dim % heads != 0 {
                problems.push(format!("{name} {dim} must be divisible by its head count {heads}"));
            }
            if dim % 4 != 0 {
                problems.push(format!("{name} {dim} must be divisible by 4 for 2-d positions"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}
