//! Per-band metadata embedding: wavelength and FWHM encodings, sensor text
//! attributes, their fusion and a band-axis transformer.

use numerics::{ParamId, Scalar, Tensor, Var};

use crate::config::HyperConfig;
use crate::fusion::Cff;
use crate::graph::Graph;
use crate::nn::{Block, Builder, LayerNorm, Linear, Mlp};
use crate::sensor::{Level, SensorSpec};
use crate::text::TextEmbeddingProvider;
use crate::{Error, Result};

/// Shortest and longest Fourier wavelengths (µm).
pub const LAMBDA_MIN_UM: f64 = 0.350;
pub const LAMBDA_MAX_UM: f64 = 2.550;

/// FWHM values enter the MLP in units of 10 nm.
pub const FWHM_UNIT_UM: f64 = 0.01;

/// Log-spaced Fourier wavelengths `λ_0 … λ_{d/2-1}` on `[0.350, 2.550]` µm.
pub fn fourier_wavelengths(d: usize) -> Vec<f64> {
    let half = d / 2;
    let (lo, hi) = (LAMBDA_MIN_UM.ln(), LAMBDA_MAX_UM.ln());
    (0..half)
        .map(|i| {
            if i == 0 {
                LAMBDA_MIN_UM
            } else if i + 1 == half {
                LAMBDA_MAX_UM
            } else {
                (lo + (hi - lo) * i as f64 / (half - 1) as f64).exp()
            }
        })
        .collect()
}

/// `C × d` matrix with columns `2i, 2i+1` = `cos, sin(2πx/λ_i)`.
pub fn fourier_wavelength_encoding<T: Scalar>(wavelengths_um: &[f64], d: usize) -> Result<Tensor<T>> {
    if d == 0 || !d.is_multiple_of(2) {
        return Err(Error::Config(format!("encoding width {d} must be even and positive")));
    }
    if let Some(i) = wavelengths_um.iter().position(|&x| !(x > 0.0 && x.is_finite())) {
        return Err(Error::Sensor(format!("wavelength must be positive (band {i})")));
    }
    let lambdas = fourier_wavelengths(d);
    let mut data = Vec::with_capacity(wavelengths_um.len() * d);
    for &x in wavelengths_um {
        for &l in &lambdas {
            let phase = std::f64::consts::TAU * x / l;
            data.push(T::lit(phase.cos()));
            data.push(T::lit(phase.sin()));
        }
    }
    Ok(Tensor::new([wavelengths_um.len(), d], data)?)
}

/// Intermediate values of one metadata encoding.
#[derive(Debug, Clone)]
pub struct MetaTrace {
    pub wavelength: Var,
    pub fwhm: Var,
    pub spectral: Var,
    pub name: Var,
    pub level: Var,
    pub sensor: Var,
    pub fused: Var,
    pub attention: Vec<Var>,
    pub out: Var,
}

#[derive(Debug, Clone)]
pub struct MetaEncoder {
    pub d: usize,
    pub text_dim: usize,
    pub fwhm: Mlp,
    pub alpha: ParamId,
    pub beta: ParamId,
    pub fuse: Mlp,
    pub name: Mlp,
    pub level: Mlp,
    pub cff: Cff,
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
}

impl MetaEncoder {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, cfg: &HyperConfig) -> Self {
        let d = cfg.meta_dim;
        let t = cfg.text_dim;
        Self {
            d,
            text_dim: t,
            fwhm: b.mlp("fwhm", &[1, d, d], 1.0),
            alpha: b.constant("alpha", &[1], 1.0),
            beta: b.constant("beta", &[1], 1.0),
            fuse: b.mlp("fuse", &[d, d, d], 1.0),
            name: b.mlp("name", &[t, d, d / 2], 1.0),
            level: b.mlp("level", &[t, d, d / 2], 1.0),
            cff: Cff::new(b, "cff", d, d, d),
            blocks: (0..cfg.meta_layers)
                .map(|i| {
                    b.block(
                        &format!("blocks.{i}"),
                        d,
                        cfg.meta_heads,
                        cfg.meta_ffn_mult * d,
                        cfg.meta_prenorm,
                    )
                })
                .collect(),
            norm: b.layer_norm("norm", d),
        }
    }

    /// Per-band FWHM MLP, `C × d`.
    pub fn fwhm_encoding<T: Scalar>(&self, g: &mut Graph<'_, T>, fwhm_um: &[f64]) -> Result<Var> {
        if let Some(i) = fwhm_um.iter().position(|&f| !(f > 0.0)) {
            return Err(Error::Sensor(format!("fwhm must be positive (band {i})")));
        }
        let x = Tensor::from_fn([fwhm_um.len(), 1], |i| T::lit(fwhm_um[i] / FWHM_UNIT_UM));
        let x = g.constant(x);
        self.fwhm.forward(g, x)
    }

    /// Name and level embeddings, each `C × d/2` with identical rows.
    pub fn text_attribute_encoding<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        name: &str,
        level: Level,
        provider: &TextEmbeddingProvider,
        bands: usize,
    ) -> Result<(Var, Var)> {
        if provider.dim() != self.text_dim {
            return Err(Error::Config(format!(
                "text provider width {} differs from configured {}",
                provider.dim(),
                self.text_dim
            )));
        }
        let mut rows = Vec::with_capacity(2);
        for (text, mlp) in [(name, &self.name), (level.as_str(), &self.level)] {
            let v = provider.embed(text);
            let v = g.constant(Tensor::from_fn([1, v.len()], |i| T::lit(v[i])));
            let h = mlp.forward(g, v)?;
            rows.push(g.broadcast_to(h, &[bands, self.d / 2])?);
        }
        Ok((rows[0], rows[1]))
    }

    /// `fused + MLP(fused)` with `fused = α·E_wl + β·E_fwhm`.
    pub fn fuse_spectral<T: Scalar>(&self, g: &mut Graph<'_, T>, wl: Var, fwhm: Var) -> Result<Var> {
        if g.shape(wl) != g.shape(fwhm) {
            return Err(Error::Geometry(format!(
                "spectral fusion inputs {:?} and {:?} differ",
                g.shape(wl),
                g.shape(fwhm)
            )));
        }
        let (alpha, beta) = (g.p(self.alpha), g.p(self.beta));
        let a = g.mul(wl, alpha)?;
        let b = g.mul(fwhm, beta)?;
        let fused = g.add(a, b)?;
        let m = self.fuse.forward(g, fused)?;
        Ok(g.add(fused, m)?)
    }

    /// Band-axis transformer without positional encoding, then a final norm.
    pub fn spectral_transformer<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<(Var, Vec<Var>)> {
        let mut x = x;
        let mut attention = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (y, a) = block.forward_traced(g, x)?;
            x = y;
            attention.push(a);
        }
        Ok((self.norm.forward(g, x)?, attention))
    }

    /// `E_meta: C × d` for `spec`, with `name` standing in for the sensor name.
    pub fn encode<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        spec: &SensorSpec,
        name: &str,
        provider: &TextEmbeddingProvider,
    ) -> Result<Var> {
        Ok(self.encode_traced(g, spec, name, provider)?.out)
    }

    pub fn encode_traced<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        spec: &SensorSpec,
        name: &str,
        provider: &TextEmbeddingProvider,
    ) -> Result<MetaTrace> {
        let c = spec.band_count();
        if c == 0 || spec.fwhm_um.len() != c {
            return Err(Error::Sensor(format!("inconsistent band metadata for {}", spec.key())));
        }
        let wl = fourier_wavelength_encoding::<T>(&spec.wavelengths_um, self.d)?;
        let wavelength = g.constant(wl);
        let fwhm = self.fwhm_encoding(g, &spec.fwhm_um)?;
        let spectral = self.fuse_spectral(g, wavelength, fwhm)?;
        let (name_e, level_e) = self.text_attribute_encoding(g, name, spec.level, provider, c)?;
        let sensor = concat_sensor(g, name_e, level_e)?;
        let fused = self.cff.forward(g, spectral, sensor)?;
        let (out, attention) = self.spectral_transformer(g, fused)?;
        Ok(MetaTrace {
            wavelength,
            fwhm,
            spectral,
            name: name_e,
            level: level_e,
            sensor,
            fused,
            attention,
            out,
        })
    }

    pub fn param_count(&self) -> usize {
        let mlps = [&self.fwhm, &self.fuse, &self.name, &self.level]
            .iter()
            .flat_map(|m| m.layers.iter())
            .map(Linear::param_count)
            .sum::<usize>();
        mlps + 2 + self.cff.param_count() + self.blocks.iter().map(Block::param_count).sum::<usize>() + 2 * self.d
    }

    /// Multiply-accumulates for `c` bands; text paths run once.
    pub fn macs(&self, c: usize) -> usize {
        c * (self.fwhm.macs() + self.fuse.macs() + self.cff.macs())
            + self.name.macs()
            + self.level.macs()
            + self.blocks.iter().map(|b| b.macs(c)).sum::<usize>()
    }
}

/// Row-wise concatenation of two `C × d/2` matrices.
pub fn concat_sensor<T: Scalar>(g: &mut Graph<'_, T>, name: Var, level: Var) -> Result<Var> {
    if g.shape(name) != g.shape(level) {
        return Err(Error::Geometry(format!(
            "name {:?} and level {:?} embeddings differ in shape",
            g.shape(name),
            g.shape(level)
        )));
    }
    Ok(g.concat(&[name, level], 1)?)
}
