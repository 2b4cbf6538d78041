//! Small layer library shared by the encoders, hypernetworks and backbone.

use numerics::{ParamId, ParamStore, Scalar, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::graph::Graph;
use crate::Result;

/// Registers parameters under a dotted name prefix with seeded initialization.
pub struct Builder<'a, T: Scalar> {
    store: &'a mut ParamStore<T>,
    rng: ChaCha8Rng,
    prefix: Vec<String>,
}

impl<'a, T: Scalar> Builder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, seed: u64) -> Self {
        Self {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
            prefix: Vec::new(),
        }
    }

    pub fn push(&mut self, scope: &str) {
        self.prefix.push(scope.to_string());
    }

    pub fn pop(&mut self) {
        self.prefix.pop();
    }

    /// Runs `f` with `scope` appended to the name prefix.
    pub fn scoped<R>(&mut self, scope: &str, f: impl FnOnce(&mut Self) -> R) -> R {
        self.push(scope);
        let r = f(self);
        self.pop();
        r
    }

    fn name(&self, leaf: &str) -> String {
        let mut parts = self.prefix.clone();
        parts.push(leaf.to_string());
        parts.join(".")
    }

    pub fn constant(&mut self, leaf: &str, shape: &[usize], value: f64) -> ParamId {
        let name = self.name(leaf);
        self.store.add(name, Tensor::full(shape.to_vec(), T::lit(value)))
    }

    /// Uniform in `[-bound, bound]`.
    pub fn uniform(&mut self, leaf: &str, shape: &[usize], bound: f64) -> ParamId {
        let name = self.name(leaf);
        let rng = &mut self.rng;
        let t = Tensor::from_fn(shape.to_vec(), |_| {
            T::lit(if bound > 0.0 {
                rng.random_range(-bound..bound)
            } else {
                0.0
            })
        });
        self.store.add(name, t)
    }

    pub fn linear(&mut self, leaf: &str, fan_in: usize, fan_out: usize) -> Linear {
        self.linear_scaled(leaf, fan_in, fan_out, 1.0)
    }

    /// Linear layer with weights `U(±gain/√fan_in)` and zero bias.
    pub fn linear_scaled(&mut self, leaf: &str, fan_in: usize, fan_out: usize, gain: f64) -> Linear {
        self.push(leaf);
        let w = self.uniform("weight", &[fan_in, fan_out], gain / (fan_in.max(1) as f64).sqrt());
        let b = self.constant("bias", &[fan_out], 0.0);
        self.pop();
        Linear { w, b, fan_in, fan_out }
    }

    /// Fully connected stack over `widths` with GELU between layers; the
    /// last layer is scaled by `out_gain`.
    pub fn mlp(&mut self, leaf: &str, widths: &[usize], out_gain: f64) -> Mlp {
        assert!(widths.len() >= 2, "an MLP needs at least one layer");
        self.push(leaf);
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let gain = if i + 1 == n { out_gain } else { 1.0 };
                self.linear_scaled(&format!("fc{i}"), widths[i], widths[i + 1], gain)
            })
            .collect();
        self.pop();
        Mlp { layers }
    }

    pub fn layer_norm(&mut self, leaf: &str, dim: usize) -> LayerNorm {
        self.push(leaf);
        let gain = self.constant("gain", &[dim], 1.0);
        let bias = self.constant("bias", &[dim], 0.0);
        self.pop();
        LayerNorm { gain, bias }
    }

    pub fn block(&mut self, leaf: &str, dim: usize, heads: usize, ffn: usize, prenorm: bool) -> Block {
        self.push(leaf);
        let norm1 = self.layer_norm("norm1", dim);
        let qkv = self.linear("attn.qkv", dim, 3 * dim);
        let proj = self.linear("attn.proj", dim, dim);
        let norm2 = self.layer_norm("norm2", dim);
        let mlp = self.mlp("mlp", &[dim, ffn, dim], 1.0);
        self.pop();
        Block {
            norm1,
            attn: SelfAttention { qkv, proj, heads },
            norm2,
            mlp,
            prenorm,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (g.p(self.w), g.p(self.b));
        Ok(g.linear(x, w, Some(b))?)
    }

    pub fn param_count(&self) -> usize {
        self.fan_in * self.fan_out + self.fan_out
    }

    /// Multiply-accumulate count for one input row.
    pub fn macs(&self) -> usize {
        self.fan_in * self.fan_out
    }
}

#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, mut x: Var) -> Result<Var> {
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(g, x)?;
            if i != last {
                x = g.gelu(x)?;
            }
        }
        Ok(x)
    }

    pub fn macs(&self) -> usize {
        self.layers.iter().map(Linear::macs).sum()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.fan_out)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|l| [l.w, l.b]).collect()
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (gain, bias) = (g.p(self.gain), g.p(self.bias));
        Ok(g.layer_norm(x, gain, bias, T::lit(1e-5))?)
    }
}

#[derive(Debug, Clone)]
pub struct SelfAttention {
    pub qkv: Linear,
    pub proj: Linear,
    pub heads: usize,
}

impl SelfAttention {
    /// Multi-head self-attention over the rows of `x: [L, dim]`. Returns the
    /// output and the attention weights `[heads, L, L]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<(Var, Var)> {
        let shape = g.shape(x).to_vec();
        let (len, dim) = (shape[0], shape[1]);
        let dh = dim / self.heads;
        let qkv = self.qkv.forward(g, x)?;
        let qkv = g.reshape(qkv, [len, 3, self.heads, dh])?;
        let qkv = g.permute(qkv, &[1, 2, 0, 3])?;
        let mut parts = Vec::with_capacity(3);
        for i in 0..3 {
            let p = g.narrow(qkv, 0, i, 1)?;
            parts.push(g.reshape(p, [self.heads, len, dh])?);
        }
        let scores = g.contract(parts[0], parts[1], "hld,hmd->hlm")?;
        let scores = g.scale(scores, T::lit(1.0 / (dh as f64).sqrt()));
        let attn = g.softmax(scores, 2)?;
        let out = g.contract(attn, parts[2], "hlm,hmd->hld")?;
        let out = g.permute(out, &[1, 0, 2])?;
        let out = g.reshape(out, [len, dim])?;
        Ok((self.proj.forward(g, out)?, attn))
    }
}

/// Transformer block: attention then feed-forward, each with a residual
/// connection, normalized before (pre-norm) or after (post-norm) the branch.
#[derive(Debug, Clone)]
pub struct Block {
    pub norm1: LayerNorm,
    pub attn: SelfAttention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
    pub prenorm: bool,
}

impl Block {
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        Ok(self.forward_traced(g, x)?.0)
    }

    pub fn forward_traced<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<(Var, Var)> {
        if self.prenorm {
            let h = self.norm1.forward(g, x)?;
            let (a, attn) = self.attn.forward(g, h)?;
            let x = g.add(x, a)?;
            let h = self.norm2.forward(g, x)?;
            let m = self.mlp.forward(g, h)?;
            Ok((g.add(x, m)?, attn))
        } else {
            let (a, attn) = self.attn.forward(g, x)?;
            let x = g.add(x, a)?;
            let x = self.norm1.forward(g, x)?;
            let m = self.mlp.forward(g, x)?;
            let x = g.add(x, m)?;
            Ok((self.norm2.forward(g, x)?, attn))
        }
    }

    pub fn param_count(&self) -> usize {
        let dim = self.qkv_dim();
        4 * dim
            + self.attn.qkv.param_count()
            + self.attn.proj.param_count()
            + self.mlp.layers.iter().map(Linear::param_count).sum::<usize>()
    }

    /// Multiply-accumulate count for a sequence of `len` tokens.
    pub fn macs(&self, len: usize) -> usize {
        let dim = self.qkv_dim();
        len * (self.attn.qkv.macs() + self.attn.proj.macs() + self.mlp.macs()) + 2 * len * len * dim
    }

    fn qkv_dim(&self) -> usize {
        self.attn.qkv.fan_in
    }
}

/// Sets every parameter whose name starts with `prefix` to zero.
pub fn zero_params<T: Scalar>(store: &mut ParamStore<T>, prefix: &str) {
    let ids: Vec<ParamId> = store
        .iter()
        .filter(|(_, p)| p.name.starts_with(prefix))
        .map(|(id, _)| id)
        .collect();
    for id in ids {
        store
            .get_mut(id)
            .value
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = T::zero());
    }
}
