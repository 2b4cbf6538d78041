//! Per-band image content features and their fusion with the metadata
//! embedding into the conditioning matrix.

use numerics::{PoolMode, Scalar, Tensor, Var};

use crate::config::Conditioning;
use crate::fusion::Cff;
use crate::graph::Graph;
use crate::nn::{Builder, Linear, Mlp};
use crate::{Error, Result};

fn check_divisible(h: usize, w: usize, k: usize) -> Result<()> {
    if k == 0 || !h.is_multiple_of(k) || !w.is_multiple_of(k) || h == 0 || w == 0 {
        return Err(Error::Geometry(format!(
            "{h}×{w} is not divisible into {k}×{k} patches"
        )));
    }
    Ok(())
}

/// Non-overlapping `k × k` average and max pooling of `x: [C, H, W]`,
/// each flattened to `[C, N]`.
pub fn dual_pool<T: Scalar>(g: &mut Graph<'_, T>, x: Var, k: usize) -> Result<(Var, Var)> {
    let s = g.shape(x).to_vec();
    if s.len() != 3 {
        return Err(Error::Geometry(format!("expected a [C, H, W] cube, got {s:?}")));
    }
    check_divisible(s[1], s[2], k)?;
    let (gh, gw) = (s[1] / k, s[2] / k);
    let avg = g.pool2d(x, gh, gw, PoolMode::Avg)?;
    let max = g.pool2d(x, gh, gw, PoolMode::Max)?;
    Ok((g.reshape(avg, [s[0], gh * gw])?, g.reshape(max, [s[0], gh * gw])?))
}

#[derive(Debug, Clone)]
pub struct ContentEncoder {
    pub mlp: Mlp,
    /// Side of the pooled grid the MLP input width is bound to.
    pub grid: usize,
}

impl ContentEncoder {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, grid: usize, d: usize) -> Self {
        let n = grid * grid;
        Self {
            mlp: b.mlp("mlp", &[2 * n, d, d], 1.0),
            grid,
        }
    }

    pub fn tokens(&self) -> usize {
        self.grid * self.grid
    }

    /// Per-band MLP over `[X_avg | X_max]`, `C × 2N → C × d`.
    pub fn project<T: Scalar>(&self, g: &mut Graph<'_, T>, avg: Var, max: Var) -> Result<Var> {
        let n = self.tokens();
        for v in [avg, max] {
            let s = g.shape(v);
            if s.len() != 2 || s[1] != n {
                return Err(Error::Geometry(format!(
                    "content encoder configured for N = {n}, got pooled map {s:?}"
                )));
            }
        }
        let cat = g.concat(&[avg, max], 1)?;
        self.mlp.forward(g, cat)
    }

    /// Dual pooling of `x: [C, H, W]` with re-pooling to the configured grid
    /// when the geometry differs, then projection.
    pub fn encode<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var, k: usize) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let (avg, max) = dual_pool(g, x, k)?;
        let (gh, gw) = (s[1] / k, s[2] / k);
        if (gh, gw) == (self.grid, self.grid) {
            return self.project(g, avg, max);
        }
        let c = s[0];
        let avg = g.reshape(avg, [c, gh, gw])?;
        let max = g.reshape(max, [c, gh, gw])?;
        let avg = g.pool2d(avg, self.grid, self.grid, PoolMode::Avg)?;
        let max = g.pool2d(max, self.grid, self.grid, PoolMode::Max)?;
        let n = self.tokens();
        let avg = g.reshape(avg, [c, n])?;
        let max = g.reshape(max, [c, n])?;
        self.project(g, avg, max)
    }

    pub fn param_count(&self) -> usize {
        self.mlp.layers.iter().map(Linear::param_count).sum()
    }
}

/// `E = CFF(E_meta, E_content)`, with the ablated input replaced by zeros.
pub fn condition_fuse<T: Scalar>(
    g: &mut Graph<'_, T>,
    cff: &Cff,
    mode: Conditioning,
    meta: Var,
    content: Var,
) -> Result<Var> {
    if g.shape(meta) != g.shape(content) {
        return Err(Error::Geometry(format!(
            "meta {:?} and content {:?} embeddings differ",
            g.shape(meta),
            g.shape(content)
        )));
    }
    let zeros = |g: &mut Graph<'_, T>, v: Var| {
        let shape = g.shape(v).to_vec();
        g.constant(Tensor::zeros(shape))
    };
    let (m, c) = match mode {
        Conditioning::Full => (meta, content),
        Conditioning::MetaOnly => (meta, zeros(g, content)),
        Conditioning::ContentOnly => (zeros(g, meta), content),
    };
    cff.forward(g, m, c)
}
