//! Deterministic text embeddings for sensor names and processing levels.
//!
//! A shipped table covers the built-in names, the two levels and the
//! reserved `unknown` token; anything else is hashed to a seeded Gaussian
//! direction. All vectors are unit-norm.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::{Error, Result};

pub const UNKNOWN: &str = "unknown";

const BUILTIN_TABLE: &str = include_str!("../assets/text_table.toml");

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProviderMode {
    /// Table lookup, hashing only strings missing from the table.
    Table,
    /// Always hash.
    Hashed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbeddingProvider {
    pub mode: ProviderMode,
    dim: usize,
    table: BTreeMap<String, Vec<f64>>,
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

impl TextEmbeddingProvider {
    /// The shipped table.
    pub fn builtin() -> Self {
        Self::from_table_text(BUILTIN_TABLE).expect("shipped text table parses")
    }

    pub fn hashed(dim: usize) -> Self {
        Self {
            mode: ProviderMode::Hashed,
            dim,
            table: BTreeMap::new(),
        }
    }

    /// Parses a table document mapping strings to float lists; rows are
    /// normalized to unit norm and must share one length.
    pub fn from_table_text(text: &str) -> Result<Self> {
        let raw: BTreeMap<String, Vec<f64>> =
            toml::from_str(text).map_err(|e| Error::Config(format!("text table: {e}")))?;
        let dim = raw
            .values()
            .next()
            .map(Vec::len)
            .ok_or_else(|| Error::Config("text table is empty".into()))?;
        if dim == 0 || raw.values().any(|v| v.len() != dim) {
            return Err(Error::Config("text table rows must share one non-zero length".into()));
        }
        if !raw.contains_key(UNKNOWN) {
            return Err(Error::Config(format!("text table lacks the '{UNKNOWN}' row")));
        }
        Ok(Self {
            mode: ProviderMode::Table,
            dim,
            table: raw.into_iter().map(|(k, v)| (k, unit(v))).collect(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_table_text(&std::fs::read_to_string(path)?)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn hash_vector(&self, s: &str) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(s));
        unit((0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect())
    }

    /// Unit vector for `text`; blank strings map to the `unknown` token.
    pub fn embed(&self, text: &str) -> Vec<f64> {
        let key = match text.trim() {
            "" => UNKNOWN,
            t => t,
        };
        match self.mode {
            ProviderMode::Table => self.table.get(key).cloned().unwrap_or_else(|| self.hash_vector(key)),
            ProviderMode::Hashed => self.hash_vector(key),
        }
    }

    pub fn contains(&self, text: &str) -> bool {
        self.table.contains_key(text)
    }
}
