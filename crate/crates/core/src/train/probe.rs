//! Linear probing: a softmax classifier on frozen mean-pooled encoder
//! features.

use numerics::{backward, ParamStore, Scalar, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::data::loader::load_sample;
use crate::data::Dataset;
use crate::graph::Graph;
use crate::mae::HyperMae;
use crate::sensor::BandSelection;
use crate::text::TextEmbeddingProvider;
use crate::train::optim::AdamW;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Held-out share of each class.
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            lr: 0.01,
            test_fraction: 0.25,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeReport {
    /// Held-out accuracy.
    pub accuracy: f64,
    pub train_accuracy: f64,
    pub trainable_params: usize,
    pub classes: usize,
    pub train: usize,
    pub test: usize,
}

/// Mean-pooled encoder features of every labeled patch over its full band
/// range, with nothing masked.
pub fn extract_features<T: Scalar>(
    model: &HyperMae,
    store: &ParamStore<T>,
    ds: &Dataset,
    provider: &TextEmbeddingProvider,
) -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
    let stats = ds.stats.as_ref().ok_or_else(|| Error::MissingStats("dataset".into()))?;
    let mut feats = Vec::with_capacity(ds.len());
    let mut labels = Vec::with_capacity(ds.len());
    for e in &ds.entries {
        let label = e
            .label
            .ok_or_else(|| Error::Config(format!("patch {} has no label", e.id)))?;
        let spec = ds.spec(&e.sensor)?;
        let s = load_sample(e, stats, BandSelection::full(spec.band_count()))?;
        let mut g = Graph::new(store);
        let v = model.features(&mut g, &s.x.cast(), spec, provider)?;
        feats.push(g.value(v).data().iter().map(|x| x.as_f64()).collect());
        labels.push(label);
    }
    Ok((feats, labels))
}

/// Stratified split, per-dimension standardization from the training
/// part, then a softmax head trained full-batch with AdamW (no decay).
pub fn probe_features(feats: &[Vec<f64>], labels: &[usize], cfg: &ProbeConfig) -> Result<ProbeReport> {
    if feats.is_empty() || feats.len() != labels.len() {
        return Err(Error::EmptyDataset);
    }
    let d = feats[0].len();
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for c in 0..k {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        idx.shuffle(&mut rng);
        let n_test = ((idx.len() as f64 * cfg.test_fraction).round() as usize).min(idx.len().saturating_sub(1));
        test.extend_from_slice(&idx[..n_test]);
        train.extend_from_slice(&idx[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();

    let mut mean = vec![0.0; d];
    let mut std = vec![0.0; d];
    for &i in &train {
        for j in 0..d {
            mean[j] += feats[i][j] / train.len() as f64;
        }
    }
    for &i in &train {
        for j in 0..d {
            std[j] += (feats[i][j] - mean[j]).powi(2) / train.len() as f64;
        }
    }
    let std: Vec<f64> = std.into_iter().map(|v| v.sqrt().max(1e-8)).collect();
    let matrix = |rows: &[usize]| -> Result<Tensor<f64>> {
        let data = rows
            .iter()
            .flat_map(|&i| (0..d).map(|j| (feats[i][j] - mean[j]) / std[j]).collect::<Vec<_>>())
            .collect();
        Ok(Tensor::new([rows.len(), d], data)?)
    };
    let xtr = matrix(&train)?;
    let onehot = Tensor::from_fn(
        [train.len(), k],
        |i| if labels[train[i / k]] == i % k { 1.0 } else { 0.0 },
    );

    let mut head = ParamStore::<f64>::new();
    let w = head.add("head.weight", Tensor::zeros([d, k]));
    let b = head.add("head.bias", Tensor::zeros([k]));
    let mut opt = AdamW::new(&head, 0.9, 0.999, 1e-8, 0.0);
    for _ in 0..cfg.epochs {
        let mut t = Tape::new();
        let (wv, bv) = (t.param(&head, w), t.param(&head, b));
        let x = t.constant(xtr.clone());
        let logits = t.linear(x, wv, Some(bv))?;
        let p = t.softmax(logits, 1)?;
        let p = t.clamp(p, 1e-12, 1.0);
        let logp = t.log(p)?;
        let y = t.constant(onehot.clone());
        let picked = t.mul(y, logp)?;
        let s = t.sum_all(picked)?;
        let loss = t.scale(s, -1.0 / train.len() as f64);
        backward(&t, loss, &mut head)?;
        opt.update(&mut head, cfg.lr)?;
        head.zero_grad();
    }
    let accuracy_of = |rows: &[usize]| -> Result<f64> {
        if rows.is_empty() {
            return Ok(f64::NAN);
        }
        let logits = affine(&matrix(rows)?, head.value(w), head.value(b))?;
        let hits = rows
            .iter()
            .enumerate()
            .filter(|&(r, &i)| argmax(&logits[r * k..(r + 1) * k]) == labels[i])
            .count();
        Ok(hits as f64 / rows.len() as f64)
    };
    Ok(ProbeReport {
        accuracy: accuracy_of(&test)?,
        train_accuracy: accuracy_of(&train)?,
        trainable_params: head.count(""),
        classes: k,
        train: train.len(),
        test: test.len(),
    })
}

fn affine(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>) -> Result<Vec<f64>> {
    let y = numerics::contract(x, w, &numerics::ContractSpec::parse("md,dk->mk")?)?;
    let k = b.numel();
    Ok(y.data().iter().enumerate().map(|(i, v)| v + b.data()[i % k]).collect())
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold(
            (0, f64::NEG_INFINITY),
            |best, (i, &x)| if x > best.1 { (i, x) } else { best },
        )
        .0
}

/// Probe on a frozen backbone; `store` is only read.
pub fn linear_probe<T: Scalar>(
    model: &HyperMae,
    store: &ParamStore<T>,
    ds: &Dataset,
    provider: &TextEmbeddingProvider,
    cfg: &ProbeConfig,
) -> Result<ProbeReport> {
    let (f, l) = extract_features(model, store, ds, provider)?;
    probe_features(&f, &l, cfg)
}

/// Probe on an untrained backbone initialized from `seed`.
pub fn random_backbone_probe(
    model_cfg: &ModelConfig,
    seed: u64,
    ds: &Dataset,
    provider: &TextEmbeddingProvider,
    cfg: &ProbeConfig,
) -> Result<ProbeReport> {
    let mut store = ParamStore::<f32>::new();
    let model = HyperMae::build(model_cfg, &mut store, seed)?;
    linear_probe(&model, &store, ds, provider, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separable_clusters_are_learned() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut feats = Vec::new();
        let mut labels = Vec::new();
        for i in 0..80 {
            let c = i % 4;
            let f: Vec<f64> = (0..6)
                .map(|j| if j == c { 3.0 } else { 0.0 } + rand::Rng::random_range(&mut rng, -0.5..0.5))
                .collect();
            feats.push(f);
            labels.push(c);
        }
        let r = probe_features(&feats, &labels, &ProbeConfig::default()).unwrap();
        assert_eq!(r.trainable_params, 6 * 4 + 4);
        assert_eq!((r.train, r.test), (60, 20));
        assert_eq!(r.accuracy, 1.0);
    }
}
