//! Token heterogeneity probe and router load measurement.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featurizer::ExampleBatch;
use crate::model::Model;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Batch-averaged absolute cosine similarity between the output tokens of
/// one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    /// 1-based layer index.
    pub layer: usize,
    pub tokens: usize,
    /// Row-major `tokens × tokens`.
    pub values: Vec<f64>,
    /// Mean of the off-diagonal entries.
    pub mean_off_diagonal: f64,
    /// Zero-norm tokens encountered; their pairs count as 0.
    pub zero_tokens: usize,
}

impl SimilarityMatrix {
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.tokens + j]
    }

    /// One CSV row per token, no header.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for row in self.values.chunks(self.tokens) {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
            let _ = writeln!(s, "{}", cells.join(","));
        }
        s
    }
}

/// Similarity matrix of a `[B, T, D]` token batch.
pub fn similarity_matrix(tokens: &Tensor, layer: usize) -> Result<SimilarityMatrix> {
    let [b, t, d] = tokens.shape() else {
        return Err(Error::Input(format!("expected [B, T, D] tokens, got {:?}", tokens.shape())));
    };
    let (b, t, d) = (*b, *t, *d);
    let mut values = vec![0.0; t * t];
    let mut zero_tokens = 0;
    for ex in tokens.data().chunks(t * d) {
        let norms: Vec<f64> = ex.chunks(d).map(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
        zero_tokens += norms.iter().filter(|&&n| n == 0.0).count();
        for i in 0..t {
            for j in i..t {
                if norms[i] == 0.0 || norms[j] == 0.0 {
                    continue;
                }
                let c = if i == j {
                    1.0
                } else {
                    let dot: f64 = ex[i * d..(i + 1) * d].iter().zip(&ex[j * d..(j + 1) * d]).map(|(x, y)| x * y).sum();
                    (dot / (norms[i] * norms[j])).abs().min(1.0)
                };
                values[i * t + j] += c;
                if i != j {
                    values[j * t + i] += c;
                }
            }
        }
    }
    values.iter_mut().for_each(|v| *v /= b as f64);
    let off: f64 = (0..t).flat_map(|i| (0..t).map(move |j| (i, j))).filter(|(i, j)| i != j).map(|(i, j)| values[i * t + j]).sum();
    let mean_off_diagonal = if t > 1 { off / (t * (t - 1)) as f64 } else { 0.0 };
    Ok(SimilarityMatrix { layer, tokens: t, values, mean_off_diagonal, zero_tokens })
}

/// Output TokenMatrix of every layer for `batch`.
pub fn layer_outputs(model: &Model, batch: &ExampleBatch) -> Result<Vec<Tensor>> {
    let tape = Tape::new();
    let p = model.store.bind_frozen(&tape);
    let out = model.forward(&tape, &p, batch)?;
    Ok(out.layer_outputs.iter().map(|v| v.value()).collect())
}

/// Similarity of the output tokens of `layer` (1-based).
pub fn token_similarity_probe(model: &Model, batch: &ExampleBatch, layer: usize) -> Result<SimilarityMatrix> {
    if layer == 0 || layer > model.layers.len() {
        return Err(Error::Config(format!("probe layer must be in 1..={} (got {layer})", model.layers.len())));
    }
    let outputs = layer_outputs(model, batch)?;
    similarity_matrix(&outputs[layer - 1], layer)
}

/// Fraction of positions routed to each expert, per MoE layer, over all of
/// `data`. Empty for models without routers.
pub fn expert_loads(model: &Model, data: &ExampleBatch, chunk: usize) -> Result<Vec<Vec<f64>>> {
    let mut totals: Vec<Vec<f64>> = Vec::new();
    let mut positions = 0usize;
    let mut start = 0;
    while start < data.len() {
        let end = (start + chunk.max(1)).min(data.len());
        let tape = Tape::new();
        let p = model.store.bind_frozen(&tape);
        let out = model.forward(&tape, &p, &data.range(start, end))?;
        if totals.is_empty() {
            totals = out.routings.iter().map(|r| vec![0.0; r.trace.experts]).collect();
        }
        for (acc, r) in totals.iter_mut().zip(&out.routings) {
            let n = r.trace.positions() as f64;
            acc.iter_mut().zip(&r.trace.loads).for_each(|(a, f)| *a += f * n);
        }
        positions += out.routings.first().map_or(0, |r| r.trace.positions());
        start = end;
    }
    for acc in &mut totals {
        acc.iter_mut().for_each(|a| *a /= positions as f64);
    }
    Ok(totals)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Initializer;

    #[test]
    fn identical_tokens_are_fully_similar() {
        let row = [0.3, -1.0, 2.0];
        let x = Tensor::new(vec![1, 3, 3], [row, row, row.map(|v| -2.0 * v)].concat()).unwrap();
        let m = similarity_matrix(&x, 1).unwrap();
        assert!(m.values.iter().all(|&v| (v - 1.0).abs() < 1e-12));
        assert!((m.mean_off_diagonal - 1.0).abs() < 1e-12);
    }

    #[test]
    fn orthogonal_tokens_have_zero_similarity() {
        let m = similarity_matrix(&Tensor::eye(4).reshape(&[1, 4, 4]).unwrap(), 1).unwrap();
        assert_eq!(m.mean_off_diagonal, 0.0);
        assert_eq!(m.at(2, 2), 1.0);
    }

    #[test]
    fn zero_tokens_are_flagged() {
        let x = Tensor::new(vec![1, 2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let m = similarity_matrix(&x, 1).unwrap();
        assert_eq!(m.zero_tokens, 1);
        assert_eq!(m.values, vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn random_tokens_match_direct_computation() {
        let (b, t, d) = (4, 6, 512);
        let x = Initializer::new(3).uniform(&[b, t, d], 1.0);
        let m = similarity_matrix(&x, 2).unwrap();
        for i in 0..t {
            for j in 0..t {
                let mut acc = 0.0;
                for e in 0..b {
                    let u = &x.data()[(e * t + i) * d..(e * t + i + 1) * d];
                    let v = &x.data()[(e * t + j) * d..(e * t + j + 1) * d];
                    let dot: f64 = u.iter().zip(v).map(|(a, c)| a * c).sum();
                    let nu: f64 = u.iter().map(|a| a * a).sum::<f64>().sqrt();
                    let nv: f64 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
                    acc += (dot / (nu * nv)).abs();
                }
                assert!((m.at(i, j) - acc / b as f64).abs() < 1e-12);
            }
        }
        let expect = (2.0 / (std::f64::consts::PI * d as f64)).sqrt();
        assert!((m.mean_off_diagonal - expect).abs() < 0.02, "{}", m.mean_off_diagonal);
    }

    #[test]
    fn symmetric_and_scale_invariant() {
        let x = Initializer::new(8).uniform(&[3, 4, 5], 1.0);
        let m = similarity_matrix(&x, 1).unwrap();
        let mut y = x.clone();
        y.data_mut()[5..10].iter_mut().for_each(|v| *v *= 7.5);
        let my = similarity_matrix(&y, 1).unwrap();
        for i in 0..4 {
            assert_eq!(m.at(i, i), 1.0);
            for j in 0..4 {
                assert_eq!(m.at(i, j), m.at(j, i));
                assert!((m.at(i, j) - my.at(i, j)).abs() < 1e-12);
            }
        }
    }
}
