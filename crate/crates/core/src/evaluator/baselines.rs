//! Reference models trained with the same loop as the main model.

use serde::{Deserialize, Serialize};

use super::report::{evaluate, EvalReport};
use crate::error::Result;
use crate::featurizer::{ExampleBatch, FeatureEmbeddings, FeatureSchema, Mlp};
use crate::model::{Scored, Scorer};
use crate::params::{Bound, Initializer, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::trainer::{train, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    Logistic,
    Mlp,
}

/// Logistic regression on one-hot sparse and raw dense features: one weight
/// per vocabulary entry, one per dense feature, plus a bias.
#[derive(Clone, Debug)]
pub struct LogisticBaseline {
    weights: FeatureEmbeddings,
    bias: ParamId,
    store: ParamStore,
}

impl LogisticBaseline {
    pub fn build(schema: &FeatureSchema, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut init = Initializer::new(seed);
        let weights = FeatureEmbeddings::build(schema, &mut store, &mut init, "logistic", Some(1))?;
        let bias = store.add("logistic.bias", Tensor::zeros(&[1]));
        Ok(Self { weights, bias, store })
    }
}

impl Scorer for LogisticBaseline {
    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn score<'t>(&self, tape: &'t Tape, p: &Bound<'t>, batch: &ExampleBatch) -> Result<Scored<'t>> {
        let terms = self.weights.embed_batch(tape, p, batch)?;
        let sum = terms.iter().skip(1).fold(terms[0], |acc, t| acc.add(t));
        let logits = sum.add_row(&p[self.bias]).reshape(&[batch.len()]);
        Ok(Scored { logits, routings: Vec::new() })
    }
}

/// Concatenated feature embeddings through a plain MLP.
#[derive(Clone, Debug)]
pub struct MlpBaseline {
    embeddings: FeatureEmbeddings,
    mlp: Mlp,
    store: ParamStore,
}

impl MlpBaseline {
    pub fn build(schema: &FeatureSchema, hidden: &[usize], seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut init = Initializer::new(seed);
        let embeddings = FeatureEmbeddings::build(schema, &mut store, &mut init, "embed", None)?;
        let width = schema.features.iter().map(|f| f.emb_dim).sum();
        let dims: Vec<usize> = std::iter::once(width).chain(hidden.iter().copied()).chain([1]).collect();
        let mlp = Mlp::build(&mut store, &mut init, "mlp", &dims);
        Ok(Self { embeddings, mlp, store })
    }
}

impl Scorer for MlpBaseline {
    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn score<'t>(&self, tape: &'t Tape, p: &Bound<'t>, batch: &ExampleBatch) -> Result<Scored<'t>> {
        let parts = self.embeddings.embed_batch(tape, p, batch)?;
        let x = Var::concat(&parts, 1);
        let logits = self.mlp.forward(p, x).reshape(&[batch.len()]);
        Ok(Scored { logits, routings: Vec::new() })
    }
}

/// Hidden widths of the MLP baseline.
pub const MLP_HIDDEN: [usize; 1] = [64];

/// Trains the logistic and MLP baselines on `train` with `cfg` and reports
/// their metrics on `test`.
pub fn baseline_models(
    schema: &FeatureSchema,
    train_data: &ExampleBatch,
    test_data: &ExampleBatch,
    cfg: &TrainConfig,
) -> Result<Vec<(BaselineKind, EvalReport)>> {
    let mut logistic = LogisticBaseline::build(schema, cfg.seed)?;
    train(&mut logistic, train_data, cfg)?;
    let mut mlp = MlpBaseline::build(schema, &MLP_HIDDEN, cfg.seed)?;
    train(&mut mlp, train_data, cfg)?;
    Ok(vec![(BaselineKind::Logistic, evaluate(&logistic, test_data)?), (BaselineKind::Mlp, evaluate(&mlp, test_data)?)])
}
