//! Evaluation reports.

use serde::{Deserialize, Serialize};

use super::metrics::{auc, logloss, uauc};
use super::probe::{layer_outputs, similarity_matrix};
use crate::error::Result;
use crate::featurizer::ExampleBatch;
use crate::model::{Model, Scorer};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub auc: f64,
    pub uauc: f64,
    pub logloss: f64,
    pub n_examples: usize,
    pub n_users_scored: usize,
    pub n_users_skipped: usize,
    /// Mean off-diagonal |cos| of each layer's output tokens (empty for
    /// models without token layers).
    pub token_similarity: Vec<f64>,
}

/// Ranking metrics of `scorer` on `data`.
pub fn evaluate<S: Scorer>(scorer: &S, data: &ExampleBatch) -> Result<EvalReport> {
    let probs = scorer.predict(data)?;
    let u = uauc(&probs, &data.labels, &data.user_ids)?;
    Ok(EvalReport {
        auc: auc(&probs, &data.labels)?,
        uauc: u.value,
        logloss: logloss(&probs, &data.labels)?,
        n_examples: data.len(),
        n_users_scored: u.users_scored,
        n_users_skipped: u.users_skipped,
        token_similarity: Vec::new(),
    })
}

/// [`evaluate`] plus per-layer token similarity over the first `probe_rows`
/// examples.
pub fn evaluate_model(model: &Model, data: &ExampleBatch, probe_rows: usize) -> Result<EvalReport> {
    let mut report = evaluate(model, data)?;
    let probe = data.range(0, probe_rows.clamp(1, data.len()));
    report.token_similarity = layer_outputs(model, &probe)?
        .iter()
        .enumerate()
        .map(|(l, x)| similarity_matrix(x, l + 1).map(|m| m.mean_off_diagonal))
        .collect::<Result<_>>()?;
    Ok(report)
}
