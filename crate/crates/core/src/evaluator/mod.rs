//! Metrics, evaluation reports, the token-similarity probe and baselines.

pub mod baselines;
pub mod metrics;
pub mod probe;
pub mod report;

pub use baselines::{baseline_models, BaselineKind, LogisticBaseline, MlpBaseline, MLP_HIDDEN};
pub use metrics::{auc, logloss, uauc, UserAuc};
pub use probe::{expert_loads, layer_outputs, similarity_matrix, token_similarity_probe, SimilarityMatrix};
pub use report::{evaluate, evaluate_model, EvalReport};
