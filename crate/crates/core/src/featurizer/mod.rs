//! Synthetic data, feature embedding and Prime Tokenization.

pub mod data;
pub mod embed;
pub mod plan;
pub mod schema;

pub use data::{
    generate_dataset, read_csv, read_dataset, sidecar_path, write_csv, write_dataset, Column, Dataset, DatasetMeta, ExampleBatch,
    GroundTruth, GroundTruthSpec, Interaction,
};
pub use embed::{FeatureEmbeddings, Mlp, PrimeTokenizer};
pub use plan::{validate_token_plan, PlanViolation, TokenGroup, TokenPlan};
pub use schema::{FeatureKind, FeatureSchema, FeatureSpec};
