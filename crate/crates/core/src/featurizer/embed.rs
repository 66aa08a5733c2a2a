//! Embedding lookups and Prime Token projection.

use std::rc::Rc;

use super::data::{Column, ExampleBatch};
use super::plan::TokenPlan;
use super::schema::FeatureSchema;
use crate::error::{Error, Result};
use crate::params::{Bound, Initializer, ParamId, ParamStore};
use crate::tape::{Tape, Var};

#[derive(Clone, Debug)]
enum FeatureParams {
    /// `vocab × emb_dim` lookup table.
    Table(ParamId),
    /// `value · weight + bias`, weight shaped `1 × emb_dim`.
    Lift { weight: ParamId, bias: ParamId },
}

/// Linear layers with Swish between them.
#[derive(Clone, Debug)]
pub struct Mlp {
    layers: Vec<(ParamId, ParamId)>,
}

impl Mlp {
    /// Layer widths `dims[0] -> dims[1] -> ...`, Glorot-initialized, zero bias.
    pub fn build(store: &mut ParamStore, init: &mut Initializer, prefix: &str, dims: &[usize]) -> Self {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let weight = store.add(format!("{prefix}.w{i}"), init.glorot(&[w[0], w[1]], w[0], w[1]));
                let bias = store.add(format!("{prefix}.b{i}"), crate::Tensor::zeros(&[w[1]]));
                (weight, bias)
            })
            .collect();
        Self { layers }
    }

    /// Applies the MLP to the rows of a `[N, in]` var.
    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Var<'t> {
        let mut h = x;
        for (i, (w, b)) in self.layers.iter().enumerate() {
            if i > 0 {
                h = h.swish();
            }
            h = h.matmul(&p[*w]).add_row(&p[*b]);
        }
        h
    }

    pub fn layer_ids(&self) -> &[(ParamId, ParamId)] {
        &self.layers
    }
}

/// One embedding per raw feature: lookup tables for sparse features, an
/// affine lift for dense ones.
#[derive(Clone, Debug)]
pub struct FeatureEmbeddings {
    schema: FeatureSchema,
    features: Vec<FeatureParams>,
}

/// Uniform half-width for embedding-table initialization.
const EMBED_INIT: f64 = 0.5;

impl FeatureEmbeddings {
    /// Embedding widths follow the schema unless `dim` overrides them all.
    pub fn build(
        schema: &FeatureSchema,
        store: &mut ParamStore,
        init: &mut Initializer,
        prefix: &str,
        dim: Option<usize>,
    ) -> Result<Self> {
        schema.validate()?;
        let features = schema
            .features
            .iter()
            .enumerate()
            .map(|(i, f)| {
                let e = dim.unwrap_or(f.emb_dim);
                if f.kind.is_sparse() {
                    FeatureParams::Table(store.add(format!("{prefix}.{i}.table"), init.uniform(&[f.vocab, e], EMBED_INIT)))
                } else {
                    FeatureParams::Lift {
                        weight: store.add(format!("{prefix}.{i}.lift_w"), init.glorot(&[1, e], 1, e)),
                        bias: store.add(format!("{prefix}.{i}.lift_b"), crate::Tensor::zeros(&[e])),
                    }
                }
            })
            .collect();
        Ok(Self { schema: schema.clone(), features })
    }

    pub fn schema(&self) -> &FeatureSchema {
        &self.schema
    }

    /// One `[B, emb_dim]` embedding per raw feature.
    pub fn embed_batch<'t>(&self, tape: &'t Tape, p: &Bound<'t>, batch: &ExampleBatch) -> Result<Vec<Var<'t>>> {
        batch.validate(&self.schema)?;
        let b = batch.len();
        self.schema
            .features
            .iter()
            .zip(&self.features)
            .zip(&batch.columns)
            .map(|((spec, params), col)| match (params, col) {
                (FeatureParams::Table(table), Column::Sparse(ix)) => {
                    let e = p[*table].shape()[1];
                    let flat: Vec<usize> = ix.iter().flat_map(|&v| v * e..(v + 1) * e).collect();
                    Ok(p[*table].gather(Rc::new(flat), &[b, e]))
                }
                (FeatureParams::Lift { weight, bias }, Column::Dense(vals)) => {
                    let x = tape.constant_from(&[b, 1], vals.clone());
                    Ok(x.matmul(&p[*weight]).add_row(&p[*bias]))
                }
                _ => Err(Error::Input(format!("column kind mismatch for feature {}", spec.name))),
            })
            .collect()
    }
}

/// Feature embeddings plus per-token projections into the shared token space.
#[derive(Clone, Debug)]
pub struct PrimeTokenizer {
    plan: TokenPlan,
    embeddings: FeatureEmbeddings,
    projections: Vec<Mlp>,
}

impl PrimeTokenizer {
    pub fn build(schema: &FeatureSchema, plan: &TokenPlan, store: &mut ParamStore, init: &mut Initializer) -> Result<Self> {
        schema.validate()?;
        plan.check(schema)?;
        if plan.d_model == 0 {
            return Err(Error::Config("token dimension must be positive".into()));
        }
        let embeddings = FeatureEmbeddings::build(schema, store, init, "embed", None)?;
        let projections = plan
            .tokens
            .iter()
            .zip(plan.input_dims(schema))
            .enumerate()
            .map(|(t, (tok, input))| {
                let dims = match tok.hidden {
                    Some(h) => vec![input, h, plan.d_model],
                    None => vec![input, plan.d_model],
                };
                Mlp::build(store, init, &format!("tokenize.{t}"), &dims)
            })
            .collect();
        Ok(Self { plan: plan.clone(), embeddings, projections })
    }

    pub fn schema(&self) -> &FeatureSchema {
        self.embeddings.schema()
    }

    pub fn plan(&self) -> &TokenPlan {
        &self.plan
    }

    pub fn projections(&self) -> &[Mlp] {
        &self.projections
    }

    /// One `[B, emb_dim]` embedding per raw feature.
    pub fn embed_batch<'t>(&self, tape: &'t Tape, p: &Bound<'t>, batch: &ExampleBatch) -> Result<Vec<Var<'t>>> {
        self.embeddings.embed_batch(tape, p, batch)
    }

    /// Projects each token's concatenated member embeddings to `D` and stacks
    /// the results into a `[B, T, D]` token matrix.
    pub fn build_prime_tokens<'t>(&self, p: &Bound<'t>, embeddings: &[Var<'t>]) -> Result<Var<'t>> {
        if embeddings.len() != self.schema().len() {
            return Err(Error::Config(format!(
                "{} embeddings for a plan over {} features",
                embeddings.len(),
                self.schema().len()
            )));
        }
        let d = self.plan.d_model;
        let tokens: Vec<Var<'t>> = self
            .plan
            .tokens
            .iter()
            .zip(&self.projections)
            .map(|(tok, mlp)| {
                let parts: Vec<Var<'t>> = tok.features.iter().map(|&f| embeddings[f]).collect();
                let joined = if parts.len() == 1 { parts[0] } else { Var::concat(&parts, 1) };
                let out = mlp.forward(p, joined);
                let b = out.shape()[0];
                out.reshape(&[b, 1, d])
            })
            .collect();
        Ok(Var::concat(&tokens, 1))
    }

    /// Embedding + projection in one call.
    pub fn tokenize<'t>(&self, tape: &'t Tape, p: &Bound<'t>, batch: &ExampleBatch) -> Result<Var<'t>> {
        let emb = self.embed_batch(tape, p, batch)?;
        self.build_prime_tokens(p, &emb)
    }
}
