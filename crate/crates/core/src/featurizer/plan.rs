use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::schema::{FeatureKind, FeatureSchema};
use crate::error::{Error, Result};

/// Member features of one Prime Token and the width of its projection MLP.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenGroup {
    pub features: Vec<usize>,
    /// Hidden width of the projection; `None` projects with a single linear map.
    #[serde(default)]
    pub hidden: Option<usize>,
}

/// Assignment of raw features to `T` Prime Tokens of dimension `D`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenPlan {
    pub d_model: usize,
    pub tokens: Vec<TokenGroup>,
}

/// A broken tokenization rule.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum PlanViolation {
    /// Rule 1: an id feature shares its token.
    IdNotAlone { feature: usize, token: usize },
    /// Rule 2: a feature is spread over several tokens.
    FeatureSplit { feature: usize, tokens: Vec<usize> },
    /// A feature belongs to no token.
    FeatureMissing { feature: usize },
    /// A token references a feature the schema does not have.
    UnknownFeature { feature: usize, token: usize },
    /// Rule 3: token sizes within one semantic group differ by more than one.
    Unbalanced { group: String, sizes: Vec<usize> },
    EmptyToken { token: usize },
}

impl fmt::Display for PlanViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PlanViolation::IdNotAlone { feature, token } => {
                write!(f, "rule 1: id feature {feature} is not alone in token {token}")
            }
            PlanViolation::FeatureSplit { feature, tokens } => {
                write!(f, "rule 2: feature {feature} is split across tokens {tokens:?}")
            }
            PlanViolation::FeatureMissing { feature } => write!(f, "feature {feature} is assigned to no token"),
            PlanViolation::UnknownFeature { feature, token } => {
                write!(f, "token {token} references unknown feature {feature}")
            }
            PlanViolation::Unbalanced { group, sizes } => {
                write!(f, "rule 3: group '{group}' has unbalanced token sizes {sizes:?}")
            }
            PlanViolation::EmptyToken { token } => write!(f, "token {token} has no features"),
        }
    }
}

/// Every rule the plan breaks against `schema`; empty means the plan is valid.
pub fn validate_token_plan(schema: &FeatureSchema, plan: &TokenPlan) -> Vec<PlanViolation> {
    let mut out = Vec::new();
    let k = schema.len();
    let mut owners: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (ti, tok) in plan.tokens.iter().enumerate() {
        if tok.features.is_empty() {
            out.push(PlanViolation::EmptyToken { token: ti });
        }
        for &f in &tok.features {
            if f >= k {
                out.push(PlanViolation::UnknownFeature { feature: f, token: ti });
                continue;
            }
            if !owners[f].contains(&ti) {
                owners[f].push(ti);
            }
            if schema.features[f].kind == FeatureKind::Id && tok.features.len() > 1 {
                out.push(PlanViolation::IdNotAlone { feature: f, token: ti });
            }
        }
    }
    for (f, tokens) in owners.iter().enumerate() {
        match tokens.len() {
            0 => out.push(PlanViolation::FeatureMissing { feature: f }),
            1 => {}
            _ => out.push(PlanViolation::FeatureSplit { feature: f, tokens: tokens.clone() }),
        }
    }
    let mut sizes: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for tok in &plan.tokens {
        let mut per_group: BTreeMap<&str, usize> = BTreeMap::new();
        for &f in tok.features.iter().filter(|&&f| f < k) {
            let spec = &schema.features[f];
            if spec.kind != FeatureKind::Id {
                *per_group.entry(spec.group.as_str()).or_default() += 1;
            }
        }
        for (g, n) in per_group {
            sizes.entry(g).or_default().push(n);
        }
    }
    for (group, s) in sizes {
        let (lo, hi) = (s.iter().min().unwrap(), s.iter().max().unwrap());
        if hi - lo > 1 {
            out.push(PlanViolation::Unbalanced { group: group.to_string(), sizes: s });
        }
    }
    out
}

impl TokenPlan {
    pub fn num_tokens(&self) -> usize {
        self.tokens.len()
    }

    /// Fails with every violation when the plan does not fit `schema`.
    pub fn check(&self, schema: &FeatureSchema) -> Result<()> {
        let v = validate_token_plan(schema, self);
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::violations(v.iter().map(ToString::to_string).collect()))
        }
    }

    /// Groups `schema` by the tokenization rules: every id feature gets its own
    /// token, every other semantic group is split into balanced tokens of at
    /// most `max_per_token` features.
    pub fn from_schema(schema: &FeatureSchema, d_model: usize, max_per_token: usize, hidden: Option<usize>) -> Self {
        let max_per_token = max_per_token.max(1);
        let mut tokens = Vec::new();
        let mut groups: Vec<(&str, Vec<usize>)> = Vec::new();
        for (i, f) in schema.features.iter().enumerate() {
            if f.kind == FeatureKind::Id {
                tokens.push(TokenGroup { features: vec![i], hidden });
            } else if let Some(g) = groups.iter_mut().find(|(name, _)| *name == f.group) {
                g.1.push(i);
            } else {
                groups.push((f.group.as_str(), vec![i]));
            }
        }
        for (_, members) in groups {
            let chunks = members.len().div_ceil(max_per_token);
            let (base, extra) = (members.len() / chunks, members.len() % chunks);
            let mut it = members.into_iter();
            for c in 0..chunks {
                let take = base + usize::from(c < extra);
                tokens.push(TokenGroup { features: it.by_ref().take(take).collect(), hidden });
            }
        }
        Self { d_model, tokens }
    }

    /// Concatenated embedding width feeding each token's projection.
    pub fn input_dims(&self, schema: &FeatureSchema) -> Vec<usize> {
        self.tokens
            .iter()
            .map(|t| t.features.iter().map(|&f| schema.features[f].emb_dim).sum())
            .collect()
    }
}
