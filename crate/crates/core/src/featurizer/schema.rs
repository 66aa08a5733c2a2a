use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    /// High-cardinality identifier (user id, item id).
    Id,
    Categorical,
    Dense,
}

impl FeatureKind {
    pub fn is_sparse(self) -> bool {
        !matches!(self, FeatureKind::Dense)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureSpec {
    pub name: String,
    pub kind: FeatureKind,
    /// Vocabulary size for sparse kinds; ignored for dense features.
    #[serde(default)]
    pub vocab: usize,
    /// Semantic group label used by tokenization.
    pub group: String,
    pub emb_dim: usize,
}

/// Raw feature layout of a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureSchema {
    pub features: Vec<FeatureSpec>,
}

impl FeatureSchema {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.features.is_empty() {
            problems.push("schema must have at least one feature".to_string());
        }
        for (i, f) in self.features.iter().enumerate() {
            if f.kind.is_sparse() && f.vocab < 2 {
                problems.push(format!("feature {i} ({}) is sparse with vocabulary {} < 2", f.name, f.vocab));
            }
            if f.group.is_empty() {
                problems.push(format!("feature {i} ({}) has no semantic group", f.name));
            }
            if f.emb_dim == 0 {
                problems.push(format!("feature {i} ({}) has zero embedding dimension", f.name));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::violations(problems))
        }
    }

    /// Index of the first id feature, used as the user key.
    pub fn user_feature(&self) -> Option<usize> {
        self.features.iter().position(|f| f.kind == FeatureKind::Id)
    }

    /// Desk-scale default: 2 id features, 18 categorical features in 5
    /// semantic groups and 4 dense features (K = 24).
    pub fn desk_default() -> Self {
        let mut features = vec![
            FeatureSpec { name: "user_id".into(), kind: FeatureKind::Id, vocab: 10_000, group: "user".into(), emb_dim: 8 },
            FeatureSpec { name: "item_id".into(), kind: FeatureKind::Id, vocab: 5_000, group: "item".into(), emb_dim: 8 },
        ];
        let groups: [(&str, &[usize]); 5] = [
            ("user_profile", &[4, 6, 8, 10]),
            ("item_profile", &[5, 6, 8, 10]),
            ("context", &[3, 4, 5, 6]),
            ("author", &[4, 6, 8]),
            ("device", &[2, 3, 4]),
        ];
        for (group, vocabs) in groups {
            for (j, &vocab) in vocabs.iter().enumerate() {
                features.push(FeatureSpec {
                    name: format!("{group}_{j}"),
                    kind: FeatureKind::Categorical,
                    vocab,
                    group: group.into(),
                    emb_dim: 8,
                });
            }
        }
        for j in 0..4 {
            features.push(FeatureSpec {
                name: format!("stat_{j}"),
                kind: FeatureKind::Dense,
                vocab: 0,
                group: "stats".into(),
                emb_dim: 8,
            });
        }
        Self { features }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_default_shape() {
        let s = FeatureSchema::desk_default();
        s.validate().unwrap();
        assert_eq!(s.len(), 24);
        assert_eq!(s.features.iter().filter(|f| f.kind == FeatureKind::Id).count(), 2);
        assert_eq!(s.features.iter().filter(|f| f.kind == FeatureKind::Dense).count(), 4);
        assert_eq!(s.user_feature(), Some(0));
    }

    #[test]
    fn tiny_vocab_rejected() {
        let mut s = FeatureSchema::desk_default();
        s.features[3].vocab = 1;
        assert!(s.validate().unwrap_err().to_string().contains("vocabulary 1"));
    }
}
