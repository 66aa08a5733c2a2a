//! Synthetic click-through data and its on-disk format.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::schema::{FeatureKind, FeatureSchema};
use crate::error::{Error, Result};
use crate::evaluator::metrics::auc;

/// One planted pairwise interaction `coef · ⟨v_a(x_a), v_b(x_b)⟩`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Interaction {
    pub a: usize,
    pub b: usize,
    pub coef: f64,
}

/// Parameters of the label-generating process.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruthSpec {
    pub latent_dim: usize,
    /// Upper-triangle entries of the symmetric, zero-diagonal coefficient matrix.
    pub interactions: Vec<Interaction>,
    pub bias: f64,
    /// Standard deviation of per-value first-order effects of non-id
    /// features (0 disables them).
    #[serde(default)]
    pub linear_scale: f64,
    /// Standard deviation of Gaussian noise added to the logit.
    pub noise_std: f64,
    /// Seed of the latent "world" (embeddings and effects).
    pub seed: u64,
}

impl GroundTruthSpec {
    /// Planted interactions among the small-vocabulary categorical and
    /// dense features of [`FeatureSchema::desk_default`].
    pub fn desk_default() -> Self {
        Self {
            latent_dim: 2,
            interactions: [(2, 6), (3, 10)].iter().map(|&(a, b)| Interaction { a, b, coef: 6.0 }).collect(),
            bias: -0.5,
            linear_scale: 0.6,
            noise_std: 0.5,
            seed: 7,
        }
    }

    pub fn validate(&self, schema: &FeatureSchema) -> Result<()> {
        let mut problems = Vec::new();
        if self.latent_dim == 0 {
            problems.push("latent_dim must be positive".to_string());
        }
        for it in &self.interactions {
            if it.a == it.b {
                problems.push(format!("interaction ({}, {}) is on the diagonal", it.a, it.b));
            }
            if it.a >= schema.len() || it.b >= schema.len() {
                problems.push(format!("interaction ({}, {}) references an unknown feature", it.a, it.b));
            }
        }
        if self.noise_std < 0.0 || self.linear_scale < 0.0 {
            problems.push("noise_std and linear_scale must be non-negative".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::violations(problems))
        }
    }

    /// Dense symmetric `K × K` coefficient matrix with zero diagonal.
    pub fn coefficient_matrix(&self, k: usize) -> Vec<Vec<f64>> {
        let mut m = vec![vec![0.0; k]; k];
        for it in &self.interactions {
            if it.a != it.b {
                m[it.a][it.b] += it.coef;
                m[it.b][it.a] += it.coef;
            }
        }
        m
    }
}

/// One column of raw feature values.
#[derive(Clone, Debug, PartialEq)]
pub enum Column {
    Sparse(Vec<usize>),
    Dense(Vec<f64>),
}

impl Column {
    fn select(&self, rows: &[usize]) -> Column {
        match self {
            Column::Sparse(v) => Column::Sparse(rows.iter().map(|&r| v[r]).collect()),
            Column::Dense(v) => Column::Dense(rows.iter().map(|&r| v[r]).collect()),
        }
    }

    fn len(&self) -> usize {
        match self {
            Column::Sparse(v) => v.len(),
            Column::Dense(v) => v.len(),
        }
    }
}

/// Labeled examples stored column-wise. Also used for mini-batches.
#[derive(Clone, Debug, PartialEq)]
pub struct ExampleBatch {
    pub user_ids: Vec<u64>,
    pub columns: Vec<Column>,
    /// Binary click labels as 0.0 / 1.0.
    pub labels: Vec<f64>,
}

pub type Dataset = ExampleBatch;

impl ExampleBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Examples at `rows`, in that order.
    pub fn select(&self, rows: &[usize]) -> ExampleBatch {
        ExampleBatch {
            user_ids: rows.iter().map(|&r| self.user_ids[r]).collect(),
            columns: self.columns.iter().map(|c| c.select(rows)).collect(),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
        }
    }

    pub fn range(&self, start: usize, end: usize) -> ExampleBatch {
        let rows: Vec<usize> = (start..end.min(self.len())).collect();
        self.select(&rows)
    }

    /// Checks the batch against `schema`: column kinds, vocabularies, labels.
    pub fn validate(&self, schema: &FeatureSchema) -> Result<()> {
        if self.is_empty() {
            return Err(Error::Input("batch is empty".into()));
        }
        if self.columns.len() != schema.len() {
            return Err(Error::Input(format!(
                "batch has {} feature columns, schema has {}",
                self.columns.len(),
                schema.len()
            )));
        }
        let n = self.len();
        if self.user_ids.len() != n {
            return Err(Error::Input("user id count differs from label count".into()));
        }
        if let Some(bad) = self.labels.iter().find(|&&y| y != 0.0 && y != 1.0) {
            return Err(Error::Input(format!("label {bad} is not binary")));
        }
        for (i, (col, spec)) in self.columns.iter().zip(&schema.features).enumerate() {
            if col.len() != n {
                return Err(Error::Input(format!("column {i} has {} rows, expected {n}", col.len())));
            }
            match (col, spec.kind.is_sparse()) {
                (Column::Sparse(v), true) => {
                    if let Some(&bad) = v.iter().find(|&&x| x >= spec.vocab) {
                        return Err(Error::Input(format!(
                            "feature {i} ({}) index {bad} outside vocabulary {}",
                            spec.name, spec.vocab
                        )));
                    }
                }
                (Column::Dense(_), false) => {}
                _ => return Err(Error::Input(format!("column {i} kind does not match schema"))),
            }
        }
        Ok(())
    }

    pub fn positive_rate(&self) -> f64 {
        self.labels.iter().sum::<f64>() / self.len().max(1) as f64
    }
}

/// Materialized latent world of a [`GroundTruthSpec`].
pub struct GroundTruth {
    latent_dim: usize,
    /// Per feature: `vocab × latent_dim` table (sparse) or one direction (dense).
    latents: Vec<Vec<f64>>,
    /// Per feature: `vocab` first-order effects (sparse) or one weight (dense).
    linear: Vec<Vec<f64>>,
    kinds: Vec<FeatureKind>,
    interactions: Vec<Interaction>,
    bias: f64,
    noise_std: f64,
}

impl GroundTruth {
    pub fn new(schema: &FeatureSchema, spec: &GroundTruthSpec) -> Result<Self> {
        schema.validate()?;
        spec.validate(schema)?;
        let d = spec.latent_dim;
        let scale = 1.0 / (d as f64).sqrt();
        let mut latents = Vec::with_capacity(schema.len());
        let mut linear = Vec::with_capacity(schema.len());
        for f in &schema.features {
            // One stream per feature name keeps each feature's latents
            // independent of the rest of the schema.
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(fnv1a(f.name.as_bytes()));
            let rows = if f.kind.is_sparse() { f.vocab } else { 1 };
            let mut table: Vec<f64> = (0..rows * d).map(|_| rng.sample::<f64, _>(StandardNormal) * scale).collect();
            if f.kind.is_sparse() {
                // Centered over the vocabulary so interactions carry no
                // first-order signal.
                for j in 0..d {
                    let mean = (0..rows).map(|r| table[r * d + j]).sum::<f64>() / rows as f64;
                    for r in 0..rows {
                        table[r * d + j] -= mean;
                    }
                }
            }
            latents.push(table);
            let effects: Vec<f64> = (0..rows).map(|_| rng.sample::<f64, _>(StandardNormal) * spec.linear_scale).collect();
            // Id features only identify the row; with tens of thousands of
            // values, per-id effects could not be learned from one pass.
            linear.push(if f.kind == FeatureKind::Id { vec![0.0; rows] } else { effects });
        }
        Ok(Self {
            latent_dim: d,
            latents,
            linear,
            kinds: schema.features.iter().map(|f| f.kind).collect(),
            interactions: spec.interactions.clone(),
            bias: spec.bias,
            noise_std: spec.noise_std,
        })
    }

    fn latent(&self, f: usize, batch: &ExampleBatch, row: usize, out: &mut [f64]) {
        let d = self.latent_dim;
        match &batch.columns[f] {
            Column::Sparse(v) => out.copy_from_slice(&self.latents[f][v[row] * d..(v[row] + 1) * d]),
            Column::Dense(v) => {
                for (o, u) in out.iter_mut().zip(&self.latents[f]) {
                    *o = v[row] * u;
                }
            }
        }
    }

    /// Noise-free logit of one example; the Bayes-optimal ranking score.
    pub fn logit(&self, batch: &ExampleBatch, row: usize) -> f64 {
        let mut z = self.bias;
        for (f, col) in batch.columns.iter().enumerate() {
            z += match col {
                Column::Sparse(v) => self.linear[f][v[row]],
                Column::Dense(v) => self.linear[f][0] * v[row],
            };
        }
        let d = self.latent_dim;
        let (mut va, mut vb) = (vec![0.0; d], vec![0.0; d]);
        for it in &self.interactions {
            self.latent(it.a, batch, row, &mut va);
            self.latent(it.b, batch, row, &mut vb);
            z += it.coef * va.iter().zip(&vb).map(|(x, y)| x * y).sum::<f64>();
        }
        z
    }

    fn sample_features(&self, schema: &FeatureSchema, n: usize, rng: &mut ChaCha8Rng) -> ExampleBatch {
        let mut columns: Vec<Column> = schema
            .features
            .iter()
            .map(|f| if f.kind.is_sparse() { Column::Sparse(Vec::with_capacity(n)) } else { Column::Dense(Vec::with_capacity(n)) })
            .collect();
        for _ in 0..n {
            for (col, f) in columns.iter_mut().zip(&schema.features) {
                match col {
                    Column::Sparse(v) => v.push(rng.random_range(0..f.vocab)),
                    Column::Dense(v) => v.push(rng.sample(StandardNormal)),
                }
            }
        }
        let user_ids = match schema.user_feature().map(|u| &columns[u]) {
            Some(Column::Sparse(v)) => v.iter().map(|&u| u as u64).collect(),
            _ => (0..n as u64).collect(),
        };
        debug_assert!(self.kinds.len() == columns.len());
        ExampleBatch { user_ids, columns, labels: vec![0.0; n] }
    }

    /// Draws `n` labeled examples.
    pub fn sample(&self, schema: &FeatureSchema, n: usize, seed: u64) -> ExampleBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut batch = self.sample_features(schema, n, &mut rng);
        for row in 0..n {
            let z = self.logit(&batch, row) + self.noise_std * rng.sample::<f64, _>(StandardNormal);
            let p = 1.0 / (1.0 + (-z).exp());
            batch.labels[row] = if rng.random::<f64>() < p { 1.0 } else { 0.0 };
        }
        batch
    }

    /// AUC of the true logit on a fresh sample of `n` examples.
    pub fn bayes_auc(&self, schema: &FeatureSchema, n: usize, seed: u64) -> Result<f64> {
        let batch = self.sample(schema, n, seed);
        let scores: Vec<f64> = (0..n).map(|r| self.logit(&batch, r)).collect();
        auc(&scores, &batch.labels)
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

/// Number of fresh examples scored for the recorded Bayes AUC.
pub const BAYES_SAMPLES: usize = 100_000;

/// Sidecar metadata stored next to a dataset file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub schema: FeatureSchema,
    pub ground_truth: GroundTruthSpec,
    pub seed: u64,
    pub rows: usize,
    pub positive_rate: f64,
    pub bayes_auc: f64,
    pub bayes_samples: usize,
}

/// Generates `n` examples from the planted model and estimates its Bayes AUC.
pub fn generate_dataset(
    schema: &FeatureSchema,
    spec: &GroundTruthSpec,
    n: usize,
    seed: u64,
) -> Result<(Dataset, DatasetMeta)> {
    if n == 0 {
        return Err(Error::Config("dataset size must be at least 1".into()));
    }
    let world = GroundTruth::new(schema, spec)?;
    let data = world.sample(schema, n, seed);
    // Bayes sample stream is disjoint from the data stream.
    let bayes_auc = world.bayes_auc(schema, BAYES_SAMPLES, seed ^ 0x9E37_79B9_7F4A_7C15)?;
    let meta = DatasetMeta {
        schema: schema.clone(),
        ground_truth: spec.clone(),
        seed,
        rows: n,
        positive_rate: data.positive_rate(),
        bayes_auc,
        bayes_samples: BAYES_SAMPLES,
    };
    Ok((data, meta))
}

/// `data.csv` -> `data.meta.json`.
pub fn sidecar_path(csv: &Path) -> PathBuf {
    csv.with_extension("meta.json")
}

/// Writes `user_id,f_0,...,f_{K-1},label` rows.
pub fn write_csv(data: &ExampleBatch, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "user_id")?;
    for i in 0..data.columns.len() {
        write!(w, ",f_{i}")?;
    }
    writeln!(w, ",label")?;
    for row in 0..data.len() {
        write!(w, "{}", data.user_ids[row])?;
        for col in &data.columns {
            match col {
                Column::Sparse(v) => write!(w, ",{}", v[row])?,
                Column::Dense(v) => write!(w, ",{:?}", v[row])?,
            }
        }
        writeln!(w, ",{}", data.labels[row] as u8)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a CSV written by [`write_csv`], interpreting columns via `schema`.
pub fn read_csv(path: &Path, schema: &FeatureSchema) -> Result<Dataset> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines();
    let header = lines.next().ok_or_else(|| Error::Format("empty dataset file".into()))??;
    let expected: Vec<String> = std::iter::once("user_id".to_string())
        .chain((0..schema.len()).map(|i| format!("f_{i}")))
        .chain(std::iter::once("label".to_string()))
        .collect();
    if header.split(',').ne(expected.iter().map(String::as_str)) {
        return Err(Error::Format(format!("unexpected header '{header}'")));
    }
    let mut data = ExampleBatch {
        user_ids: Vec::new(),
        columns: schema
            .features
            .iter()
            .map(|f| if f.kind.is_sparse() { Column::Sparse(Vec::new()) } else { Column::Dense(Vec::new()) })
            .collect(),
        labels: Vec::new(),
    };
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        let bad = |what: &str| Error::Format(format!("line {}: {what}", lineno + 2));
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != schema.len() + 2 {
            return Err(bad("wrong number of fields"));
        }
        data.user_ids.push(fields[0].parse().map_err(|_| bad("bad user_id"))?);
        for (col, field) in data.columns.iter_mut().zip(&fields[1..=schema.len()]) {
            match col {
                Column::Sparse(v) => v.push(field.parse().map_err(|_| bad("bad sparse value"))?),
                Column::Dense(v) => v.push(field.parse().map_err(|_| bad("bad dense value"))?),
            }
        }
        data.labels.push(match fields[schema.len() + 1] {
            "0" => 0.0,
            "1" => 1.0,
            _ => return Err(bad("label must be 0 or 1")),
        });
    }
    data.validate(schema).map_err(|e| Error::Format(e.to_string()))?;
    Ok(data)
}

/// Writes the dataset CSV and its JSON sidecar.
pub fn write_dataset(data: &Dataset, meta: &DatasetMeta, csv: &Path) -> Result<PathBuf> {
    write_csv(data, csv)?;
    let side = sidecar_path(csv);
    std::fs::write(&side, serde_json::to_string_pretty(meta)? + "\n")?;
    Ok(side)
}

/// Reads a dataset CSV together with its sidecar.
pub fn read_dataset(csv: &Path) -> Result<(Dataset, DatasetMeta)> {
    let meta: DatasetMeta = serde_json::from_str(&std::fs::read_to_string(sidecar_path(csv))?)?;
    let data = read_csv(csv, &meta.schema)?;
    Ok((data, meta))
}
