//! Typed tabular data: feature schemas, datasets with binary labels,
//! counterfactual sampling from per-feature empirical marginals, and the
//! random bias predicates used to build skewed training sets.
//!
//! Rows are stored as `f64` vectors. Numeric features hold their value;
//! categorical features hold the index of the category in the schema, so
//! equality on the stored value is equality on the category.

mod bias;
mod counterfactual;
mod csv_io;
mod predicate;

use std::collections::HashSet;
use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{CalError, Result};
use crate::seed::{self, streams};

pub use bias::{induce_bias, predicate_stats, BiasConfig, BiasOutcome, StatsMode};
pub use counterfactual::{draw_pair, sample_counterfactual, substitute, CfBatch, Provenance};
pub use csv_io::{load_csv, load_schema, read_csv, write_csv};
pub use predicate::{Comparison, Condition, Predicate};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum FeatureKind {
    Numeric,
    Categorical(Vec<String>),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Feature {
    pub name: String,
    pub kind: FeatureKind,
}

impl Feature {
    pub fn numeric(name: impl Into<String>) -> Self {
        Feature {
            name: name.into(),
            kind: FeatureKind::Numeric,
        }
    }

    pub fn categorical<S: Into<String>>(
        name: impl Into<String>,
        categories: impl IntoIterator<Item = S>,
    ) -> Self {
        Feature {
            name: name.into(),
            kind: FeatureKind::Categorical(categories.into_iter().map(Into::into).collect()),
        }
    }

    pub fn is_categorical(&self) -> bool {
        matches!(self.kind, FeatureKind::Categorical(_))
    }

    /// Number of categories, or `None` for numeric features.
    pub fn cardinality(&self) -> Option<usize> {
        match &self.kind {
            FeatureKind::Numeric => None,
            FeatureKind::Categorical(c) => Some(c.len()),
        }
    }
}

/// Ordered feature list plus the binary target column.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawSchema", into = "RawSchema")]
pub struct FeatureSchema {
    features: Vec<Feature>,
    target: String,
    positive_label: String,
}

impl FeatureSchema {
    pub fn new(
        features: Vec<Feature>,
        target: impl Into<String>,
        positive_label: impl Into<String>,
    ) -> Result<Self> {
        let schema = FeatureSchema {
            features,
            target: target.into(),
            positive_label: positive_label.into(),
        };
        schema.validate()?;
        Ok(schema)
    }

    fn validate(&self) -> Result<()> {
        if self.features.is_empty() {
            return Err(CalError::InvalidSchema("no features".into()));
        }
        let mut seen = HashSet::new();
        for f in &self.features {
            if f.name.is_empty() {
                return Err(CalError::InvalidSchema("empty feature name".into()));
            }
            if !seen.insert(f.name.as_str()) {
                return Err(CalError::InvalidSchema(format!(
                    "duplicate feature `{}`",
                    f.name
                )));
            }
            if let FeatureKind::Categorical(cats) = &f.kind {
                if cats.len() < 2 {
                    return Err(CalError::InvalidSchema(format!(
                        "categorical feature `{}` needs at least 2 categories",
                        f.name
                    )));
                }
                let distinct: HashSet<_> = cats.iter().collect();
                if distinct.len() != cats.len() {
                    return Err(CalError::InvalidSchema(format!(
                        "categorical feature `{}` repeats a category",
                        f.name
                    )));
                }
            }
        }
        if self.target.is_empty() {
            return Err(CalError::InvalidSchema("empty target name".into()));
        }
        if seen.contains(self.target.as_str()) {
            return Err(CalError::InvalidSchema(format!(
                "target `{}` is also a feature",
                self.target
            )));
        }
        Ok(())
    }

    pub fn features(&self) -> &[Feature] {
        &self.features
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn target(&self) -> &str {
        &self.target
    }

    pub fn positive_label(&self) -> &str {
        &self.positive_label
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.features.iter().map(|f| f.name.as_str())
    }

    pub fn feature_index(&self, name: &str) -> Result<usize> {
        self.features
            .iter()
            .position(|f| f.name == name)
            .ok_or_else(|| CalError::UnknownFeature(name.to_string()))
    }

    /// Parse a textual cell into the stored representation.
    pub fn encode_value(&self, index: usize, text: &str) -> std::result::Result<f64, String> {
        match &self.features[index].kind {
            FeatureKind::Numeric => match text.trim().parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v + 0.0),
                _ => Err(text.to_string()),
            },
            FeatureKind::Categorical(cats) => cats
                .iter()
                .position(|c| c == text.trim())
                .map(|p| p as f64)
                .ok_or_else(|| text.to_string()),
        }
    }

    /// Render a stored value back to text (category name or number).
    pub fn decode_value(&self, index: usize, value: f64) -> String {
        match &self.features[index].kind {
            FeatureKind::Numeric => format!("{value}"),
            FeatureKind::Categorical(cats) => cats
                .get(value as usize)
                .cloned()
                .unwrap_or_else(|| format!("{value}")),
        }
    }

    pub fn validate_row(&self, row: &[f64]) -> Result<()> {
        if row.len() != self.features.len() {
            return Err(CalError::SchemaMismatch(format!(
                "row has {} values, schema has {} features",
                row.len(),
                self.features.len()
            )));
        }
        for (f, &v) in self.features.iter().zip(row) {
            let ok = match &f.kind {
                FeatureKind::Numeric => v.is_finite(),
                FeatureKind::Categorical(c) => v >= 0.0 && v.fract() == 0.0 && (v as usize) < c.len(),
            };
            if !ok {
                return Err(CalError::SchemaMismatch(format!(
                    "value {v} is not valid for feature `{}`",
                    f.name
                )));
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        load_schema(path)
    }
}

#[derive(Serialize, Deserialize)]
struct RawFeature {
    name: String,
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    categories: Option<Vec<String>>,
}

#[derive(Serialize, Deserialize)]
struct RawSchema {
    features: Vec<RawFeature>,
    target: String,
    positive_label: String,
}

impl TryFrom<RawSchema> for FeatureSchema {
    type Error = CalError;

    fn try_from(raw: RawSchema) -> Result<Self> {
        let features = raw
            .features
            .into_iter()
            .map(|f| {
                let kind = match (f.kind.as_str(), f.categories) {
                    ("numeric", None) => FeatureKind::Numeric,
                    ("numeric", Some(_)) => {
                        return Err(CalError::InvalidSchema(format!(
                            "numeric feature `{}` lists categories",
                            f.name
                        )))
                    }
                    ("categorical", Some(c)) => FeatureKind::Categorical(c),
                    ("categorical", None) => {
                        return Err(CalError::InvalidSchema(format!(
                            "categorical feature `{}` has no categories",
                            f.name
                        )))
                    }
                    (other, _) => {
                        return Err(CalError::InvalidSchema(format!(
                            "unknown kind `{other}` for feature `{}`",
                            f.name
                        )))
                    }
                };
                Ok(Feature { name: f.name, kind })
            })
            .collect::<Result<Vec<_>>>()?;
        FeatureSchema::new(features, raw.target, raw.positive_label)
    }
}

impl From<FeatureSchema> for RawSchema {
    fn from(s: FeatureSchema) -> Self {
        RawSchema {
            features: s
                .features
                .into_iter()
                .map(|f| match f.kind {
                    FeatureKind::Numeric => RawFeature {
                        name: f.name,
                        kind: "numeric".into(),
                        categories: None,
                    },
                    FeatureKind::Categorical(c) => RawFeature {
                        name: f.name,
                        kind: "categorical".into(),
                        categories: Some(c),
                    },
                })
                .collect(),
            target: s.target,
            positive_label: s.positive_label,
        }
    }
}

/// Rows conforming to a schema, each with a 0/1 label. Never empty.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    schema: Arc<FeatureSchema>,
    values: Vec<f64>,
    labels: Vec<u8>,
}

impl Dataset {
    pub fn new(schema: Arc<FeatureSchema>, rows: Vec<Vec<f64>>, labels: Vec<u8>) -> Result<Self> {
        let width = schema.len();
        let mut values = Vec::with_capacity(rows.len() * width);
        for row in &rows {
            schema.validate_row(row)?;
            values.extend(row.iter().map(|v| v + 0.0));
        }
        Self::from_parts(schema, values, labels)
    }

    fn from_parts(schema: Arc<FeatureSchema>, values: Vec<f64>, labels: Vec<u8>) -> Result<Self> {
        if labels.is_empty() {
            return Err(CalError::EmptyDataset);
        }
        if values.len() != labels.len() * schema.len() {
            return Err(CalError::SchemaMismatch(format!(
                "{} labels for {} values",
                labels.len(),
                values.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&y| y > 1) {
            return Err(CalError::InvalidArgument(format!("label {bad} is not 0/1")));
        }
        Ok(Dataset {
            schema,
            values,
            labels,
        })
    }

    pub fn schema(&self) -> &FeatureSchema {
        &self.schema
    }

    pub fn schema_arc(&self) -> &Arc<FeatureSchema> {
        &self.schema
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.schema.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.schema.len();
        &self.values[i * w..(i + 1) * w]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.values.chunks_exact(self.schema.len())
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> u8 {
        self.labels[i]
    }

    pub fn value(&self, i: usize, feature: usize) -> f64 {
        self.values[i * self.schema.len() + feature]
    }

    pub fn column(&self, feature: usize) -> impl Iterator<Item = f64> + '_ {
        self.rows().map(move |r| r[feature])
    }

    /// Distinct values of a column with their multiplicities, ascending.
    pub fn value_counts(&self, feature: usize) -> Vec<(f64, u64)> {
        let mut col: Vec<f64> = self.column(feature).collect();
        col.sort_by(f64::total_cmp);
        let mut out: Vec<(f64, u64)> = Vec::new();
        for v in col {
            match out.last_mut() {
                Some((last, c)) if *last == v => *c += 1,
                _ => out.push((v, 1)),
            }
        }
        out
    }

    pub fn positive_count(&self) -> usize {
        self.labels.iter().filter(|&&y| y == 1).count()
    }

    /// Rows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let mut values = Vec::with_capacity(indices.len() * self.n_features());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            values.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Self::from_parts(self.schema.clone(), values, labels)
    }

    /// Append rows with labels (rows are validated against the schema).
    pub fn extend(&mut self, rows: &[Vec<f64>], labels: &[u8]) -> Result<()> {
        if rows.len() != labels.len() {
            return Err(CalError::InvalidArgument(format!(
                "{} rows but {} labels",
                rows.len(),
                labels.len()
            )));
        }
        for row in rows {
            self.schema.validate_row(row)?;
        }
        if let Some(bad) = labels.iter().find(|&&y| y > 1) {
            return Err(CalError::InvalidArgument(format!("label {bad} is not 0/1")));
        }
        for row in rows {
            self.values.extend(row.iter().map(|v| v + 0.0));
        }
        self.labels.extend_from_slice(labels);
        Ok(())
    }

    /// Same rows with new labels.
    pub fn relabel(&self, labels: Vec<u8>) -> Result<Dataset> {
        Self::from_parts(self.schema.clone(), self.values.clone(), labels)
    }

    pub fn same_schema(&self, other: &FeatureSchema) -> Result<()> {
        if *self.schema != *other {
            return Err(CalError::SchemaMismatch(
                "datasets were built from different schemas".into(),
            ));
        }
        Ok(())
    }
}

/// Disjoint train/test partition by a seeded uniform shuffle. Each side keeps
/// the original row order.
pub fn split(d: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let (a, b) = split_indices(d.len(), test_fraction, seed)?;
    Ok((d.subset(&a)?, d.subset(&b)?))
}

pub(crate) fn split_indices(
    n: usize,
    test_fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(CalError::InvalidArgument(format!(
            "test fraction {test_fraction} not in (0, 1)"
        )));
    }
    let n_test = (n as f64 * test_fraction).round() as usize;
    if n_test == 0 || n_test >= n {
        return Err(CalError::EmptySplit {
            rows: n,
            fraction: test_fraction,
        });
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seed::rng(seed::derive(seed, streams::SPLIT)));
    let mut test = idx[..n_test].to_vec();
    let mut train = idx[n_test..].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    Ok((train, test))
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    /// Two numeric features a, b over {0,1} with all four combinations.
    pub fn d4_schema() -> Arc<FeatureSchema> {
        Arc::new(
            FeatureSchema::new(
                vec![Feature::numeric("a"), Feature::numeric("b")],
                "y",
                "1",
            )
            .unwrap(),
        )
    }

    pub fn d4_with(label: impl Fn(&[f64]) -> u8) -> Dataset {
        let rows = vec![
            vec![0.0, 0.0],
            vec![0.0, 1.0],
            vec![1.0, 0.0],
            vec![1.0, 1.0],
        ];
        let labels = rows.iter().map(|r| label(r)).collect();
        Dataset::new(d4_schema(), rows, labels).unwrap()
    }

    pub fn d4() -> Dataset {
        d4_with(|r| r[0] as u8)
    }
}
