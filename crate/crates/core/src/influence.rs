//! Average unary quantitative input influence (auQII).
//!
//! The influence of feature `f` on a classifier `h` is the probability that
//! `h` changes its output when `f` alone is redrawn from its marginal:
//! `P(h(X) != h(X with f <- U_f))`, with `X` the empirical data distribution
//! and `U_f` the empirical marginal of column `f`. The exact estimator sums
//! over all `N^2` (base row, source row) pairs; the Monte-Carlo estimator
//! draws pairs.

use indexmap::IndexMap;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{draw_pair, substitute, Dataset};
use crate::error::{CalError, Result};
use crate::models::Classify;
use crate::seed::{self, streams, Rng};

pub const DEFAULT_EXACT_LIMIT: usize = 2000;
pub const MAX_DEFAULT_DRAWS: usize = 100_000;

/// Default Monte-Carlo draws for a dataset of `n` rows: `20 n`, capped.
pub fn default_draws(n: usize) -> usize {
    (20 * n).clamp(1, MAX_DEFAULT_DRAWS)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorMode {
    Exact,
    Mc,
    /// Exact when the dataset is within the exact limit, otherwise Monte-Carlo.
    Auto,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorSettings {
    pub mode: EstimatorMode,
    /// Monte-Carlo draws per feature; `None` uses [`default_draws`].
    pub draws: Option<usize>,
    pub exact_limit: usize,
}

impl Default for EstimatorSettings {
    fn default() -> Self {
        EstimatorSettings {
            mode: EstimatorMode::Auto,
            draws: None,
            exact_limit: DEFAULT_EXACT_LIMIT,
        }
    }
}

impl EstimatorSettings {
    pub fn exact() -> Self {
        EstimatorSettings {
            mode: EstimatorMode::Exact,
            ..Self::default()
        }
    }

    pub fn mc(draws: usize) -> Self {
        EstimatorSettings {
            mode: EstimatorMode::Mc,
            draws: Some(draws),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.draws == Some(0) {
            return Err(CalError::InvalidArgument("estimator draws must be >= 1".into()));
        }
        Ok(())
    }

    /// `None` for exact estimation, `Some(m)` for Monte-Carlo with `m` draws.
    fn resolve(&self, n: usize) -> Result<Option<usize>> {
        self.validate()?;
        let mc = || Some(self.draws.unwrap_or_else(|| default_draws(n)));
        match self.mode {
            EstimatorMode::Exact if n > self.exact_limit => Err(CalError::ExactLimitExceeded {
                rows: n,
                limit: self.exact_limit,
            }),
            EstimatorMode::Exact => Ok(None),
            EstimatorMode::Mc => Ok(mc()),
            EstimatorMode::Auto if n <= self.exact_limit => Ok(None),
            EstimatorMode::Auto => Ok(mc()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimatorMeta {
    pub mode: EstimatorMode,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub draws: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub std_errors: Option<IndexMap<String, f64>>,
}

/// Per-feature influences in schema order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InfluenceVector {
    pub features: IndexMap<String, f64>,
    pub estimator: EstimatorMeta,
}

impl InfluenceVector {
    pub fn get(&self, feature: &str) -> Option<f64> {
        self.features.get(feature).copied()
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.features.keys().map(String::as_str)
    }

    /// Fails unless both vectors cover exactly the same features.
    pub fn check_same_features(&self, other: &InfluenceVector) -> Result<()> {
        if self.len() != other.len() || self.names().any(|n| !other.features.contains_key(n)) {
            return Err(CalError::FeatureSetMismatch(format!(
                "{:?} vs {:?}",
                self.names().collect::<Vec<_>>(),
                other.names().collect::<Vec<_>>()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub estimate: f64,
    pub std_error: f64,
}

impl McEstimate {
    fn from_hits(hits: usize, draws: usize) -> Self {
        let p = hits as f64 / draws as f64;
        McEstimate {
            estimate: p,
            std_error: (p * (1.0 - p) / draws as f64).sqrt(),
        }
    }
}

/// Counterfactual-pair estimation mode for [`cf_disagreement`].
#[derive(Debug)]
pub enum PairMode<'a> {
    Exact { limit: usize },
    MonteCarlo { draws: usize, rng: &'a mut Rng },
}

impl PairMode<'_> {
    pub fn exact() -> Self {
        PairMode::Exact {
            limit: DEFAULT_EXACT_LIMIT,
        }
    }
}

fn check_exact(d: &Dataset, limit: usize) -> Result<()> {
    if d.len() > limit {
        return Err(CalError::ExactLimitExceeded { rows: d.len(), limit });
    }
    Ok(())
}

/// Number of `(i, j)` pairs with `h(x_i) != h(x_i with f <- x_j[f])`.
/// Source rows sharing a value are grouped, which leaves the count exact.
fn exact_flips<C: Classify + ?Sized>(h: &C, d: &Dataset, fi: usize, base: &[u8]) -> u64 {
    let values = d.value_counts(fi);
    if values.len() < 2 {
        return 0;
    }
    (0..d.len())
        .into_par_iter()
        .map_init(Vec::new, |buf, i| {
            let row = d.row(i);
            let mut flips = 0u64;
            for &(v, count) in &values {
                if v == row[fi] {
                    continue;
                }
                substitute(row, fi, v, buf);
                if h.classify(buf) != base[i] {
                    flips += count;
                }
            }
            flips
        })
        .sum()
}

fn mc_flips<C: Classify + ?Sized>(h: &C, d: &Dataset, fi: usize, base: &[u8], draws: usize, rng: &mut Rng) -> usize {
    let mut buf = Vec::with_capacity(d.n_features());
    let mut hits = 0;
    for _ in 0..draws {
        let (i, j) = draw_pair(rng, d.len());
        let v = d.value(j, fi);
        let row = d.row(i);
        if v == row[fi] {
            continue;
        }
        substitute(row, fi, v, &mut buf);
        if h.classify(&buf) != base[i] {
            hits += 1;
        }
    }
    hits
}

fn base_predictions<C: Classify + ?Sized>(h: &C, d: &Dataset) -> Vec<u8> {
    d.rows().map(|r| h.classify(r)).collect()
}

/// Exact auQII over the empirical distribution (`N <= DEFAULT_EXACT_LIMIT`).
pub fn auqii_exact<C: Classify + ?Sized>(h: &C, d: &Dataset, feature: &str) -> Result<f64> {
    auqii_exact_with_limit(h, d, feature, DEFAULT_EXACT_LIMIT)
}

pub fn auqii_exact_with_limit<C: Classify + ?Sized>(h: &C, d: &Dataset, feature: &str, limit: usize) -> Result<f64> {
    h.check_schema(d.schema())?;
    let fi = d.schema().feature_index(feature)?;
    check_exact(d, limit)?;
    let n = d.len() as f64;
    Ok(exact_flips(h, d, fi, &base_predictions(h, d)) as f64 / (n * n))
}

pub fn auqii_mc<C: Classify + ?Sized>(h: &C, d: &Dataset, feature: &str, draws: usize, rng: &mut Rng) -> Result<McEstimate> {
    h.check_schema(d.schema())?;
    let fi = d.schema().feature_index(feature)?;
    if draws == 0 {
        return Err(CalError::InvalidArgument("draws must be >= 1".into()));
    }
    let hits = mc_flips(h, d, fi, &base_predictions(h, d), draws, rng);
    Ok(McEstimate::from_hits(hits, draws))
}

/// Influence of every schema feature. Monte-Carlo streams are derived per
/// feature index from `seed`, so the result does not depend on evaluation
/// order and features run in parallel.
pub fn influence_vector<C: Classify + ?Sized>(
    h: &C,
    d: &Dataset,
    settings: &EstimatorSettings,
    seed: u64,
) -> Result<InfluenceVector> {
    h.check_schema(d.schema())?;
    let draws = settings.resolve(d.len())?;
    let base = base_predictions(h, d);
    let n = d.len() as f64;
    let results: Vec<(f64, f64)> = (0..d.n_features())
        .into_par_iter()
        .map(|fi| match draws {
            None => (exact_flips(h, d, fi, &base) as f64 / (n * n), 0.0),
            Some(m) => {
                let mut rng = seed::rng(seed::derive_indexed(seed, streams::FEATURE, fi as u64));
                let est = McEstimate::from_hits(mc_flips(h, d, fi, &base, m, &mut rng), m);
                (est.estimate, est.std_error)
            }
        })
        .collect();
    let names: Vec<String> = d.schema().names().map(str::to_string).collect();
    let features = names.iter().cloned().zip(results.iter().map(|r| r.0)).collect();
    let estimator = match draws {
        None => EstimatorMeta {
            mode: EstimatorMode::Exact,
            draws: None,
            std_errors: None,
        },
        Some(m) => EstimatorMeta {
            mode: EstimatorMode::Mc,
            draws: Some(m),
            std_errors: Some(names.into_iter().zip(results.iter().map(|r| r.1)).collect()),
        },
    };
    Ok(InfluenceVector { features, estimator })
}

/// Probability over counterfactual pairs that `h` and `h2` disagree on the
/// modified point.
pub fn cf_disagreement<A, B>(h: &A, h2: &B, d: &Dataset, feature: &str, mode: PairMode<'_>) -> Result<f64>
where
    A: Classify + ?Sized,
    B: Classify + ?Sized,
{
    h.check_schema(d.schema())?;
    h2.check_schema(d.schema())?;
    let fi = d.schema().feature_index(feature)?;
    match mode {
        PairMode::Exact { limit } => {
            check_exact(d, limit)?;
            let values = d.value_counts(fi);
            let total: u64 = (0..d.len())
                .into_par_iter()
                .map_init(Vec::new, |buf, i| {
                    let mut diff = 0u64;
                    for &(v, count) in &values {
                        substitute(d.row(i), fi, v, buf);
                        if h.classify(buf) != h2.classify(buf) {
                            diff += count;
                        }
                    }
                    diff
                })
                .sum();
            let n = d.len() as f64;
            Ok(total as f64 / (n * n))
        }
        PairMode::MonteCarlo { draws, rng } => {
            if draws == 0 {
                return Err(CalError::InvalidArgument("draws must be >= 1".into()));
            }
            let mut buf = Vec::new();
            let mut diff = 0usize;
            for _ in 0..draws {
                let (i, j) = draw_pair(rng, d.len());
                substitute(d.row(i), fi, d.value(j, fi), &mut buf);
                if h.classify(&buf) != h2.classify(&buf) {
                    diff += 1;
                }
            }
            Ok(diff as f64 / draws as f64)
        }
    }
}

/// Mean squared difference between two influence vectors over their
/// (identical) feature sets.
pub fn influence_mse(a: &InfluenceVector, b: &InfluenceVector) -> Result<f64> {
    a.check_same_features(b)?;
    if a.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = a
        .features
        .iter()
        .map(|(name, &v)| {
            let w = b.features[name.as_str()];
            (v - w) * (v - w)
        })
        .sum();
    Ok(sum / a.len() as f64)
}
