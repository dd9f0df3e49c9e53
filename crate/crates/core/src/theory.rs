//! Executable forms of two covariate-shift results for causal testing.
//!
//! [`check_theorem2`] verifies that two classifiers agreeing on both the data
//! and the counterfactual distribution have close influences:
//! `|iota_f(h) - iota_f(h')| <= err(h, h', X) + err(h, h', X_-f U_f)`. With
//! exact estimators both sides are sums over the same `N^2` pairs, so the
//! bound holds to rounding.
//!
//! [`witness_search`] exhibits the converse problem: given a region `phi`
//! that is rare in the data but reachable by counterfactuals, it builds
//! table functions that agree with `h` outside `phi` (so they are
//! `epsilon`-close on-distribution) and relabels the region to push the
//! influence up or down.

use std::collections::HashMap;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{predicate_stats, substitute, Dataset, Predicate, StatsMode};
use crate::error::{CalError, Result};
use crate::influence::{auqii_exact_with_limit, cf_disagreement, PairMode, DEFAULT_EXACT_LIMIT};
use crate::models::{disagreement, Classify};
use crate::seed::{self, streams};

pub const BOUND_SLACK: f64 = 1e-12;
pub const DEFAULT_SUPPORT_LIMIT: usize = 4096;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Theorem2Check {
    pub feature: String,
    pub iota_h: f64,
    pub iota_h2: f64,
    pub lhs: f64,
    pub eps1: f64,
    pub eps2: f64,
    pub holds: bool,
}

pub fn check_theorem2<A, B>(h: &A, h2: &B, d: &Dataset, feature: &str) -> Result<Theorem2Check>
where
    A: Classify + ?Sized,
    B: Classify + ?Sized,
{
    let iota_h = auqii_exact_with_limit(h, d, feature, DEFAULT_EXACT_LIMIT)?;
    let iota_h2 = auqii_exact_with_limit(h2, d, feature, DEFAULT_EXACT_LIMIT)?;
    let eps1 = disagreement(h, h2, d)?;
    let eps2 = cf_disagreement(h, h2, d, feature, PairMode::exact())?;
    let lhs = (iota_h - iota_h2).abs();
    Ok(Theorem2Check {
        feature: feature.to_string(),
        iota_h,
        iota_h2,
        lhs,
        eps1,
        eps2,
        holds: lhs <= eps1 + eps2 + BOUND_SLACK,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WitnessConfig {
    pub trials: usize,
    /// Enumerate every relabeling when the region has at most this many points.
    pub exhaustive_limit: usize,
    pub support_limit: usize,
}

impl Default for WitnessConfig {
    fn default() -> Self {
        WitnessConfig {
            trials: 500,
            exhaustive_limit: 16,
            support_limit: DEFAULT_SUPPORT_LIMIT,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WitnessEntry {
    pub row: Vec<f64>,
    pub label: u8,
}

/// A table function: the listed region points take their table label,
/// every other point takes the base classifier's label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Witness {
    /// Trial index (or relabeling mask when exhaustive) that produced it.
    pub trial: u64,
    pub iota: f64,
    /// On-distribution disagreement with the base classifier.
    pub disagreement: f64,
    pub within_epsilon: bool,
    pub table: Vec<WitnessEntry>,
}

impl Witness {
    /// The witness as a classifier over the whole feature space.
    pub fn classifier<'a, C: Classify + ?Sized>(&'a self, base: &'a C, phi: &'a Predicate) -> WitnessFn<'a, C> {
        WitnessFn {
            base,
            phi,
            table: self.table.iter().map(|e| (row_key(&e.row), e.label)).collect(),
        }
    }
}

pub struct WitnessFn<'a, C: ?Sized> {
    base: &'a C,
    phi: &'a Predicate,
    table: HashMap<Vec<u64>, u8>,
}

impl<C: Classify + ?Sized> Classify for WitnessFn<'_, C> {
    fn classify(&self, row: &[f64]) -> u8 {
        if self.phi.satisfied(row) {
            if let Some(&l) = self.table.get(&row_key(row)) {
                return l;
            }
        }
        self.base.classify(row)
    }

    fn check_schema(&self, schema: &crate::data::FeatureSchema) -> Result<()> {
        self.base.check_schema(schema)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    pub feature: String,
    pub epsilon_hat: f64,
    pub gamma_hat: f64,
    /// Number of distinct counterfactual-grid points inside the region.
    pub region_points: usize,
    pub exhaustive: bool,
    pub candidates: u64,
    pub witness_high: Witness,
    pub witness_low: Witness,
    /// `min(iota_high, 1 - iota_low)`; the region makes the influence
    /// `(epsilon, gamma/2)`-unconstrained when this reaches `bound_rhs`.
    pub bound_lhs: f64,
    /// `gamma_hat / 2`.
    pub bound_rhs: f64,
    pub holds: bool,
}

fn row_key(row: &[f64]) -> Vec<u64> {
    row.iter().map(|v| (v + 0.0).to_bits()).collect()
}

/// Distinct points of the substitution grid `{x_i with f <- v}` and the
/// integer pair weights between them.
struct Grid {
    points: Vec<Vec<f64>>,
    in_region: Vec<bool>,
    base_label: Vec<u8>,
    /// `(base point, counterfactual point, weight)` with distinct endpoints.
    pairs: Vec<(u32, u32, u64)>,
    /// Distinct data rows: `(point id, multiplicity)`.
    rows: Vec<(u32, u64)>,
    n_sq: u64,
}

impl Grid {
    fn build<C: Classify + ?Sized>(h: &C, d: &Dataset, phi: &Predicate, fi: usize, support_limit: usize) -> Result<Grid> {
        let mut ids: HashMap<Vec<u64>, u32> = HashMap::new();
        let mut points: Vec<Vec<f64>> = Vec::new();
        let mut intern = |row: &[f64], points: &mut Vec<Vec<f64>>| -> u32 {
            *ids.entry(row_key(row)).or_insert_with(|| {
                points.push(row.to_vec());
                (points.len() - 1) as u32
            })
        };

        let mut row_counts: Vec<(u32, u64)> = Vec::new();
        let mut seen: HashMap<u32, usize> = HashMap::new();
        for row in d.rows() {
            let id = intern(row, &mut points);
            match seen.get(&id) {
                Some(&slot) => row_counts[slot].1 += 1,
                None => {
                    seen.insert(id, row_counts.len());
                    row_counts.push((id, 1));
                }
            }
        }
        if row_counts.len() > support_limit {
            return Err(CalError::SupportLimitExceeded {
                distinct: row_counts.len(),
                limit: support_limit,
            });
        }

        let values = d.value_counts(fi);
        let mut weights: HashMap<(u32, u32), u64> = HashMap::new();
        let mut buf = Vec::new();
        for &(rid, rc) in &row_counts {
            let base = points[rid as usize].clone();
            for &(v, vc) in &values {
                substitute(&base, fi, v, &mut buf);
                let pid = intern(&buf, &mut points);
                if pid != rid {
                    *weights.entry((rid, pid)).or_insert(0) += rc * vc;
                }
            }
        }
        let mut pairs: Vec<(u32, u32, u64)> = weights.into_iter().map(|((a, b), w)| (a, b, w)).collect();
        pairs.sort_unstable();

        let in_region = points.iter().map(|p| phi.satisfied(p)).collect();
        let base_label = points.iter().map(|p| h.classify(p)).collect();
        let n = d.len() as u64;
        Ok(Grid {
            points,
            in_region,
            base_label,
            pairs,
            rows: row_counts,
            n_sq: n * n,
        })
    }

    fn flips(&self, labels: &[u8]) -> u64 {
        self.pairs
            .iter()
            .filter(|(a, b, _)| labels[*a as usize] != labels[*b as usize])
            .map(|p| p.2)
            .sum()
    }

    /// Rows (with multiplicity) where the candidate differs from `h`.
    fn row_disagreements(&self, labels: &[u8]) -> u64 {
        self.rows
            .iter()
            .filter(|(id, _)| labels[*id as usize] != self.base_label[*id as usize])
            .map(|r| r.1)
            .sum()
    }

    fn candidate(&self, region: &[usize], bits: impl Fn(usize) -> u8) -> Vec<u8> {
        let mut labels = self.base_label.clone();
        for (k, &p) in region.iter().enumerate() {
            labels[p] = bits(k);
        }
        labels
    }
}

/// Search for witnesses that keep `h`'s labels outside `phi` and relabel
/// the region's grid points. Small regions are enumerated exhaustively;
/// larger ones sample `trials` uniform relabelings from streams derived
/// from `(seed, trial)`. Ties keep the lowest trial index.
pub fn witness_search<C: Classify + ?Sized>(
    h: &C,
    d: &Dataset,
    phi: &Predicate,
    feature: &str,
    cfg: &WitnessConfig,
    seed: u64,
) -> Result<TheoryReport> {
    h.check_schema(d.schema())?;
    let fi = d.schema().feature_index(feature)?;
    if cfg.trials == 0 {
        return Err(CalError::InvalidArgument("trials must be >= 1".into()));
    }
    let (epsilon_hat, gamma_hat) = predicate_stats(d, phi, feature, StatsMode::Exact)?;
    let grid = Grid::build(h, d, phi, fi, cfg.support_limit)?;
    let region: Vec<usize> = (0..grid.points.len()).filter(|&p| grid.in_region[p]).collect();

    let exhaustive = region.len() <= cfg.exhaustive_limit.min(30);
    let candidates: u64 = if exhaustive { 1u64 << region.len() } else { cfg.trials as u64 };

    let labels_for = |t: u64| -> Vec<u8> {
        if exhaustive {
            grid.candidate(&region, |k| ((t >> k) & 1) as u8)
        } else {
            let mut rng = seed::rng(seed::derive_indexed(seed, streams::TRIAL, t));
            let bits: Vec<u8> = (0..region.len()).map(|_| u8::from(rng.gen::<bool>())).collect();
            grid.candidate(&region, |k| bits[k])
        }
    };

    let scores: Vec<u64> = (0..candidates)
        .into_par_iter()
        .map(|t| grid.flips(&labels_for(t)))
        .collect();
    let mut high = 0usize;
    let mut low = 0usize;
    for (t, &s) in scores.iter().enumerate() {
        if s > scores[high] {
            high = t;
        }
        if s < scores[low] {
            low = t;
        }
    }

    let n = d.len() as f64;
    let make = |t: usize| -> Witness {
        let labels = labels_for(t as u64);
        let disagreement = grid.row_disagreements(&labels) as f64 / n;
        Witness {
            trial: t as u64,
            iota: scores[t] as f64 / grid.n_sq as f64,
            disagreement,
            within_epsilon: disagreement <= epsilon_hat,
            table: region
                .iter()
                .map(|&p| WitnessEntry {
                    row: grid.points[p].clone(),
                    label: labels[p],
                })
                .collect(),
        }
    };
    let witness_high = make(high);
    let witness_low = make(low);

    // Integer form of min(iota_high, 1 - iota_low) >= gamma / 2.
    let gamma_count: u64 = grid
        .pairs
        .iter()
        .filter(|(a, b, _)| !grid.in_region[*a as usize] && grid.in_region[*b as usize])
        .map(|p| p.2)
        .sum();
    let holds = 2 * scores[high] >= gamma_count && 2 * (grid.n_sq - scores[low]) >= gamma_count;

    Ok(TheoryReport {
        feature: feature.to_string(),
        epsilon_hat,
        gamma_hat,
        region_points: region.len(),
        exhaustive,
        candidates,
        bound_lhs: witness_high.iota.min(1.0 - witness_low.iota),
        bound_rhs: gamma_hat / 2.0,
        witness_high,
        witness_low,
        holds,
    })
}
