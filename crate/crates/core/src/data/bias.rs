use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{draw_pair, substitute, Dataset, Predicate};
use crate::error::{CalError, Result};
use crate::models::{Criterion, DecisionTree, TreeParams};
use crate::seed::{self, streams, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BiasConfig {
    pub tree_depth: usize,
    pub min_leaf: usize,
    pub min_excluded: f64,
    pub max_excluded: f64,
    pub retries: usize,
}

impl Default for BiasConfig {
    fn default() -> Self {
        BiasConfig {
            tree_depth: 3,
            min_leaf: 5,
            min_excluded: 0.05,
            max_excluded: 0.5,
            retries: 20,
        }
    }
}

impl BiasConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tree_depth == 0 || self.min_leaf == 0 || self.retries == 0 {
            return Err(CalError::InvalidArgument(
                "bias tree_depth, min_leaf and retries must be >= 1".into(),
            ));
        }
        if !(0.0 < self.min_excluded && self.min_excluded < self.max_excluded && self.max_excluded < 1.0) {
            return Err(CalError::InvalidArgument(format!(
                "bias bounds ({}, {}) must satisfy 0 < min < max < 1",
                self.min_excluded, self.max_excluded
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct BiasOutcome {
    pub theta: Predicate,
    /// Rows of the input that do not satisfy `theta`.
    pub biased: Dataset,
    /// Indices (into the input) of the kept rows.
    pub kept: Vec<usize>,
    pub excluded_fraction: f64,
    pub attempts: usize,
}

/// Fit a shallow tree to uniformly random labels and use its positive
/// region as the exclusion predicate. Attempts use derived seeds until the
/// excluded fraction lands inside the configured bounds.
pub fn induce_bias(d: &Dataset, cfg: &BiasConfig, seed: u64) -> Result<BiasOutcome> {
    cfg.validate()?;
    let params = TreeParams {
        max_depth: cfg.tree_depth,
        min_leaf: cfg.min_leaf,
        criterion: Criterion::Gini,
    };
    for attempt in 0..cfg.retries {
        let mut rng = seed::rng(seed::derive_indexed(seed, streams::BIAS, attempt as u64));
        let labels: Vec<u8> = (0..d.len()).map(|_| u8::from(rng.gen_bool(0.5))).collect();
        let tree = DecisionTree::fit(&d.relabel(labels)?, &params);
        let theta = Predicate::from_tree(tree);
        let kept: Vec<usize> = (0..d.len()).filter(|&i| !theta.satisfied(d.row(i))).collect();
        let excluded_fraction = 1.0 - kept.len() as f64 / d.len() as f64;
        if excluded_fraction >= cfg.min_excluded && excluded_fraction <= cfg.max_excluded {
            return Ok(BiasOutcome {
                biased: d.subset(&kept)?,
                theta,
                kept,
                excluded_fraction,
                attempts: attempt + 1,
            });
        }
    }
    Err(CalError::BiasInduction {
        attempts: cfg.retries,
    })
}

#[derive(Debug)]
pub enum StatsMode<'a> {
    Exact,
    MonteCarlo { draws: usize, rng: &'a mut Rng },
}

/// `(epsilon, gamma)`: the predicate's mass under the data, and the mass of
/// counterfactual pairs `(x, x with f <- u)` where the modified point
/// satisfies the predicate but the original does not.
pub fn predicate_stats(d: &Dataset, theta: &Predicate, feature: &str, mode: StatsMode<'_>) -> Result<(f64, f64)> {
    let fi = d.schema().feature_index(feature)?;
    let n = d.len();
    let inside: Vec<bool> = d.rows().map(|r| theta.satisfied(r)).collect();
    let epsilon = inside.iter().filter(|&&s| s).count() as f64 / n as f64;
    let mut buf = Vec::with_capacity(d.n_features());
    let gamma = match mode {
        StatsMode::Exact => {
            let values = d.value_counts(fi);
            let mut hits: u64 = 0;
            for (i, row) in d.rows().enumerate() {
                if inside[i] {
                    continue;
                }
                for &(v, count) in &values {
                    substitute(row, fi, v, &mut buf);
                    if theta.satisfied(&buf) {
                        hits += count;
                    }
                }
            }
            hits as f64 / (n as f64 * n as f64)
        }
        StatsMode::MonteCarlo { draws, rng } => {
            if draws == 0 {
                return Err(CalError::InvalidArgument("draws must be >= 1".into()));
            }
            let mut hits = 0usize;
            for _ in 0..draws {
                let (base, source) = draw_pair(rng, n);
                if inside[base] {
                    continue;
                }
                substitute(d.row(base), fi, d.value(source, fi), &mut buf);
                if theta.satisfied(&buf) {
                    hits += 1;
                }
            }
            hits as f64 / draws as f64
        }
    };
    Ok((epsilon, gamma))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::fixtures::{d4, d4_schema};
    use crate::synth::SynthKind;

    #[test]
    fn stats_for_constant_predicates() {
        let d = d4();
        assert_eq!(predicate_stats(&d, &Predicate::constant(false), "a", StatsMode::Exact).unwrap(), (0.0, 0.0));
        assert_eq!(predicate_stats(&d, &Predicate::constant(true), "a", StatsMode::Exact).unwrap(), (1.0, 0.0));
    }

    #[test]
    fn stats_for_corner_predicate_on_d4() {
        // Enumerating the 16 (base, source) pairs: only bases (0,1) with a
        // substituted a = 1 land in the corner, 2 of 16 pairs.
        let d = d4();
        let phi = Predicate::parse(&d4_schema(), "a=1,b=1").unwrap();
        let (eps, gamma) = predicate_stats(&d, &phi, "a", StatsMode::Exact).unwrap();
        assert_eq!(eps, 0.25);
        assert_eq!(gamma, 0.125);
        let mut rng = seed::rng(4);
        let (eps_mc, gamma_mc) = predicate_stats(
            &d,
            &phi,
            "a",
            StatsMode::MonteCarlo { draws: 40_000, rng: &mut rng },
        )
        .unwrap();
        assert_eq!(eps_mc, 0.25);
        let se = (0.125f64 * 0.875 / 40_000.0).sqrt();
        assert!((gamma_mc - 0.125).abs() < 4.0 * se);
        assert!(predicate_stats(&d, &phi, "q", StatsMode::Exact).is_err());
    }

    #[test]
    fn bias_within_bounds_and_sound() {
        let d = SynthKind::Adult.generate(1000, 9);
        let cfg = BiasConfig::default();
        let out = induce_bias(&d, &cfg, 17).unwrap();
        assert!(out.excluded_fraction >= 0.05 && out.excluded_fraction <= 0.5);
        assert!(out.biased.rows().all(|r| !out.theta.satisfied(r)));
        let excluded = d.rows().filter(|r| out.theta.satisfied(r)).count();
        assert_eq!(d.len(), out.biased.len() + excluded);
        assert!(out.theta.tree().depth() <= cfg.tree_depth);

        let again = induce_bias(&d, &cfg, 17).unwrap();
        assert_eq!(again.theta, out.theta);
        assert_eq!(again.biased, out.biased);
    }

    #[test]
    fn bias_fails_when_bounds_unreachable() {
        // Too few rows to ever split, so the tree is a single leaf and
        // excludes either nothing or everything.
        let d = d4();
        let cfg = BiasConfig {
            min_leaf: 5,
            retries: 3,
            ..BiasConfig::default()
        };
        assert!(matches!(induce_bias(&d, &cfg, 1), Err(CalError::BiasInduction { attempts: 3 })));
        let bad = BiasConfig {
            min_excluded: 0.6,
            ..BiasConfig::default()
        };
        assert!(induce_bias(&d, &bad, 1).is_err());
    }
}
