use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{CalError, Result};
use crate::seed::Rng;

/// Where a counterfactual row came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub base_row: usize,
    pub substituted_value: f64,
}

/// `k` draws from the counterfactual distribution of one feature: base rows
/// from the data with that feature replaced by an independent draw from its
/// empirical marginal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CfBatch {
    pub feature: String,
    pub rows: Vec<Vec<f64>>,
    pub provenance: Vec<Provenance>,
}

impl CfBatch {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// One (base row, marginal source row) pair, base drawn first. Every
/// counterfactual estimator in the crate consumes randomness through this.
pub fn draw_pair(rng: &mut Rng, n: usize) -> (usize, usize) {
    let base = rng.gen_range(0..n);
    let source = rng.gen_range(0..n);
    (base, source)
}

/// Copy `row` into `out` with coordinate `feature` replaced by `value`.
pub fn substitute(row: &[f64], feature: usize, value: f64, out: &mut Vec<f64>) {
    out.clear();
    out.extend_from_slice(row);
    out[feature] = value;
}

pub fn sample_counterfactual(d: &Dataset, feature: &str, k: usize, rng: &mut Rng) -> Result<CfBatch> {
    let fi = d.schema().feature_index(feature)?;
    if k == 0 {
        return Err(CalError::InvalidArgument("batch size must be at least 1".into()));
    }
    let mut rows = Vec::with_capacity(k);
    let mut provenance = Vec::with_capacity(k);
    for _ in 0..k {
        let (base, source) = draw_pair(rng, d.len());
        let value = d.value(source, fi);
        let mut row = Vec::new();
        substitute(d.row(base), fi, value, &mut row);
        rows.push(row);
        provenance.push(Provenance {
            base_row: base,
            substituted_value: value,
        });
    }
    Ok(CfBatch {
        feature: feature.to_string(),
        rows,
        provenance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::fixtures::d4;
    use crate::seed;

    #[test]
    fn rows_differ_from_base_only_at_feature() {
        let d = d4();
        let batch = sample_counterfactual(&d, "a", 200, &mut seed::rng(3)).unwrap();
        assert_eq!(batch.len(), 200);
        for (row, p) in batch.rows.iter().zip(&batch.provenance) {
            let base = d.row(p.base_row);
            assert_eq!(row[1], base[1]);
            assert_eq!(row[0], p.substituted_value);
        }
    }

    #[test]
    fn constant_column_reproduces_base_rows() {
        let d = d4().subset(&[2, 3]).unwrap();
        let batch = sample_counterfactual(&d, "a", 50, &mut seed::rng(1)).unwrap();
        for (row, p) in batch.rows.iter().zip(&batch.provenance) {
            assert_eq!(row.as_slice(), d.row(p.base_row));
        }
    }

    #[test]
    fn substituted_marginal_matches_column() {
        // Column a of D4 is half ones; k = 10 N^2 draws, 4 sigma band.
        let d = d4();
        let k = 160;
        let batch = sample_counterfactual(&d, "a", k, &mut seed::rng(11)).unwrap();
        let ones = batch.provenance.iter().filter(|p| p.substituted_value == 1.0).count();
        let sigma = (k as f64 * 0.25).sqrt();
        assert!((ones as f64 - k as f64 / 2.0).abs() <= 4.0 * sigma, "ones = {ones}");
        let big = sample_counterfactual(&d, "a", 100_000, &mut seed::rng(12)).unwrap();
        let ones = big.provenance.iter().filter(|p| p.substituted_value == 1.0).count();
        assert!((ones as f64 / 100_000.0 - 0.5).abs() < 0.01);
    }

    #[test]
    fn unknown_feature_and_zero_k_rejected() {
        let d = d4();
        assert!(matches!(
            sample_counterfactual(&d, "zzz", 1, &mut seed::rng(0)),
            Err(CalError::UnknownFeature(_))
        ));
        assert!(sample_counterfactual(&d, "a", 0, &mut seed::rng(0)).is_err());
    }

    #[test]
    fn same_seed_same_batch() {
        let d = d4();
        let a = sample_counterfactual(&d, "b", 20, &mut seed::rng(9)).unwrap();
        let b = sample_counterfactual(&d, "b", 20, &mut seed::rng(9)).unwrap();
        assert_eq!(a, b);
    }
}
