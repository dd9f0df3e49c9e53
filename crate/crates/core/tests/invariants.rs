use std::sync::Arc;

use proptest::prelude::*;

use cal_core::data::{sample_counterfactual, Dataset, Feature, FeatureSchema};
use cal_core::influence::{auqii_exact, influence_mse, influence_vector, EstimatorSettings};
use cal_core::models::{train, ModelKind, ModelSpec, Predictor};
use cal_core::seed;
use cal_core::theory::check_theorem2;

fn schema() -> Arc<FeatureSchema> {
    Arc::new(
        FeatureSchema::new(
            vec![Feature::numeric("a"), Feature::numeric("b"), Feature::categorical("c", ["p", "q", "r"])],
            "y",
            "1",
        )
        .unwrap(),
    )
}

fn dataset() -> impl Strategy<Value = Dataset> {
    prop::collection::vec((0u8..5, 0u8..4, 0u8..3, 0u8..2), 2..40).prop_map(|rows| {
        let (x, y) = rows
            .into_iter()
            .map(|(a, b, c, y)| (vec![f64::from(a), f64::from(b), f64::from(c)], y))
            .unzip();
        Dataset::new(schema(), x, y).unwrap()
    })
}

fn model(d: &Dataset, kind: u8, depth: usize, s: u64) -> Predictor {
    let kind = [ModelKind::Linear, ModelKind::Tree, ModelKind::Forest][usize::from(kind % 3)];
    let mut spec = ModelSpec::new(kind);
    spec.hyperparams.tree.max_depth = depth;
    spec.hyperparams.tree.min_leaf = 1;
    spec.hyperparams.forest.n_trees = 3;
    spec.hyperparams.forest.max_depth = depth;
    spec.hyperparams.linear.iterations = 50;
    train(d, &spec, s).unwrap().predictor
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn influences_lie_in_unit_interval(d in dataset(), kind in 0u8..3, depth in 1usize..5, s in any::<u64>()) {
        let h = model(&d, kind, depth, s);
        for settings in [EstimatorSettings::exact(), EstimatorSettings::mc(200)] {
            let v = influence_vector(&h, &d, &settings, s).unwrap();
            prop_assert!(v.features.values().all(|x| (0.0..=1.0).contains(x)));
        }
    }

    #[test]
    fn counterfactual_rows_differ_only_in_the_feature(d in dataset(), fi in 0usize..3, k in 1usize..20, s in any::<u64>()) {
        let name = d.schema().features()[fi].name.clone();
        let b = sample_counterfactual(&d, &name, k, &mut seed::rng(s)).unwrap();
        prop_assert_eq!(b.rows.len(), k);
        for (row, p) in b.rows.iter().zip(&b.provenance) {
            let base = d.row(p.base_row);
            for j in 0..3 {
                if j == fi {
                    prop_assert_eq!(row[j], p.substituted_value);
                    prop_assert!(d.rows().any(|r| r[fi] == p.substituted_value));
                } else {
                    prop_assert_eq!(row[j], base[j]);
                }
            }
        }
    }

    #[test]
    fn mse_ignores_feature_order(d in dataset(), k1 in 0u8..3, k2 in 0u8..3, s in any::<u64>()) {
        let a = influence_vector(&model(&d, k1, 3, s), &d, &EstimatorSettings::exact(), 0).unwrap();
        let b = influence_vector(&model(&d, k2, 2, s ^ 1), &d, &EstimatorSettings::exact(), 0).unwrap();
        let mut reversed = b.clone();
        reversed.features = b.features.iter().rev().map(|(k, v)| (k.clone(), *v)).collect();
        let m = influence_mse(&a, &b).unwrap();
        prop_assert_eq!(m, influence_mse(&a, &reversed).unwrap());
        prop_assert_eq!(m, influence_mse(&b, &a).unwrap());
        prop_assert_eq!(influence_mse(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn theorem2_bound_holds(d in dataset(), k1 in 0u8..3, k2 in 0u8..3, depth in 1usize..5, s in any::<u64>()) {
        let h = model(&d, k1, depth, s);
        let h2 = model(&d, k2, 5 - depth, s.wrapping_add(1));
        for f in ["a", "b", "c"] {
            let c = check_theorem2(&h, &h2, &d, f).unwrap();
            prop_assert!(c.holds, "{:?}", c);
            prop_assert_eq!(c.iota_h, auqii_exact(&h, &d, f).unwrap());
        }
    }
}
