use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{DecisionTree, ForestParams};
use crate::data::Dataset;
use crate::seed::{self, streams};

/// Majority vote over CART trees; a tied vote predicts 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RandomForest {
    trees: Vec<DecisionTree>,
}

impl RandomForest {
    pub fn from_trees(trees: Vec<DecisionTree>) -> Self {
        RandomForest { trees }
    }

    /// Each tree gets its own stream derived from `(seed, tree index)`, so
    /// the forest is identical however the trees are scheduled.
    pub fn fit(d: &Dataset, params: &ForestParams, seed: u64) -> Self {
        let p = d.n_features();
        let m = params
            .features_per_split
            .unwrap_or_else(|| (p as f64).sqrt().ceil() as usize)
            .clamp(1, p);
        let tree_params = params.tree_params();
        let n = d.len();
        let trees = (0..params.n_trees)
            .into_par_iter()
            .map(|t| {
                let mut rng = seed::rng(seed::derive_indexed(seed, streams::TREE, t as u64));
                let mut idx: Vec<usize> = if params.bootstrap {
                    (0..n).map(|_| rng.gen_range(0..n)).collect()
                } else {
                    (0..n).collect()
                };
                DecisionTree::fit_sampled(d, &tree_params, &mut idx, Some((m, &mut rng)))
            })
            .collect();
        RandomForest { trees }
    }

    pub fn trees(&self) -> &[DecisionTree] {
        &self.trees
    }

    #[inline]
    pub fn predict(&self, row: &[f64]) -> u8 {
        let ones = self.trees.iter().filter(|t| t.predict(row) == 1).count();
        u8::from(2 * ones > self.trees.len())
    }
}
