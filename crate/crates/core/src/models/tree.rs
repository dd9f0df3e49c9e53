//! CART classification trees.
//!
//! Numeric splits send `x <= threshold` left, with thresholds at midpoints
//! between consecutive distinct values. Categorical splits are one-vs-rest:
//! `x == category` goes left. Among equally good splits the lowest feature
//! index wins, then the lowest threshold (or category index).

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use super::TreeParams;
use crate::data::Dataset;
use crate::seed::Rng;

const SCORE_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    Gini,
    Entropy,
}

impl Criterion {
    fn impurity(self, c0: usize, c1: usize) -> f64 {
        let n = (c0 + c1) as f64;
        if n == 0.0 {
            return 0.0;
        }
        let p0 = c0 as f64 / n;
        let p1 = c1 as f64 / n;
        match self {
            Criterion::Gini => 1.0 - p0 * p0 - p1 * p1,
            Criterion::Entropy => {
                let h = |p: f64| if p > 0.0 { -p * p.log2() } else { 0.0 };
                h(p0) + h(p1)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", content = "value", rename_all = "snake_case")]
pub enum SplitTest {
    LessEq(f64),
    Equal(f64),
}

impl SplitTest {
    #[inline]
    pub fn goes_left(&self, v: f64) -> bool {
        match *self {
            SplitTest::LessEq(t) => v <= t,
            SplitTest::Equal(c) => v == c,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Node {
    Leaf {
        label: u8,
    },
    Split {
        feature: usize,
        test: SplitTest,
        left: usize,
        right: usize,
    },
}

/// Arena of nodes; node 0 is the root.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecisionTree {
    nodes: Vec<Node>,
}

impl DecisionTree {
    pub fn leaf(label: u8) -> Self {
        DecisionTree {
            nodes: vec![Node::Leaf { label }],
        }
    }

    /// One split with a leaf on each side.
    pub fn stump(feature: usize, test: SplitTest, left: u8, right: u8) -> Self {
        DecisionTree {
            nodes: vec![
                Node::Split {
                    feature,
                    test,
                    left: 1,
                    right: 2,
                },
                Node::Leaf { label: left },
                Node::Leaf { label: right },
            ],
        }
    }

    /// Build from an explicit node arena. Children must point forward and
    /// every index must be in range.
    pub fn from_nodes(nodes: Vec<Node>) -> Option<Self> {
        if nodes.is_empty() {
            return None;
        }
        for (i, n) in nodes.iter().enumerate() {
            if let Node::Split { left, right, .. } = *n {
                if left <= i || right <= i || left >= nodes.len() || right >= nodes.len() {
                    return None;
                }
            }
            if let Node::Leaf { label } = *n {
                if label > 1 {
                    return None;
                }
            }
        }
        Some(DecisionTree { nodes })
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    /// Length of the longest root-to-leaf path, in splits.
    pub fn depth(&self) -> usize {
        fn go(nodes: &[Node], i: usize) -> usize {
            match nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + go(nodes, left).max(go(nodes, right)),
            }
        }
        go(&self.nodes, 0)
    }

    /// Index of the leaf reached by `row`.
    #[inline]
    pub fn leaf_index(&self, row: &[f64]) -> usize {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Leaf { .. } => return i,
                Node::Split {
                    feature,
                    test,
                    left,
                    right,
                } => {
                    i = if test.goes_left(row[feature]) { left } else { right };
                }
            }
        }
    }

    #[inline]
    pub fn predict(&self, row: &[f64]) -> u8 {
        match self.nodes[self.leaf_index(row)] {
            Node::Leaf { label } => label,
            Node::Split { .. } => unreachable!(),
        }
    }

    pub fn fit(d: &Dataset, params: &TreeParams) -> Self {
        let mut idx: Vec<usize> = (0..d.len()).collect();
        TreeBuilder::new(d, params, None).build(&mut idx)
    }

    /// Fit on `idx` (duplicates allowed), sampling `m` candidate features
    /// per split from `rng` when given.
    pub(crate) fn fit_sampled(
        d: &Dataset,
        params: &TreeParams,
        idx: &mut [usize],
        features: Option<(usize, &mut Rng)>,
    ) -> Self {
        TreeBuilder::new(d, params, features).build(idx)
    }
}

struct BestSplit {
    score: f64,
    feature: usize,
    test: SplitTest,
}

struct TreeBuilder<'a> {
    data: &'a Dataset,
    categorical: Vec<Option<usize>>,
    params: &'a TreeParams,
    sampler: Option<(usize, &'a mut Rng)>,
    nodes: Vec<Node>,
    scratch: Vec<(f64, u8)>,
}

impl<'a> TreeBuilder<'a> {
    fn new(data: &'a Dataset, params: &'a TreeParams, sampler: Option<(usize, &'a mut Rng)>) -> Self {
        TreeBuilder {
            data,
            categorical: data.schema().features().iter().map(|f| f.cardinality()).collect(),
            params,
            sampler,
            nodes: Vec::new(),
            scratch: Vec::new(),
        }
    }

    fn build(mut self, idx: &mut [usize]) -> DecisionTree {
        if idx.is_empty() {
            return DecisionTree::leaf(0);
        }
        self.grow(idx, 0);
        DecisionTree { nodes: self.nodes }
    }

    fn counts(&self, idx: &[usize]) -> (usize, usize) {
        let c1 = idx.iter().filter(|&&i| self.data.label(i) == 1).count();
        (idx.len() - c1, c1)
    }

    fn grow(&mut self, idx: &mut [usize], depth: usize) -> usize {
        let me = self.nodes.len();
        let (c0, c1) = self.counts(idx);
        let label = u8::from(c1 > c0);
        self.nodes.push(Node::Leaf { label });

        let n = idx.len();
        if depth >= self.params.max_depth || c0 == 0 || c1 == 0 || n < 2 * self.params.min_leaf {
            return me;
        }
        let parent = self.params.criterion.impurity(c0, c1);
        let Some(best) = self.best_split(idx) else {
            return me;
        };
        if best.score >= parent - SCORE_EPS {
            return me;
        }

        // Stable partition keeps child order deterministic.
        let (mut left, mut right): (Vec<usize>, Vec<usize>) = idx
            .iter()
            .partition(|&&i| best.test.goes_left(self.data.value(i, best.feature)));
        let l = self.grow(&mut left, depth + 1);
        let r = self.grow(&mut right, depth + 1);
        self.nodes[me] = Node::Split {
            feature: best.feature,
            test: best.test,
            left: l,
            right: r,
        };
        me
    }

    fn candidate_features(&mut self) -> Vec<usize> {
        let p = self.data.n_features();
        match self.sampler.as_mut() {
            Some((m, rng)) if *m < p => {
                let mut f = sample(*rng, p, *m).into_vec();
                f.sort_unstable();
                f
            }
            _ => (0..p).collect(),
        }
    }

    fn best_split(&mut self, idx: &[usize]) -> Option<BestSplit> {
        let mut best: Option<BestSplit> = None;
        for feature in self.candidate_features() {
            let found = match self.categorical[feature] {
                Some(k) => self.best_categorical(idx, feature, k),
                None => self.best_numeric(idx, feature),
            };
            if let Some(c) = found {
                if best.as_ref().is_none_or(|b| c.score < b.score - SCORE_EPS) {
                    best = Some(c);
                }
            }
        }
        best
    }

    fn weighted(&self, l0: usize, l1: usize, r0: usize, r1: usize) -> f64 {
        let nl = (l0 + l1) as f64;
        let nr = (r0 + r1) as f64;
        let c = self.params.criterion;
        (nl * c.impurity(l0, l1) + nr * c.impurity(r0, r1)) / (nl + nr)
    }

    fn best_numeric(&mut self, idx: &[usize], feature: usize) -> Option<BestSplit> {
        let mut pairs = std::mem::take(&mut self.scratch);
        pairs.clear();
        pairs.extend(idx.iter().map(|&i| (self.data.value(i, feature), self.data.label(i))));
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let n = pairs.len();
        let total1 = pairs.iter().filter(|p| p.1 == 1).count();
        let total0 = n - total1;
        let min_leaf = self.params.min_leaf;

        let mut best: Option<BestSplit> = None;
        let (mut l0, mut l1) = (0usize, 0usize);
        for p in 0..n - 1 {
            if pairs[p].1 == 1 {
                l1 += 1;
            } else {
                l0 += 1;
            }
            let (v, next) = (pairs[p].0, pairs[p + 1].0);
            if v == next {
                continue;
            }
            let nl = p + 1;
            if nl < min_leaf || n - nl < min_leaf {
                continue;
            }
            let score = self.weighted(l0, l1, total0 - l0, total1 - l1);
            if best.as_ref().is_none_or(|b| score < b.score - SCORE_EPS) {
                let mut t = v + (next - v) / 2.0;
                if !(t >= v && t < next) {
                    t = v;
                }
                best = Some(BestSplit {
                    score,
                    feature,
                    test: SplitTest::LessEq(t),
                });
            }
        }
        self.scratch = pairs;
        best
    }

    fn best_categorical(&self, idx: &[usize], feature: usize, k: usize) -> Option<BestSplit> {
        let mut counts = vec![(0usize, 0usize); k];
        for &i in idx {
            let c = self.data.value(i, feature) as usize;
            if self.data.label(i) == 1 {
                counts[c].1 += 1;
            } else {
                counts[c].0 += 1;
            }
        }
        let (t0, t1) = counts.iter().fold((0, 0), |a, c| (a.0 + c.0, a.1 + c.1));
        let n = t0 + t1;
        let mut best: Option<BestSplit> = None;
        for (c, &(c0, c1)) in counts.iter().enumerate() {
            let nl = c0 + c1;
            if nl < self.params.min_leaf || n - nl < self.params.min_leaf {
                continue;
            }
            let score = self.weighted(c0, c1, t0 - c0, t1 - c1);
            if best.as_ref().is_none_or(|b| score < b.score - SCORE_EPS) {
                best = Some(BestSplit {
                    score,
                    feature,
                    test: SplitTest::Equal(c as f64),
                });
            }
        }
        best
    }
}
