//! Binary classifiers trained by empirical risk minimization.
//!
//! Three families share one [`Predictor`] wrapper: logistic regression
//! trained by full-batch gradient descent, CART decision trees, and random
//! forests of CART trees. Training is a pure function of the dataset, the
//! hyperparameters and the seed.

mod forest;
mod linear;
mod tree;

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, FeatureSchema};
use crate::error::{CalError, Result};

pub use forest::RandomForest;
pub use linear::{Encoder, LinearModel};
pub use tree::{Criterion, DecisionTree, Node, SplitTest};

pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Anything that maps a schema-conforming row to a hard 0/1 label.
pub trait Classify: Sync {
    fn classify(&self, row: &[f64]) -> u8;

    /// Reject datasets whose schema this classifier was not built for.
    fn check_schema(&self, _schema: &FeatureSchema) -> Result<()> {
        Ok(())
    }
}

/// Adapter turning a closure into a [`Classify`].
pub struct FnClassifier<F>(pub F);

impl<F: Fn(&[f64]) -> u8 + Sync> Classify for FnClassifier<F> {
    fn classify(&self, row: &[f64]) -> u8 {
        (self.0)(row)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Linear,
    Tree,
    Forest,
}

impl std::str::FromStr for ModelKind {
    type Err = CalError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ModelKind::Linear),
            "tree" => Ok(ModelKind::Tree),
            "forest" => Ok(ModelKind::Forest),
            other => Err(CalError::InvalidArgument(format!("unknown model kind `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinearParams {
    pub learning_rate: f64,
    pub iterations: usize,
    pub l2_lambda: f64,
}

impl Default for LinearParams {
    fn default() -> Self {
        LinearParams {
            learning_rate: 0.1,
            iterations: 500,
            l2_lambda: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TreeParams {
    pub max_depth: usize,
    pub min_leaf: usize,
    pub criterion: Criterion,
}

impl Default for TreeParams {
    fn default() -> Self {
        TreeParams {
            max_depth: 8,
            min_leaf: 5,
            criterion: Criterion::Gini,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForestParams {
    pub n_trees: usize,
    /// Candidate features per split; `None` means ceil(sqrt(#features)).
    pub features_per_split: Option<usize>,
    /// Resample the training set with replacement for each tree.
    pub bootstrap: bool,
    pub max_depth: usize,
    pub min_leaf: usize,
    pub criterion: Criterion,
}

impl Default for ForestParams {
    fn default() -> Self {
        let tree = TreeParams::default();
        ForestParams {
            n_trees: 50,
            features_per_split: None,
            bootstrap: true,
            max_depth: tree.max_depth,
            min_leaf: tree.min_leaf,
            criterion: tree.criterion,
        }
    }
}

impl ForestParams {
    fn tree_params(&self) -> TreeParams {
        TreeParams {
            max_depth: self.max_depth,
            min_leaf: self.min_leaf,
            criterion: self.criterion,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyperparams {
    pub linear: LinearParams,
    pub tree: TreeParams,
    pub forest: ForestParams,
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CalError::InvalidArgument(m.to_string()));
        let l = &self.linear;
        if !(l.learning_rate > 0.0 && l.learning_rate.is_finite()) {
            return bad("linear.learning_rate must be > 0");
        }
        if l.iterations == 0 {
            return bad("linear.iterations must be >= 1");
        }
        if !(l.l2_lambda >= 0.0 && l.l2_lambda.is_finite()) {
            return bad("linear.l2_lambda must be >= 0");
        }
        if self.tree.max_depth == 0 || self.tree.min_leaf == 0 {
            return bad("tree.max_depth and tree.min_leaf must be >= 1");
        }
        let f = &self.forest;
        if f.n_trees == 0 || f.max_depth == 0 || f.min_leaf == 0 {
            return bad("forest.n_trees, max_depth and min_leaf must be >= 1");
        }
        if f.features_per_split == Some(0) {
            return bad("forest.features_per_split must be >= 1");
        }
        Ok(())
    }
}

/// Model family plus its hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: ModelKind,
    #[serde(default)]
    pub hyperparams: Hyperparams,
}

impl ModelSpec {
    pub fn new(kind: ModelKind) -> Self {
        ModelSpec {
            kind,
            hyperparams: Hyperparams::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Model {
    Linear(LinearModel),
    Tree(DecisionTree),
    Forest(RandomForest),
}

/// A trained classifier bound to the schema it was trained on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Predictor {
    format_version: u32,
    schema: Arc<FeatureSchema>,
    model: Model,
}

impl Predictor {
    pub fn new(schema: Arc<FeatureSchema>, model: Model) -> Self {
        Predictor {
            format_version: MODEL_FORMAT_VERSION,
            schema,
            model,
        }
    }

    /// Linear predictor that always outputs `label`.
    pub fn constant(schema: Arc<FeatureSchema>, label: u8) -> Self {
        let model = Model::Linear(LinearModel::constant(&schema, label));
        Predictor::new(schema, model)
    }

    pub fn kind(&self) -> ModelKind {
        match self.model {
            Model::Linear(_) => ModelKind::Linear,
            Model::Tree(_) => ModelKind::Tree,
            Model::Forest(_) => ModelKind::Forest,
        }
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn schema(&self) -> &FeatureSchema {
        &self.schema
    }

    /// Schema-checked prediction.
    pub fn predict(&self, row: &[f64]) -> Result<u8> {
        self.schema.validate_row(row)?;
        Ok(self.classify(row))
    }

    pub fn predict_all(&self, d: &Dataset) -> Result<Vec<u8>> {
        self.check_schema(d.schema())?;
        Ok(d.rows().map(|r| self.classify(r)).collect())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let p: Predictor = serde_json::from_str(text)?;
        if p.format_version != MODEL_FORMAT_VERSION {
            return Err(CalError::InvalidArgument(format!(
                "unsupported model format version {}",
                p.format_version
            )));
        }
        Ok(p)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| CalError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| CalError::io(path, e))?;
        Self::from_json(&text)
    }
}

impl Classify for Predictor {
    fn classify(&self, row: &[f64]) -> u8 {
        match &self.model {
            Model::Linear(m) => m.predict(row),
            Model::Tree(t) => t.predict(row),
            Model::Forest(f) => f.predict(row),
        }
    }

    fn check_schema(&self, schema: &FeatureSchema) -> Result<()> {
        if *self.schema != *schema {
            return Err(CalError::SchemaMismatch(
                "predictor was trained on a different schema".into(),
            ));
        }
        Ok(())
    }
}

/// A trained predictor with its 0-1 error on the training set.
#[derive(Clone, Debug)]
pub struct Fitted {
    pub predictor: Predictor,
    pub training_error: f64,
}

pub fn train(d: &Dataset, spec: &ModelSpec, seed: u64) -> Result<Fitted> {
    spec.hyperparams.validate()?;
    let schema = d.schema_arc().clone();
    let model = match spec.kind {
        ModelKind::Linear => Model::Linear(LinearModel::fit(d, &spec.hyperparams.linear)),
        ModelKind::Tree => Model::Tree(DecisionTree::fit(d, &spec.hyperparams.tree)),
        ModelKind::Forest => Model::Forest(RandomForest::fit(d, &spec.hyperparams.forest, seed)),
    };
    let predictor = Predictor::new(schema, model);
    let training_error = error(&predictor, d)?;
    Ok(Fitted {
        predictor,
        training_error,
    })
}

/// Mean 0-1 loss against the dataset's labels.
pub fn error<C: Classify + ?Sized>(h: &C, d: &Dataset) -> Result<f64> {
    h.check_schema(d.schema())?;
    let wrong = d
        .rows()
        .zip(d.labels())
        .filter(|(r, &y)| h.classify(r) != y)
        .count();
    Ok(wrong as f64 / d.len() as f64)
}

/// Fraction of rows where two classifiers disagree.
pub fn disagreement<A, B>(h: &A, h2: &B, d: &Dataset) -> Result<f64>
where
    A: Classify + ?Sized,
    B: Classify + ?Sized,
{
    h.check_schema(d.schema())?;
    h2.check_schema(d.schema())?;
    let diff = d.rows().filter(|r| h.classify(r) != h2.classify(r)).count();
    Ok(diff as f64 / d.len() as f64)
}


#[cfg(test)]
mod tests {
    use super::fixtures::predict_feature;
    use super::*;
    use crate::data::fixtures::{d4, d4_schema, d4_with};
    use crate::data::{Feature, FeatureSchema};

    fn loose() -> Hyperparams {
        let mut hp = Hyperparams::default();
        hp.tree.min_leaf = 1;
        hp.forest.min_leaf = 1;
        hp
    }

    #[test]
    fn tree_fits_d4_exactly() {
        let spec = ModelSpec {
            kind: ModelKind::Tree,
            hyperparams: loose(),
        };
        let fit = train(&d4(), &spec, 0).unwrap();
        assert_eq!(fit.training_error, 0.0);
        assert_eq!(fit.predictor.predict(&[1.0, 0.0]).unwrap(), 1);
        match fit.predictor.model() {
            Model::Tree(t) => assert_eq!(t.nodes().len(), 3),
            _ => unreachable!(),
        }
    }

    #[test]
    fn linear_fits_d4_exactly() {
        let fit = train(&d4(), &ModelSpec::new(ModelKind::Linear), 0).unwrap();
        assert_eq!(fit.training_error, 0.0);
    }

    #[test]
    fn constant_labels_give_constant_predictors() {
        let d = d4_with(|_| 0);
        for kind in [ModelKind::Linear, ModelKind::Tree, ModelKind::Forest] {
            let spec = ModelSpec {
                kind,
                hyperparams: loose(),
            };
            let h = train(&d, &spec, 5).unwrap().predictor;
            for x in [[0.0, 0.0], [1.0, 1.0], [7.5, -3.0]] {
                assert_eq!(h.classify(&x), 0, "{kind:?}");
            }
        }
        let ones = d4_with(|_| 1);
        let h = train(&ones, &ModelSpec::new(ModelKind::Linear), 0).unwrap().predictor;
        assert_eq!(h.classify(&[3.0, 3.0]), 1);
    }

    #[test]
    fn error_and_disagreement_on_d4() {
        let perfect = predict_feature(0);
        assert_eq!(error(&perfect, &d4()).unwrap(), 0.0);
        let zero = Predictor::constant(d4_schema(), 0);
        assert_eq!(error(&zero, &d4()).unwrap(), 0.5);
        let y_is_b = d4_with(|r| r[1] as u8);
        assert_eq!(error(&perfect, &y_is_b).unwrap(), 0.5);

        let pb = predict_feature(1);
        assert_eq!(disagreement(&perfect, &perfect, &d4()).unwrap(), 0.0);
        assert_eq!(disagreement(&perfect, &pb, &d4()).unwrap(), 0.5);
        assert_eq!(disagreement(&pb, &perfect, &d4()).unwrap(), 0.5);
    }

    #[test]
    fn schema_mismatch_is_reported() {
        let other = Arc::new(FeatureSchema::new(vec![Feature::numeric("z")], "y", "1").unwrap());
        let d = Dataset::new(other, vec![vec![1.0]], vec![1]).unwrap();
        let h = predict_feature(0);
        assert!(matches!(error(&h, &d), Err(CalError::SchemaMismatch(_))));
        assert!(matches!(h.predict(&[1.0]), Err(CalError::SchemaMismatch(_))));
    }

    #[test]
    fn single_tree_forest_matches_tree() {
        let mut hp = loose();
        hp.forest.n_trees = 1;
        hp.forest.bootstrap = false;
        hp.forest.features_per_split = Some(2);
        let d = crate::synth::SynthKind::Arrests.generate(300, 4);
        let forest = train(&d, &ModelSpec { kind: ModelKind::Forest, hyperparams: hp.clone() }, 1)
            .unwrap()
            .predictor;
        let Model::Forest(f) = forest.model() else { unreachable!() };
        let tree = &f.trees()[0];
        for r in d.rows() {
            assert_eq!(forest.classify(r), tree.predict(r));
        }
    }

    #[test]
    fn training_is_deterministic() {
        let d = crate::synth::SynthKind::Adult.generate(400, 2);
        for kind in [ModelKind::Linear, ModelKind::Tree, ModelKind::Forest] {
            let mut spec = ModelSpec::new(kind);
            spec.hyperparams.forest.n_trees = 7;
            let a = train(&d, &spec, 13).unwrap().predictor;
            let b = train(&d, &spec, 13).unwrap().predictor;
            assert_eq!(a, b);
        }
    }

    #[test]
    fn json_roundtrip_preserves_predictions() {
        let d = crate::synth::SynthKind::Lending.generate(300, 8);
        for kind in [ModelKind::Linear, ModelKind::Tree, ModelKind::Forest] {
            let mut spec = ModelSpec::new(kind);
            spec.hyperparams.forest.n_trees = 5;
            let h = train(&d, &spec, 3).unwrap().predictor;
            let back = Predictor::from_json(&h.to_json().unwrap()).unwrap();
            assert_eq!(h, back);
            assert_eq!(h.predict_all(&d).unwrap(), back.predict_all(&d).unwrap());
        }
    }

    #[test]
    fn invalid_hyperparams_rejected() {
        let mut spec = ModelSpec::new(ModelKind::Linear);
        spec.hyperparams.linear.learning_rate = 0.0;
        assert!(train(&d4(), &spec, 0).is_err());
        let mut spec = ModelSpec::new(ModelKind::Forest);
        spec.hyperparams.forest.n_trees = 0;
        assert!(train(&d4(), &spec, 0).is_err());
    }
}
