use serde::{Deserialize, Serialize};

use super::FeatureSchema;
use crate::error::{CalError, Result};
use crate::models::{Classify, DecisionTree, Node, SplitTest};

/// A region of feature space given by a decision tree with 0/1 leaves:
/// a row satisfies the predicate iff its leaf is labeled 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Predicate {
    tree: DecisionTree,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Comparison {
    Eq,
    Ne,
    Le,
    Lt,
    Gt,
    Ge,
}

/// One clause of a conjunctive predicate; `value` is in stored
/// representation (category index for categorical features).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub feature: usize,
    pub op: Comparison,
    pub value: f64,
}

impl Predicate {
    pub fn from_tree(tree: DecisionTree) -> Self {
        Predicate { tree }
    }

    pub fn constant(value: bool) -> Self {
        Predicate {
            tree: DecisionTree::leaf(u8::from(value)),
        }
    }

    pub fn tree(&self) -> &DecisionTree {
        &self.tree
    }

    #[inline]
    pub fn satisfied(&self, row: &[f64]) -> bool {
        self.tree.predict(row) == 1
    }

    /// Conjunction of conditions as a chain of splits; depth equals the
    /// number of clauses.
    pub fn conjunction(conditions: &[Condition]) -> Self {
        let mut nodes = Vec::new();
        for c in conditions {
            let here = nodes.len();
            // Each split has one child that fails (leaf 0) and one that
            // continues to the next clause at here + 2.
            let (test, pass_left) = match c.op {
                Comparison::Eq => (SplitTest::Equal(c.value), true),
                Comparison::Ne => (SplitTest::Equal(c.value), false),
                Comparison::Le => (SplitTest::LessEq(c.value), true),
                Comparison::Gt => (SplitTest::LessEq(c.value), false),
                Comparison::Lt => (SplitTest::LessEq(c.value.next_down()), true),
                Comparison::Ge => (SplitTest::LessEq(c.value.next_down()), false),
            };
            let (left, right) = if pass_left {
                (here + 2, here + 1)
            } else {
                (here + 1, here + 2)
            };
            nodes.push(Node::Split {
                feature: c.feature,
                test,
                left,
                right,
            });
            nodes.push(Node::Leaf { label: 0 });
        }
        nodes.push(Node::Leaf { label: 1 });
        Predicate {
            tree: DecisionTree::from_nodes(nodes).expect("chain is well formed"),
        }
    }

    /// Parse `name=value,name<=value,...` against a schema. Operators are
    /// `=`, `!=`, `<=`, `<`, `>=`, `>`; categorical values are category
    /// names. The literals `true` and `false` give constant predicates.
    pub fn parse(schema: &FeatureSchema, text: &str) -> Result<Self> {
        let text = text.trim();
        match text {
            "true" => return Ok(Predicate::constant(true)),
            "false" => return Ok(Predicate::constant(false)),
            _ => {}
        }
        let mut conditions = Vec::new();
        for clause in text.split(',').map(str::trim).filter(|c| !c.is_empty()) {
            let ops = [
                ("!=", Comparison::Ne),
                ("<=", Comparison::Le),
                (">=", Comparison::Ge),
                ("=", Comparison::Eq),
                ("<", Comparison::Lt),
                (">", Comparison::Gt),
            ];
            let (pos, sym, op) = ops
                .iter()
                .filter_map(|(sym, op)| clause.find(sym).map(|p| (p, *sym, *op)))
                .min_by_key(|(p, sym, _)| (*p, std::cmp::Reverse(sym.len())))
                .ok_or_else(|| CalError::InvalidArgument(format!("no operator in `{clause}`")))?;
            let name = clause[..pos].trim();
            let raw = clause[pos + sym.len()..].trim();
            let feature = schema.feature_index(name)?;
            let categorical = schema.features()[feature].is_categorical();
            if categorical && !matches!(op, Comparison::Eq | Comparison::Ne) {
                return Err(CalError::InvalidArgument(format!(
                    "categorical feature `{name}` only supports = and !="
                )));
            }
            let value = schema.encode_value(feature, raw).map_err(|v| {
                CalError::InvalidArgument(format!("bad value `{v}` for feature `{name}`"))
            })?;
            conditions.push(Condition { feature, op, value });
        }
        if conditions.is_empty() {
            return Err(CalError::InvalidArgument("empty predicate".into()));
        }
        Ok(Predicate::conjunction(&conditions))
    }
}

impl Classify for Predicate {
    fn classify(&self, row: &[f64]) -> u8 {
        self.tree.predict(row)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::fixtures::d4_schema;
    use crate::data::Feature;

    #[test]
    fn conjunction_on_d4() {
        let p = Predicate::parse(&d4_schema(), "a=1, b=1").unwrap();
        let sat: Vec<bool> = [[0.0, 0.0], [0.0, 1.0], [1.0, 0.0], [1.0, 1.0]]
            .iter()
            .map(|r| p.satisfied(r))
            .collect();
        assert_eq!(sat, vec![false, false, false, true]);
        assert_eq!(p.tree().depth(), 2);
    }

    #[test]
    fn every_operator() {
        let s = d4_schema();
        let check = |text: &str, x: f64| Predicate::parse(&s, text).unwrap().satisfied(&[x, 0.0]);
        assert!(check("a<=1", 1.0) && !check("a<=1", 1.5));
        assert!(check("a<1", 0.999) && !check("a<1", 1.0));
        assert!(check("a>1", 1.5) && !check("a>1", 1.0));
        assert!(check("a>=1", 1.0) && !check("a>=1", 0.999));
        assert!(check("a!=1", 0.0) && !check("a!=1", 1.0));
        assert!(Predicate::parse(&s, "true").unwrap().satisfied(&[0.0, 0.0]));
        assert!(!Predicate::parse(&s, "false").unwrap().satisfied(&[0.0, 0.0]));
    }

    #[test]
    fn parse_errors() {
        let s = d4_schema();
        assert!(Predicate::parse(&s, "zz=1").is_err());
        assert!(Predicate::parse(&s, "a").is_err());
        assert!(Predicate::parse(&s, "a=x").is_err());
        assert!(Predicate::parse(&s, "").is_err());
        let cat = FeatureSchema::new(vec![Feature::categorical("c", ["u", "v"])], "y", "1").unwrap();
        assert!(Predicate::parse(&cat, "c<=u").is_err());
        assert!(Predicate::parse(&cat, "c=v").unwrap().satisfied(&[1.0]));
    }
}
