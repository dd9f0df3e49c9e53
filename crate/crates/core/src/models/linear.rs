//! Logistic regression over an encoded feature space: numeric features are
//! standardized with training-set statistics, categorical features are
//! one-hot over the schema's full category list.

use serde::{Deserialize, Serialize};

use super::LinearParams;
use crate::data::{Dataset, FeatureKind, FeatureSchema};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum EncodedColumn {
    Numeric { column: usize, mean: f64, scale: f64 },
    OneHot { offset: usize, width: usize },
}

/// Frozen mapping from raw rows to the model's input space. Column layout
/// depends only on the schema; the numeric statistics come from training data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    columns: Vec<EncodedColumn>,
    width: usize,
}

impl Encoder {
    /// Layout for `schema` with identity standardization.
    pub fn layout(schema: &FeatureSchema) -> Self {
        let mut width = 0;
        let columns = schema
            .features()
            .iter()
            .map(|f| match &f.kind {
                FeatureKind::Numeric => {
                    width += 1;
                    EncodedColumn::Numeric {
                        column: width - 1,
                        mean: 0.0,
                        scale: 1.0,
                    }
                }
                FeatureKind::Categorical(c) => {
                    width += c.len();
                    EncodedColumn::OneHot {
                        offset: width - c.len(),
                        width: c.len(),
                    }
                }
            })
            .collect();
        Encoder { columns, width }
    }

    pub fn fit(d: &Dataset) -> Self {
        let mut enc = Self::layout(d.schema());
        let n = d.len() as f64;
        for (fi, col) in enc.columns.iter_mut().enumerate() {
            if let EncodedColumn::Numeric { mean, scale, .. } = col {
                let m = d.column(fi).sum::<f64>() / n;
                let var = d.column(fi).map(|v| (v - m) * (v - m)).sum::<f64>() / n;
                let sd = var.sqrt();
                *mean = m;
                *scale = if sd > 1e-12 { sd } else { 1.0 };
            }
        }
        enc
    }

    pub fn width(&self) -> usize {
        self.width
    }

    fn encode_into(&self, row: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        for (col, &v) in self.columns.iter().zip(row) {
            match *col {
                EncodedColumn::Numeric { column, mean, scale } => out[column] = (v - mean) / scale,
                EncodedColumn::OneHot { offset, .. } => out[offset + v as usize] = 1.0,
            }
        }
    }

    #[inline]
    fn dot(&self, row: &[f64], weights: &[f64]) -> f64 {
        let mut z = 0.0;
        for (col, &v) in self.columns.iter().zip(row) {
            z += match *col {
                EncodedColumn::Numeric { column, mean, scale } => weights[column] * (v - mean) / scale,
                EncodedColumn::OneHot { offset, .. } => weights[offset + v as usize],
            };
        }
        z
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    encoder: Encoder,
    weights: Vec<f64>,
    bias: f64,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl LinearModel {
    pub fn constant(schema: &FeatureSchema, label: u8) -> Self {
        let encoder = Encoder::layout(schema);
        LinearModel {
            weights: vec![0.0; encoder.width()],
            encoder,
            bias: if label == 1 { 1.0 } else { -1.0 },
        }
    }

    pub fn fit(d: &Dataset, params: &LinearParams) -> Self {
        let positives = d.positive_count();
        if positives == 0 || positives == d.len() {
            return Self::constant(d.schema(), u8::from(positives > 0));
        }
        let encoder = Encoder::fit(d);
        let w = encoder.width();
        let n = d.len();
        let mut x = vec![0.0; n * w];
        for (i, row) in d.rows().enumerate() {
            encoder.encode_into(row, &mut x[i * w..(i + 1) * w]);
        }
        let y: Vec<f64> = d.labels().iter().map(|&v| f64::from(v)).collect();

        let mut weights = vec![0.0; w];
        let mut bias = 0.0;
        let mut grad = vec![0.0; w];
        let inv_n = 1.0 / n as f64;
        for _ in 0..params.iterations {
            grad.fill(0.0);
            let mut grad_b = 0.0;
            for i in 0..n {
                let xi = &x[i * w..(i + 1) * w];
                let z = bias + xi.iter().zip(&weights).map(|(a, b)| a * b).sum::<f64>();
                let r = sigmoid(z) - y[i];
                grad_b += r;
                for (g, &v) in grad.iter_mut().zip(xi) {
                    *g += r * v;
                }
            }
            for (wj, gj) in weights.iter_mut().zip(&grad) {
                *wj -= params.learning_rate * (gj * inv_n + params.l2_lambda * *wj);
            }
            bias -= params.learning_rate * grad_b * inv_n;
        }
        LinearModel {
            encoder,
            weights,
            bias,
        }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> f64 {
        self.bias
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn decision_value(&self, row: &[f64]) -> f64 {
        self.bias + self.encoder.dot(row, &self.weights)
    }

    /// 1 iff the predicted probability exceeds 0.5.
    #[inline]
    pub fn predict(&self, row: &[f64]) -> u8 {
        u8::from(self.decision_value(row) > 0.0)
    }
}
