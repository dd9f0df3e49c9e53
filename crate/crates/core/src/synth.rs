//! Synthetic tabular datasets shaped like three common audit benchmarks:
//! census income (13 features), arrest history (6 features) and consumer
//! loan charge-off (19 features). Features are correlated through a latent
//! factor and some pairs are close to redundant (marital status and
//! relationship, age and years employed), as in the real data. A biased
//! sample then leaves the split of weight between such features poorly
//! determined, which is what makes influence unconstrained.

use std::sync::Arc;

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Feature, FeatureSchema};
use crate::error::{CalError, Result};
use crate::seed::{self, streams, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthKind {
    Adult,
    Arrests,
    Lending,
}

impl std::str::FromStr for SynthKind {
    type Err = CalError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adult" => Ok(SynthKind::Adult),
            "arrests" => Ok(SynthKind::Arrests),
            "lending" => Ok(SynthKind::Lending),
            other => Err(CalError::InvalidArgument(format!("unknown synthetic dataset `{other}`"))),
        }
    }
}

fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn pick(rng: &mut Rng, weights: &[f64]) -> f64 {
    WeightedIndex::new(weights).expect("positive weights").sample(rng) as f64
}

fn clamp_round(v: f64, lo: f64, hi: f64) -> f64 {
    v.round().clamp(lo, hi)
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl SynthKind {
    pub fn name(self) -> &'static str {
        match self {
            SynthKind::Adult => "adult",
            SynthKind::Arrests => "arrests",
            SynthKind::Lending => "lending",
        }
    }

    pub fn schema(self) -> FeatureSchema {
        let (features, target, positive) = match self {
            SynthKind::Adult => (
                vec![
                    Feature::numeric("age"),
                    Feature::categorical("workclass", ["private", "self_employed", "government", "other"]),
                    Feature::numeric("education_num"),
                    Feature::categorical("marital_status", ["married", "never_married", "divorced", "widowed"]),
                    Feature::categorical(
                        "occupation",
                        ["professional", "managerial", "clerical", "service", "manual", "other"],
                    ),
                    Feature::categorical("relationship", ["spouse", "own_child", "unmarried", "other"]),
                    Feature::categorical("race", ["white", "black", "asian", "other"]),
                    Feature::categorical("sex", ["female", "male"]),
                    Feature::numeric("capital_gain"),
                    Feature::numeric("capital_loss"),
                    Feature::numeric("hours_per_week"),
                    Feature::categorical("native_region", ["us", "latin_america", "asia", "europe"]),
                    Feature::numeric("years_employed"),
                ],
                "income",
                ">50K",
            ),
            SynthKind::Arrests => (
                vec![
                    Feature::numeric("age"),
                    Feature::categorical("sex", ["female", "male"]),
                    Feature::categorical("race", ["white", "black", "hispanic", "other"]),
                    Feature::categorical("drug_use", ["never", "sometimes", "often"]),
                    Feature::categorical("alcohol_use", ["never", "sometimes", "often"]),
                    Feature::numeric("household_income"),
                ],
                "arrested",
                "yes",
            ),
            SynthKind::Lending => (
                vec![
                    Feature::numeric("loan_amount"),
                    Feature::categorical("term", ["36", "60"]),
                    Feature::numeric("interest_rate"),
                    Feature::numeric("installment"),
                    Feature::categorical("grade", ["A", "B", "C", "D", "E"]),
                    Feature::numeric("employment_length"),
                    Feature::categorical("home_ownership", ["rent", "mortgage", "own"]),
                    Feature::numeric("annual_income"),
                    Feature::categorical("verification", ["none", "source", "verified"]),
                    Feature::categorical("purpose", ["debt", "card", "home", "car", "other"]),
                    Feature::numeric("dti"),
                    Feature::numeric("delinquencies"),
                    Feature::numeric("inquiries"),
                    Feature::numeric("open_accounts"),
                    Feature::numeric("public_records"),
                    Feature::numeric("revolving_balance"),
                    Feature::numeric("revolving_util"),
                    Feature::numeric("total_accounts"),
                    Feature::numeric("credit_age"),
                ],
                "charged_off",
                "1",
            ),
        };
        FeatureSchema::new(features, target, positive).expect("built-in schema is valid")
    }

    /// `n` rows from the generator, a pure function of `(n, seed)`.
    pub fn generate(self, n: usize, seed: u64) -> Dataset {
        let schema = Arc::new(self.schema());
        let mut rng = seed::rng(seed::derive(seed, streams::SYNTH));
        let mut rows = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n.max(1) {
            let (row, p) = match self {
                SynthKind::Adult => adult_row(&mut rng),
                SynthKind::Arrests => arrests_row(&mut rng),
                SynthKind::Lending => lending_row(&mut rng),
            };
            labels.push(u8::from(rng.gen::<f64>() < p));
            rows.push(row);
        }
        Dataset::new(schema, rows, labels).expect("generator rows conform to schema")
    }
}

fn adult_row(rng: &mut Rng) -> (Vec<f64>, f64) {
    let ses = normal(rng);
    let age = clamp_round(39.0 + 13.0 * normal(rng), 17.0, 90.0);
    let edu = clamp_round(10.0 + 2.6 * (0.6 * ses + 0.8 * normal(rng)), 1.0, 16.0);
    let workclass = pick(rng, &[0.7 - 0.05 * ses.clamp(-2.0, 2.0), 0.1 + 0.04 * ses.max(0.0), 0.15, 0.05]);
    let young = age < 28.0;
    let marital = if young {
        pick(rng, &[0.25, 0.7, 0.04, 0.01])
    } else if age > 65.0 {
        pick(rng, &[0.55, 0.05, 0.15, 0.25])
    } else {
        pick(rng, &[0.6, 0.2, 0.17, 0.03])
    };
    let occupation = if edu >= 13.0 {
        pick(rng, &[0.45, 0.3, 0.1, 0.05, 0.05, 0.05])
    } else if edu >= 9.0 {
        pick(rng, &[0.08, 0.15, 0.25, 0.2, 0.25, 0.07])
    } else {
        pick(rng, &[0.02, 0.05, 0.1, 0.3, 0.43, 0.1])
    };
    let sex = pick(rng, &[0.33, 0.67]);
    let relationship = match marital as usize {
        0 => pick(rng, &[0.97, 0.005, 0.005, 0.02]),
        1 if young => pick(rng, &[0.01, 0.6, 0.2, 0.19]),
        _ => pick(rng, &[0.01, 0.1, 0.6, 0.29]),
    };
    let race = pick(rng, &[0.8, 0.1, 0.05, 0.05]);
    let gain = if rng.gen::<f64>() < (0.06 + 0.04 * ses).clamp(0.01, 0.2) {
        clamp_round((8.0 + 0.8 * normal(rng) + 0.3 * ses).exp(), 100.0, 99_999.0)
    } else {
        0.0
    };
    let loss = if rng.gen::<f64>() < 0.045 {
        clamp_round(1900.0 + 300.0 * normal(rng), 200.0, 4000.0)
    } else {
        0.0
    };
    let hours = clamp_round(40.0 + 11.0 * normal(rng) + 2.5 * ses, 1.0, 99.0);
    let region = pick(rng, &[0.9, 0.05, 0.03, 0.02]);
    let tenure = clamp_round(age - 19.0 - 1.5 * normal(rng).abs(), 0.0, 70.0);

    let married = f64::from(marital == 0.0);
    let prof = f64::from(occupation <= 1.0);
    let logit = -1.9
        + 0.55 * (edu - 10.0)
        + 1.8 * married
        + 0.04 * (age - 39.0)
        + 0.8 * prof
        + 0.35 * f64::from(sex == 1.0)
        + 0.045 * (hours - 40.0)
        + 0.0004 * gain
        + 0.0006 * loss
        + 0.01 * tenure;
    (
        vec![
            age, workclass, edu, marital, occupation, relationship, race, sex, gain, loss, hours, region,
            tenure,
        ],
        sigmoid(2.2 * logit),
    )
}

fn arrests_row(rng: &mut Rng) -> (Vec<f64>, f64) {
    let risk = normal(rng);
    let age = clamp_round(19.0 + 4.0 * normal(rng).abs(), 14.0, 40.0);
    let sex = pick(rng, &[0.5, 0.5]);
    let race = pick(rng, &[0.55, 0.2, 0.18, 0.07]);
    let drug = pick(rng, &[(0.6 - 0.15 * risk).max(0.05), 0.3, (0.1 + 0.12 * risk).max(0.02)]);
    let alcohol = pick(rng, &[(0.4 - 0.1 * risk).max(0.05), 0.45, (0.15 + 0.1 * risk).max(0.02)]);
    let income = clamp_round(45_000.0 * (0.5 * normal(rng) - 0.25 * risk).exp(), 0.0, 300_000.0);
    let logit = -2.0
        + 1.1 * f64::from(sex == 1.0)
        + 0.9 * drug
        + 0.5 * alcohol * drug.min(1.0)
        + 0.35 * alcohol
        - 0.12 * (age - 22.0).abs()
        - 0.6 * (income / 50_000.0 - 1.0).clamp(-1.0, 2.0)
        + 0.5 * risk;
    (vec![age, sex, race, drug, alcohol, income], sigmoid(logit))
}

fn lending_row(rng: &mut Rng) -> (Vec<f64>, f64) {
    let credit = normal(rng);
    let grade = clamp_round(2.0 - 1.1 * credit + 0.6 * normal(rng), 0.0, 4.0);
    let term = pick(rng, &[0.75 - 0.08 * grade, 0.25 + 0.08 * grade]);
    let rate = ((7.0 + 3.5 * grade + 1.0 * normal(rng)).clamp(5.0, 28.0) * 100.0).round() / 100.0;
    let amount = clamp_round(14_000.0 * (0.6 * normal(rng)).exp() / 100.0, 10.0, 400.0) * 100.0;
    let months = if term == 0.0 { 36.0 } else { 60.0 };
    let r = rate / 1200.0;
    let installment = ((amount * r / (1.0 - (1.0 + r).powf(-months))) * 100.0).round() / 100.0;
    let emp = clamp_round(5.0 + 3.5 * normal(rng), 0.0, 10.0);
    let home = pick(rng, &[0.45 - 0.05 * credit.clamp(-2.0, 2.0), 0.45, 0.1]);
    let income = clamp_round(65_000.0 * (0.45 * normal(rng) + 0.15 * credit).exp(), 8_000.0, 500_000.0);
    let verification = pick(rng, &[0.35, 0.35, 0.3]);
    let purpose = pick(rng, &[0.55, 0.2, 0.1, 0.05, 0.1]);
    let dti = ((12.0 * 12.0 * installment / income * 100.0 + 10.0 + 5.0 * normal(rng)).clamp(0.0, 45.0) * 10.0)
        .round()
        / 10.0;
    let delinq = if rng.gen::<f64>() < (0.12 - 0.05 * credit).clamp(0.01, 0.4) {
        clamp_round(1.0 + normal(rng).abs() * 1.5, 1.0, 10.0)
    } else {
        0.0
    };
    let inquiries = clamp_round((0.8 - 0.4 * credit + normal(rng)).max(0.0), 0.0, 8.0);
    let open = clamp_round(11.0 + 5.0 * normal(rng), 1.0, 40.0);
    let pubrec = if rng.gen::<f64>() < 0.06 { 1.0 } else { 0.0 };
    let revol = clamp_round(15_000.0 * (0.8 * normal(rng)).exp(), 0.0, 200_000.0);
    let util = clamp_round(50.0 - 12.0 * credit + 18.0 * normal(rng), 0.0, 100.0);
    let total = clamp_round(open + 10.0 + 8.0 * normal(rng).abs(), open, 80.0);
    let credit_age = clamp_round(15.0 + 4.0 * credit + 6.0 * normal(rng), 1.0, 50.0);

    let logit = -2.3
        + 0.16 * (rate - 12.0)
        + 0.55 * f64::from(term == 1.0)
        + 0.035 * (dti - 18.0)
        - 0.5 * (income / 65_000.0).ln()
        + 0.25 * delinq
        + 0.15 * inquiries
        + 0.012 * (util - 50.0)
        + 0.3 * pubrec
        - 0.02 * (credit_age - 15.0)
        + 0.25 * f64::from(home == 0.0)
        - 0.2 * credit
        + if util > 85.0 && dti > 25.0 { 0.9 } else { 0.0 };
    (
        vec![
            amount, term, rate, installment, grade, emp, home, income, verification, purpose, dti, delinq,
            inquiries, open, pubrec, revol, util, total, credit_age,
        ],
        sigmoid(logit),
    )
}

/// Dataset source for experiments: a CSV with its schema sidecar, or a
/// bundled generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Csv { data: std::path::PathBuf, schema: std::path::PathBuf },
    Synthetic { kind: SynthKind, rows: usize, seed: u64 },
}

impl DataSource {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DataSource::Csv { data, schema } => {
                let schema = FeatureSchema::load(schema)?;
                crate::data::load_csv(data, &schema)
            }
            DataSource::Synthetic { kind, rows, seed } => {
                if *rows == 0 {
                    return Err(CalError::EmptyDataset);
                }
                Ok(kind.generate(*rows, *seed))
            }
        }
    }
}
