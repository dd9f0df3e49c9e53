//! Counterfactual active learning.
//!
//! Each round computes the current model's influences on the current
//! training set, asks a feature-selection oracle for a feature, draws `k`
//! counterfactual rows for that feature from the current training set, has
//! a labeling oracle label them, appends them, and retrains from scratch.
//!
//! [`CalState`] exposes the loop one step at a time (the audit service
//! drives it from HTTP requests); [`run_cal`] runs it to completion with
//! in-process oracles. Both derive every random stream from the configured
//! seed and the round index, so a recorded sequence of feature choices and
//! labels replays to the same models.

use std::io::Write;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::{sample_counterfactual, CfBatch, Dataset, FeatureSchema};
use crate::error::{CalError, Result};
use crate::influence::{influence_mse, influence_vector, EstimatorSettings, InfluenceVector};
use crate::models::{train, ModelSpec, Predictor};
use crate::seed::{self, streams, Rng};

/// Rounds in a row whose influence change must stay under the tolerance.
pub const CONVERGENCE_WINDOW: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    #[serde(default)]
    pub convergence_tol: Option<f64>,
    pub model: ModelSpec,
    #[serde(default)]
    pub estimator: EstimatorSettings,
    pub seed: u64,
}

impl CalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(CalError::InvalidArgument("batch_size must be >= 1".into()));
        }
        if let Some(tol) = self.convergence_tol {
            if tol.is_nan() || tol <= 0.0 {
                return Err(CalError::InvalidArgument("convergence_tol must be > 0".into()));
            }
        }
        self.model.hyperparams.validate()?;
        self.estimator.validate()
    }

    fn stream(&self, label: u64, round: usize) -> u64 {
        seed::derive_indexed(self.seed, label, round as u64)
    }
}

/// Evaluation metrics for one round, filled in by the caller.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub influence_mse: f64,
    pub in_dist_error: f64,
    pub out_dist_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    /// Feature whose counterfactuals were labeled this round; `None` for
    /// round 0 and for rounds fed from a fresh-sample pool.
    pub selected_feature: Option<String>,
    pub influences: InfluenceVector,
    pub batch_size: usize,
    pub train_size: usize,
    pub training_error: f64,
    #[serde(default)]
    pub metrics: Option<RoundMetrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub config: CalConfig,
    pub rounds: Vec<RoundRecord>,
}

impl RunLog {
    /// One JSON object per round.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for r in &self.rounds {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to a vec");
        String::from_utf8(buf).expect("json is utf-8")
    }

    pub fn completed_rounds(&self) -> usize {
        self.rounds.len().saturating_sub(1)
    }
}

/// Labels unlabeled rows. Sees nothing but the rows.
pub trait LabelingOracle {
    fn label(&mut self, rows: &[Vec<f64>]) -> std::result::Result<Vec<u8>, String>;
}

/// Chooses the feature to probe. Sees nothing but the influence vector.
pub trait FeatureOracle {
    fn select(&mut self, current: &InfluenceVector) -> std::result::Result<String, String>;
}

/// Labels every row with a fixed model's prediction.
pub struct ModelLabeler {
    model: Predictor,
}

impl ModelLabeler {
    pub fn new(model: Predictor) -> Self {
        ModelLabeler { model }
    }

    pub fn model(&self) -> &Predictor {
        &self.model
    }
}

pub fn labeling_oracle_from_model(h_t: Predictor) -> ModelLabeler {
    ModelLabeler::new(h_t)
}

impl LabelingOracle for ModelLabeler {
    fn label(&mut self, rows: &[Vec<f64>]) -> std::result::Result<Vec<u8>, String> {
        rows.iter()
            .map(|r| self.model.predict(r).map_err(|e| e.to_string()))
            .collect()
    }
}

/// Replays recorded label batches in order.
pub struct ScriptedLabeler {
    batches: std::collections::VecDeque<Vec<u8>>,
}

impl ScriptedLabeler {
    pub fn new(batches: impl IntoIterator<Item = Vec<u8>>) -> Self {
        ScriptedLabeler {
            batches: batches.into_iter().collect(),
        }
    }
}

impl LabelingOracle for ScriptedLabeler {
    fn label(&mut self, rows: &[Vec<f64>]) -> std::result::Result<Vec<u8>, String> {
        let labels = self.batches.pop_front().ok_or("label script exhausted")?;
        if labels.len() != rows.len() {
            return Err(format!("scripted batch has {} labels for {} rows", labels.len(), rows.len()));
        }
        Ok(labels)
    }
}

/// Picks the feature whose influence is furthest from a fixed reference;
/// ties go to the earliest feature.
pub struct GuidedOracle {
    reference: InfluenceVector,
}

impl GuidedOracle {
    pub fn new(reference: InfluenceVector) -> Self {
        GuidedOracle { reference }
    }

    pub fn reference(&self) -> &InfluenceVector {
        &self.reference
    }
}

pub fn guided_select(current: &InfluenceVector, reference: &InfluenceVector) -> Result<String> {
    current.check_same_features(reference)?;
    let mut best: Option<(&str, f64)> = None;
    for (name, &v) in &current.features {
        let gap = (v - reference.features[name.as_str()]).abs();
        if best.is_none_or(|(_, g)| gap > g) {
            best = Some((name, gap));
        }
    }
    best.map(|(n, _)| n.to_string())
        .ok_or_else(|| CalError::FeatureSetMismatch("empty influence vectors".into()))
}

impl FeatureOracle for GuidedOracle {
    fn select(&mut self, current: &InfluenceVector) -> std::result::Result<String, String> {
        guided_select(current, &self.reference).map_err(|e| e.to_string())
    }
}

pub fn random_select(schema: &FeatureSchema, rng: &mut Rng) -> String {
    schema.features()[rng.gen_range(0..schema.len())].name.clone()
}

/// Uniform choice among the schema's features.
pub struct RandomOracle {
    schema: FeatureSchema,
    rng: Rng,
}

impl RandomOracle {
    pub fn new(schema: FeatureSchema, seed: u64) -> Self {
        RandomOracle {
            schema,
            rng: seed::rng(seed::derive(seed, streams::SELECT)),
        }
    }
}

impl FeatureOracle for RandomOracle {
    fn select(&mut self, _current: &InfluenceVector) -> std::result::Result<String, String> {
        Ok(random_select(&self.schema, &mut self.rng))
    }
}

/// Replays recorded feature choices in order.
pub struct ScriptedOracle {
    features: std::collections::VecDeque<String>,
}

impl ScriptedOracle {
    pub fn new(features: impl IntoIterator<Item = String>) -> Self {
        ScriptedOracle {
            features: features.into_iter().collect(),
        }
    }
}

impl FeatureOracle for ScriptedOracle {
    fn select(&mut self, _current: &InfluenceVector) -> std::result::Result<String, String> {
        self.features.pop_front().ok_or_else(|| "feature script exhausted".into())
    }
}

/// `k` rows drawn uniformly with replacement from a pool, unmodified.
pub fn non_counterfactual_round_source(pool: &Dataset, k: usize, rng: &mut Rng) -> Result<Vec<Vec<f64>>> {
    if k == 0 {
        return Err(CalError::InvalidArgument("batch size must be at least 1".into()));
    }
    Ok((0..k).map(|_| pool.row(rng.gen_range(0..pool.len())).to_vec()).collect())
}

/// Where each round's unlabeled rows come from.
#[derive(Clone, Debug)]
pub enum BatchSource {
    Counterfactual,
    /// Fresh in-distribution rows from a reserved pool.
    Pool(Dataset),
}

/// The loop's state between rounds.
#[derive(Clone, Debug)]
pub struct CalState {
    cfg: CalConfig,
    train: Dataset,
    model: Predictor,
    log: RunLog,
}

impl CalState {
    /// Train the round-0 model and measure its influences.
    pub fn start(d_train: Dataset, cfg: CalConfig) -> Result<Self> {
        cfg.validate()?;
        let fit = train(&d_train, &cfg.model, cfg.stream(streams::TRAIN, 0))?;
        let influences = influence_vector(&fit.predictor, &d_train, &cfg.estimator, cfg.stream(streams::INFLUENCE, 0))?;
        let record = RoundRecord {
            round: 0,
            selected_feature: None,
            influences,
            batch_size: 0,
            train_size: d_train.len(),
            training_error: fit.training_error,
            metrics: None,
        };
        Ok(CalState {
            log: RunLog {
                config: cfg.clone(),
                rounds: vec![record],
            },
            cfg,
            train: d_train,
            model: fit.predictor,
        })
    }

    pub fn round(&self) -> usize {
        self.log.rounds.len() - 1
    }

    pub fn config(&self) -> &CalConfig {
        &self.cfg
    }

    pub fn model(&self) -> &Predictor {
        &self.model
    }

    pub fn training_set(&self) -> &Dataset {
        &self.train
    }

    pub fn influences(&self) -> &InfluenceVector {
        &self.log.rounds.last().expect("round 0 exists").influences
    }

    pub fn log(&self) -> &RunLog {
        &self.log
    }

    pub fn into_parts(self) -> (Predictor, RunLog, Dataset) {
        (self.model, self.log, self.train)
    }

    /// Counterfactual batch for the next round.
    pub fn counterfactual_batch(&self, feature: &str) -> Result<CfBatch> {
        let mut rng = seed::rng(self.cfg.stream(streams::BATCH, self.round() + 1));
        sample_counterfactual(&self.train, feature, self.cfg.batch_size, &mut rng)
    }

    /// Fresh-sample batch for the next round.
    pub fn pool_batch(&self, pool: &Dataset) -> Result<Vec<Vec<f64>>> {
        pool.same_schema(self.train.schema())?;
        let mut rng = seed::rng(self.cfg.stream(streams::BATCH, self.round() + 1));
        non_counterfactual_round_source(pool, self.cfg.batch_size, &mut rng)
    }

    /// Append a labeled batch, retrain from scratch, and record the round.
    pub fn advance(&mut self, feature: Option<String>, rows: &[Vec<f64>], labels: &[u8]) -> Result<&RoundRecord> {
        self.train.extend(rows, labels)?;
        let round = self.round() + 1;
        let fit = train(&self.train, &self.cfg.model, self.cfg.stream(streams::TRAIN, round))?;
        let influences = influence_vector(
            &fit.predictor,
            &self.train,
            &self.cfg.estimator,
            self.cfg.stream(streams::INFLUENCE, round),
        )?;
        self.model = fit.predictor;
        self.log.rounds.push(RoundRecord {
            round,
            selected_feature: feature,
            influences,
            batch_size: rows.len(),
            train_size: self.train.len(),
            training_error: fit.training_error,
            metrics: None,
        });
        Ok(self.log.rounds.last().expect("just pushed"))
    }

    /// Attach metrics to the latest round.
    pub fn set_metrics(&mut self, metrics: RoundMetrics) {
        if let Some(r) = self.log.rounds.last_mut() {
            r.metrics = Some(metrics);
        }
    }

    /// True once the last `CONVERGENCE_WINDOW` influence changes are all
    /// below `tol`.
    pub fn converged(&self, tol: f64) -> Result<bool> {
        let rounds = &self.log.rounds;
        if rounds.len() <= CONVERGENCE_WINDOW {
            return Ok(false);
        }
        for w in rounds[rounds.len() - CONVERGENCE_WINDOW - 1..].windows(2) {
            if influence_mse(&w[1].influences, &w[0].influences)? >= tol {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

/// Called after every round (including round 0) with the round index and
/// the current model; a returned value is stored in the round record.
pub trait RoundHook {
    fn evaluate(&mut self, round: usize, model: &Predictor) -> Result<Option<RoundMetrics>>;
}

impl<F: FnMut(usize, &Predictor) -> Result<Option<RoundMetrics>>> RoundHook for F {
    fn evaluate(&mut self, round: usize, model: &Predictor) -> Result<Option<RoundMetrics>> {
        self(round, model)
    }
}

struct NoMetrics;

impl RoundHook for NoMetrics {
    fn evaluate(&mut self, _: usize, _: &Predictor) -> Result<Option<RoundMetrics>> {
        Ok(None)
    }
}

/// Counterfactual active learning with counterfactual batches and no
/// per-round metrics.
pub fn run_cal(
    d_train: Dataset,
    labeler: &mut dyn LabelingOracle,
    selector: &mut dyn FeatureOracle,
    cfg: &CalConfig,
) -> Result<(Predictor, RunLog)> {
    run_cal_with(d_train, labeler, selector, &BatchSource::Counterfactual, cfg, &mut NoMetrics)
}

pub fn run_cal_with(
    d_train: Dataset,
    labeler: &mut dyn LabelingOracle,
    selector: &mut dyn FeatureOracle,
    source: &BatchSource,
    cfg: &CalConfig,
    hook: &mut dyn RoundHook,
) -> Result<(Predictor, RunLog)> {
    let mut state = CalState::start(d_train, cfg.clone())?;
    if let Some(m) = hook.evaluate(0, state.model())? {
        state.set_metrics(m);
    }
    for _ in 0..cfg.max_epochs {
        let round = state.round() + 1;
        let oracle_err = |message: String| CalError::Oracle { round, message };
        let (feature, rows) = match source {
            BatchSource::Counterfactual => {
                let f = selector.select(state.influences()).map_err(oracle_err)?;
                let batch = state
                    .counterfactual_batch(&f)
                    .map_err(|e| oracle_err(format!("feature oracle chose `{f}`: {e}")))?;
                (Some(f), batch.rows)
            }
            BatchSource::Pool(pool) => (None, state.pool_batch(pool)?),
        };
        let labels = labeler.label(&rows).map_err(oracle_err)?;
        if labels.len() != rows.len() {
            return Err(oracle_err(format!("{} labels for {} rows", labels.len(), rows.len())));
        }
        state.advance(feature, &rows, &labels)?;
        if let Some(m) = hook.evaluate(round, state.model())? {
            state.set_metrics(m);
        }
        if let Some(tol) = cfg.convergence_tol {
            if state.converged(tol)? {
                break;
            }
        }
    }
    let (model, log, _) = state.into_parts();
    Ok((model, log))
}
