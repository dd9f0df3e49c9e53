//! Interactive CAL sessions and their on-disk snapshots.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use cal_core::cal::{CalConfig, CalState, RoundMetrics};
use cal_core::data::{CfBatch, FeatureKind, FeatureSchema};
use cal_core::experiments::{ConvergenceCurves, MetricEvaluator};
use cal_core::influence::{influence_vector, EstimatorSettings, InfluenceVector};
use cal_core::models::{Classify, ModelSpec, Predictor};
use cal_core::seed::{self, streams};
use cal_core::synth::DataSource;
use cal_core::CalError;

use crate::ApiError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum LabelerConfig {
    /// Labels come from `POST /labels`.
    Human,
    /// Labels come from a saved ground-truth model.
    Synthetic { model: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationConfig {
    pub in_dist: DataSource,
    pub out_dist: DataSource,
    #[serde(default)]
    pub estimator: EstimatorSettings,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionConfig {
    pub data: DataSource,
    pub batch_size: usize,
    pub model: ModelSpec,
    #[serde(default)]
    pub estimator: EstimatorSettings,
    pub seed: u64,
    pub labeler: LabelerConfig,
    /// Ground-truth model used for reference influences and metrics in
    /// human mode. Synthetic mode uses its labeler model.
    #[serde(default)]
    pub reference_model: Option<PathBuf>,
    #[serde(default)]
    pub evaluation: Option<EvaluationConfig>,
}

impl SessionConfig {
    pub fn cal_config(&self) -> CalConfig {
        CalConfig {
            batch_size: self.batch_size,
            max_epochs: 0,
            convergence_tol: None,
            model: self.model.clone(),
            estimator: self.estimator,
            seed: self.seed,
        }
    }

    fn validate(&self) -> Result<(), ApiError> {
        self.cal_config().validate().map_err(ApiError::invalid_config)?;
        if let Some(e) = &self.evaluation {
            e.estimator.validate().map_err(ApiError::invalid_config)?;
        }
        if matches!(self.labeler, LabelerConfig::Synthetic { .. }) && self.reference_model.is_some() {
            return Err(ApiError::invalid_config(
                "reference_model is only used in human labeler mode",
            ));
        }
        Ok(())
    }

    fn ground_truth_path(&self) -> Option<&Path> {
        match &self.labeler {
            LabelerConfig::Synthetic { model } => Some(model),
            LabelerConfig::Human => self.reference_model.as_deref(),
        }
    }
}

/// One resolved round: the feature probed and the labels supplied.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub batch_id: String,
    pub feature: String,
    pub labels: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PendingRecord {
    pub batch_id: String,
    pub feature: String,
}

/// What is written to disk: enough to rebuild the session by replay.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub session_id: String,
    pub config: SessionConfig,
    pub history: Vec<Action>,
    pub pending: Option<PendingRecord>,
}

pub struct Pending {
    pub batch_id: String,
    pub batch: CfBatch,
}

pub struct Session {
    pub id: String,
    pub config: SessionConfig,
    pub state: CalState,
    pub ground_truth: Option<Predictor>,
    pub reference: Option<InfluenceVector>,
    evaluator: Option<MetricEvaluator>,
    pub pending: Option<Pending>,
    pub history: Vec<Action>,
}

fn dataset_error(e: CalError) -> ApiError {
    ApiError::unprocessable("dataset_error", e.to_string())
}

impl Session {
    pub fn create(id: String, config: SessionConfig) -> Result<Self, ApiError> {
        config.validate()?;
        let d_train = config.data.load().map_err(dataset_error)?;
        let ground_truth = match config.ground_truth_path() {
            Some(p) => {
                let m = Predictor::load(p).map_err(dataset_error)?;
                m.check_schema(d_train.schema()).map_err(dataset_error)?;
                Some(m)
            }
            None => None,
        };
        let evaluator = match (&config.evaluation, &ground_truth) {
            (Some(e), Some(h_t)) => {
                let out_dist = e.out_dist.load().map_err(dataset_error)?;
                let in_dist = e.in_dist.load().map_err(dataset_error)?;
                out_dist.same_schema(d_train.schema()).map_err(dataset_error)?;
                let seed = seed::derive(config.seed, streams::METRIC);
                Some(MetricEvaluator::new(h_t, out_dist, in_dist, e.estimator, seed).map_err(dataset_error)?)
            }
            (Some(_), None) => {
                return Err(ApiError::invalid_config(
                    "evaluation needs a ground-truth model (synthetic labeler or reference_model)",
                ))
            }
            _ => None,
        };
        let reference = match &ground_truth {
            Some(h_t) => Some(
                influence_vector(h_t, &d_train, &config.estimator, seed::derive(config.seed, streams::REFERENCE))
                    .map_err(dataset_error)?,
            ),
            None => None,
        };
        let state = CalState::start(d_train, config.cal_config()).map_err(dataset_error)?;
        let mut s = Session {
            id,
            config,
            state,
            ground_truth,
            reference,
            evaluator,
            pending: None,
            history: Vec::new(),
        };
        s.record_metrics()?;
        Ok(s)
    }

    /// Rebuild a session from its snapshot by replaying every action.
    pub fn restore(snap: Snapshot) -> Result<Self, ApiError> {
        let mut s = Session::create(snap.session_id, snap.config)?;
        for a in snap.history {
            s.open_batch(a.batch_id.clone(), &a.feature)?;
            s.resolve(&a.batch_id, a.labels)?;
        }
        if let Some(p) = snap.pending {
            s.open_batch(p.batch_id, &p.feature)?;
        }
        Ok(s)
    }

    pub fn snapshot(&self) -> Snapshot {
        Snapshot {
            session_id: self.id.clone(),
            config: self.config.clone(),
            history: self.history.clone(),
            pending: self.pending.as_ref().map(|p| PendingRecord {
                batch_id: p.batch_id.clone(),
                feature: p.batch.feature.clone(),
            }),
        }
    }

    pub fn is_synthetic(&self) -> bool {
        matches!(self.config.labeler, LabelerConfig::Synthetic { .. })
    }

    pub fn next_batch_id(&self) -> String {
        format!("b{}", self.state.round() + 1)
    }

    fn record_metrics(&mut self) -> Result<(), ApiError> {
        if let Some(e) = &self.evaluator {
            let m = e.metrics(self.state.model()).map_err(ApiError::internal)?;
            self.state.set_metrics(m);
        }
        Ok(())
    }

    /// Draw the counterfactual batch for `feature` and hold it as pending.
    pub fn open_batch(&mut self, batch_id: String, feature: &str) -> Result<&Pending, ApiError> {
        if let Some(p) = &self.pending {
            return Err(ApiError::conflict(format!(
                "batch {} is still waiting for labels",
                p.batch_id
            )));
        }
        if self.state.training_set().schema().feature_index(feature).is_err() {
            return Err(ApiError::not_found(format!("unknown feature `{feature}`")));
        }
        let batch = self.state.counterfactual_batch(feature).map_err(ApiError::internal)?;
        Ok(self.pending.insert(Pending { batch_id, batch }))
    }

    /// Label the pending batch, retrain and record the round.
    pub fn resolve(&mut self, batch_id: &str, labels: Vec<u8>) -> Result<(), ApiError> {
        let pending = self
            .pending
            .as_ref()
            .ok_or_else(|| ApiError::conflict("no batch is waiting for labels"))?;
        if pending.batch_id != batch_id {
            return Err(ApiError::conflict(format!(
                "batch {batch_id} is not the pending batch {}",
                pending.batch_id
            )));
        }
        if labels.len() != pending.batch.rows.len() {
            return Err(ApiError::unprocessable(
                "invalid_labels",
                format!("expected {} labels, got {}", pending.batch.rows.len(), labels.len()),
            ));
        }
        if let Some(bad) = labels.iter().find(|&&y| y > 1) {
            return Err(ApiError::unprocessable("invalid_labels", format!("label {bad} is not 0 or 1")));
        }
        let pending = self.pending.take().expect("checked above");
        let feature = pending.batch.feature.clone();
        self.state
            .advance(Some(feature.clone()), &pending.batch.rows, &labels)
            .map_err(ApiError::internal)?;
        self.record_metrics()?;
        self.history.push(Action {
            batch_id: pending.batch_id,
            feature,
            labels,
        });
        Ok(())
    }

    /// Ground-truth labels for the pending batch (synthetic mode).
    pub fn synthetic_labels(&self) -> Option<Vec<u8>> {
        let h_t = self.ground_truth.as_ref().filter(|_| self.is_synthetic())?;
        let p = self.pending.as_ref()?;
        Some(p.batch.rows.iter().map(|r| h_t.predict(r).expect("schema checked at creation")).collect())
    }

    pub fn metrics(&self) -> Option<RoundMetrics> {
        self.state.log().rounds.last().and_then(|r| r.metrics)
    }

    pub fn curves(&self) -> ConvergenceCurves {
        let ms: Vec<RoundMetrics> = self.state.log().rounds.iter().filter_map(|r| r.metrics).collect();
        ConvergenceCurves::single(&ms)
    }

    pub fn state_json(&self) -> Value {
        let schema = self.state.training_set().schema();
        json!({
            "session_id": self.id,
            "round": self.state.round(),
            "labeler": if self.is_synthetic() { "synthetic" } else { "human" },
            "batch_size": self.config.batch_size,
            "train_size": self.state.training_set().len(),
            "features": schema.names().collect::<Vec<_>>(),
            "influences": self.state.influences().features,
            "reference_influences": self.reference.as_ref().map(|r| &r.features),
            "pending_batch": self.pending.as_ref().map(|p| json!({
                "batch_id": p.batch_id,
                "feature": p.batch.feature,
                "size": p.batch.rows.len(),
            })),
            "history": self.history.iter().map(|a| json!({
                "batch_id": a.batch_id,
                "feature": a.feature,
                "labels": a.labels,
            })).collect::<Vec<_>>(),
            "metrics": self.metrics(),
            "curves": self.curves(),
        })
    }

    pub fn batch_json(&self) -> Value {
        let p = self.pending.as_ref().expect("pending batch");
        let schema = self.state.training_set().schema();
        json!({
            "batch_id": p.batch_id,
            "feature": p.batch.feature,
            "rows": p.batch.rows.iter().map(|r| decode_row(schema, r)).collect::<Vec<_>>(),
            "provenance": p.batch.provenance.iter().map(|pr| json!({
                "base_row": pr.base_row,
                "substituted_value": decode_value(schema, schema.feature_index(&p.batch.feature).expect("known"), pr.substituted_value),
            })).collect::<Vec<_>>(),
        })
    }
}

fn decode_value(schema: &FeatureSchema, index: usize, v: f64) -> Value {
    match &schema.features()[index].kind {
        FeatureKind::Numeric => json!(v),
        FeatureKind::Categorical(_) => json!(schema.decode_value(index, v)),
    }
}

fn decode_row(schema: &FeatureSchema, row: &[f64]) -> Value {
    let mut m = Map::new();
    for (i, f) in schema.features().iter().enumerate() {
        m.insert(f.name.clone(), decode_value(schema, i, row[i]));
    }
    Value::Object(m)
}

/// Milliseconds since `start`.
pub fn elapsed_ms(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1000.0
}

/// Sessions persisted as `<dir>/<id>.json`.
#[derive(Clone, Debug)]
pub struct Store {
    dir: PathBuf,
}

impl Store {
    pub fn open(dir: impl Into<PathBuf>) -> std::io::Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        Ok(Store { dir })
    }

    pub fn save(&self, snap: &Snapshot) -> std::io::Result<()> {
        let path = self.dir.join(format!("{}.json", snap.session_id));
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, serde_json::to_vec_pretty(snap)?)?;
        std::fs::rename(tmp, path)
    }

    pub fn load_all(&self) -> std::io::Result<Vec<Snapshot>> {
        let mut out = Vec::new();
        let mut paths: Vec<PathBuf> = std::fs::read_dir(&self.dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        paths.sort();
        for p in paths {
            let snap: Snapshot = serde_json::from_slice(&std::fs::read(&p)?)?;
            out.push(snap);
        }
        Ok(out)
    }
}

