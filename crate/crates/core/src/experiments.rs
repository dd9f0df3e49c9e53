//! Multi-run convergence experiments.
//!
//! Each run trains a ground-truth model `h_t` on the full dataset, excludes
//! the rows matching a random bias predicate to get a biased set, runs the
//! CAL loop under one oracle setting with `h_t` as labeler, and records
//! three metrics after every round. Curves are mean and standard deviation
//! across runs per round.

use std::io::Write;
use std::path::Path;

use indexmap::IndexMap;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cal::{
    labeling_oracle_from_model, run_cal_with, BatchSource, CalConfig, FeatureOracle, GuidedOracle, RandomOracle,
    RoundMetrics, RunLog,
};
use crate::data::{induce_bias, split, BiasConfig, Dataset};
use crate::error::{CalError, Result};
use crate::influence::{influence_mse, influence_vector, EstimatorSettings, InfluenceVector};
use crate::models::{error, train, ModelSpec, Predictor};
use crate::seed::{self, streams};
use crate::synth::DataSource;

pub const METRICS: [&str; 3] = ["influence_mse", "in_dist_error", "out_dist_error"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OracleSetting {
    Guided,
    Random,
    NonCounterfactual,
}

impl OracleSetting {
    pub fn name(self) -> &'static str {
        match self {
            OracleSetting::Guided => "guided",
            OracleSetting::Random => "random",
            OracleSetting::NonCounterfactual => "non-counterfactual",
        }
    }
}

impl std::fmt::Display for OracleSetting {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for OracleSetting {
    type Err = CalError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "guided" => Ok(OracleSetting::Guided),
            "random" => Ok(OracleSetting::Random),
            "non-counterfactual" | "non_counterfactual" => Ok(OracleSetting::NonCounterfactual),
            other => Err(CalError::InvalidArgument(format!("unknown oracle setting `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ThetaPolicy {
    /// One predicate for all runs.
    Fixed,
    /// A fresh predicate per run.
    #[default]
    PerRun,
}

/// Split fractions. `eval` is taken from the full dataset; `test` and
/// `pool` are fractions of the biased set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitFractions {
    pub eval: f64,
    pub test: f64,
    pub pool: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions {
            eval: 0.2,
            test: 0.2,
            pool: 0.2,
        }
    }
}

impl SplitFractions {
    fn validate(&self) -> Result<()> {
        let ok = |x: f64| x > 0.0 && x < 1.0;
        if !(ok(self.eval) && ok(self.test) && ok(self.pool) && self.test + self.pool < 1.0) {
            return Err(CalError::InvalidArgument(format!(
                "split fractions eval={}, test={}, pool={} must lie in (0, 1) with test + pool < 1",
                self.eval, self.test, self.pool
            )));
        }
        Ok(())
    }
}

fn default_runs() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub setting: OracleSetting,
    pub data: DataSource,
    /// Model family and hyperparameters for both `h_t` and the audited model.
    pub model: ModelSpec,
    pub batch_size: usize,
    pub epochs: usize,
    #[serde(default)]
    pub convergence_tol: Option<f64>,
    /// Estimator used inside the loop (selector and round records).
    #[serde(default)]
    pub estimator: EstimatorSettings,
    /// Estimator for the influence-MSE metric on the evaluation split.
    #[serde(default)]
    pub metric_estimator: EstimatorSettings,
    #[serde(default = "default_runs")]
    pub runs: usize,
    #[serde(default)]
    pub theta_policy: ThetaPolicy,
    #[serde(default)]
    pub bias: BiasConfig,
    #[serde(default)]
    pub splits: SplitFractions,
    pub seed: u64,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.runs == 0 {
            return Err(CalError::InvalidArgument("runs must be >= 1".into()));
        }
        self.bias.validate()?;
        self.splits.validate()?;
        self.metric_estimator.validate()?;
        self.cal_config(0).validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_json(&std::fs::read_to_string(path).map_err(|e| CalError::io(path, e))?)
    }

    pub fn run_seed(&self, run: usize) -> u64 {
        seed::derive_indexed(self.seed, streams::RUN, run as u64)
    }

    fn cal_config(&self, run_seed: u64) -> CalConfig {
        CalConfig {
            batch_size: self.batch_size,
            max_epochs: self.epochs,
            convergence_tol: self.convergence_tol,
            model: self.model.clone(),
            estimator: self.estimator,
            seed: seed::derive(run_seed, streams::CAL),
        }
    }

    fn comparable(&self, other: &ExperimentConfig) -> bool {
        let mut a = self.clone();
        a.setting = other.setting;
        a == *other
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Curve {
    /// Per-round mean and sample standard deviation (0 for a single run).
    fn aggregate(per_run: &[Vec<f64>]) -> Curve {
        let len = per_run[0].len();
        let n = per_run.len() as f64;
        let mut c = Curve {
            mean: Vec::with_capacity(len),
            std: Vec::with_capacity(len),
        };
        for r in 0..len {
            let mean = per_run.iter().map(|v| v[r]).sum::<f64>() / n;
            let var = if per_run.len() > 1 {
                per_run.iter().map(|v| (v[r] - mean).powi(2)).sum::<f64>() / (n - 1.0)
            } else {
                0.0
            };
            c.mean.push(mean);
            c.std.push(var.sqrt());
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceCurves {
    pub runs: usize,
    pub influence_mse: Curve,
    pub in_dist_error: Curve,
    pub out_dist_error: Curve,
}

impl ConvergenceCurves {
    pub fn len(&self) -> usize {
        self.influence_mse.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn metric(&self, name: &str) -> Option<&Curve> {
        match name {
            "influence_mse" => Some(&self.influence_mse),
            "in_dist_error" => Some(&self.in_dist_error),
            "out_dist_error" => Some(&self.out_dist_error),
            _ => None,
        }
    }

    /// Curves from run logs whose rounds all carry metrics. Runs that stopped
    /// early hold their last value to the longest run's length.
    pub fn from_logs(logs: &[RunLog]) -> Result<Self> {
        if logs.is_empty() {
            return Err(CalError::InvalidArgument("no runs to aggregate".into()));
        }
        let len = logs.iter().map(|l| l.rounds.len()).max().unwrap_or(0);
        let mut series: [Vec<Vec<f64>>; 3] = Default::default();
        for log in logs {
            let mut ms = Vec::with_capacity(len);
            for r in &log.rounds {
                ms.push(r.metrics.ok_or_else(|| {
                    CalError::InvalidArgument(format!("round {} has no metrics", r.round))
                })?);
            }
            let last = *ms.last().expect("round 0 exists");
            ms.resize(len, last);
            series[0].push(ms.iter().map(|m| m.influence_mse).collect());
            series[1].push(ms.iter().map(|m| m.in_dist_error).collect());
            series[2].push(ms.iter().map(|m| m.out_dist_error).collect());
        }
        Ok(ConvergenceCurves {
            runs: logs.len(),
            influence_mse: Curve::aggregate(&series[0]),
            in_dist_error: Curve::aggregate(&series[1]),
            out_dist_error: Curve::aggregate(&series[2]),
        })
    }

    /// Single-run curves from metric records.
    pub fn single(metrics: &[RoundMetrics]) -> Self {
        let pick = |f: fn(&RoundMetrics) -> f64| Curve {
            mean: metrics.iter().map(f).collect(),
            std: vec![0.0; metrics.len()],
        };
        ConvergenceCurves {
            runs: 1,
            influence_mse: pick(|m| m.influence_mse),
            in_dist_error: pick(|m| m.in_dist_error),
            out_dist_error: pick(|m| m.out_dist_error),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("round,metric,mean,std\n");
        for name in METRICS {
            let c = self.metric(name).expect("known metric");
            for (r, (m, sd)) in c.mean.iter().zip(&c.std).enumerate() {
                s.push_str(&format!("{r},{name},{m},{sd}\n"));
            }
        }
        s
    }
}

/// Write `curves.csv` and `curves.json` into `dir`.
pub fn emit_curves(curves: &ConvergenceCurves, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| CalError::io(dir, e))?;
    let csv_path = dir.join("curves.csv");
    std::fs::write(&csv_path, curves.to_csv()).map_err(|e| CalError::io(&csv_path, e))?;
    let json_path = dir.join("curves.json");
    let mut json = serde_json::to_string_pretty(curves)?;
    json.push('\n');
    std::fs::write(&json_path, json).map_err(|e| CalError::io(&json_path, e))?;
    Ok(())
}

/// Everything a run produced besides its log.
#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub config: ExperimentConfig,
    pub curves: ConvergenceCurves,
    pub logs: Vec<RunLog>,
    pub ground_truth: Predictor,
}

impl ExperimentOutcome {
    /// Curves plus one JSONL log per run under `dir/<setting>/`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref().join(self.config.setting.name());
        emit_curves(&self.curves, &dir)?;
        for (i, log) in self.logs.iter().enumerate() {
            let path = dir.join(format!("run-{i}.jsonl"));
            let mut f = std::io::BufWriter::new(std::fs::File::create(&path).map_err(|e| CalError::io(&path, e))?);
            log.write_jsonl(&mut f).map_err(|e| CalError::io(&path, e))?;
            f.flush().map_err(|e| CalError::io(&path, e))?;
        }
        Ok(())
    }
}

/// Frozen evaluation sets and reference influences. Every call uses the
/// same estimator seed, for the reference model and for every round.
#[derive(Clone, Debug)]
pub struct MetricEvaluator {
    out_dist: Dataset,
    in_dist: Dataset,
    reference: InfluenceVector,
    settings: EstimatorSettings,
    seed: u64,
}

impl MetricEvaluator {
    /// `out_dist` is the unbiased set the influences and out-of-distribution
    /// error are measured on; `in_dist` gives the in-distribution error.
    pub fn new(
        h_t: &Predictor,
        out_dist: Dataset,
        in_dist: Dataset,
        settings: EstimatorSettings,
        seed: u64,
    ) -> Result<Self> {
        settings.validate()?;
        in_dist.same_schema(out_dist.schema())?;
        Ok(MetricEvaluator {
            reference: influence_vector(h_t, &out_dist, &settings, seed)?,
            out_dist,
            in_dist,
            settings,
            seed,
        })
    }

    pub fn reference(&self) -> &InfluenceVector {
        &self.reference
    }

    pub fn metrics(&self, model: &Predictor) -> Result<RoundMetrics> {
        let iota = influence_vector(model, &self.out_dist, &self.settings, self.seed)?;
        Ok(RoundMetrics {
            influence_mse: influence_mse(&iota, &self.reference)?,
            in_dist_error: error(model, &self.in_dist)?,
            out_dist_error: error(model, &self.out_dist)?,
        })
    }
}

fn run_once(cfg: &ExperimentConfig, d: &Dataset, h_t: &Predictor, run: usize) -> Result<RunLog> {
    let run_seed = cfg.run_seed(run);
    let theta_seed = match cfg.theta_policy {
        ThetaPolicy::Fixed => seed::derive(cfg.seed, streams::THETA),
        ThetaPolicy::PerRun => seed::derive(run_seed, streams::THETA),
    };
    let split_seed = |i| seed::derive_indexed(run_seed, streams::SPLIT, i);
    let (dev, eval) = split(d, cfg.splits.eval, split_seed(0))?;
    let bias = induce_bias(&dev, &cfg.bias, theta_seed)?;
    let (rest, test) = split(&bias.biased, cfg.splits.test, split_seed(1))?;
    let (d_train, pool) = split(&rest, cfg.splits.pool / (1.0 - cfg.splits.test), split_seed(2))?;

    let evaluator = MetricEvaluator::new(
        h_t,
        eval,
        test,
        cfg.metric_estimator,
        seed::derive(run_seed, streams::METRIC),
    )?;

    let cal = cfg.cal_config(run_seed);
    let mut labeler = labeling_oracle_from_model(h_t.clone());
    let (mut selector, source): (Box<dyn FeatureOracle>, BatchSource) = match cfg.setting {
        OracleSetting::Guided => {
            let reference =
                influence_vector(h_t, &d_train, &cfg.estimator, seed::derive(run_seed, streams::REFERENCE))?;
            (Box::new(GuidedOracle::new(reference)), BatchSource::Counterfactual)
        }
        OracleSetting::Random => (
            Box::new(RandomOracle::new(d.schema().clone(), run_seed)),
            BatchSource::Counterfactual,
        ),
        OracleSetting::NonCounterfactual => (
            Box::new(RandomOracle::new(d.schema().clone(), run_seed)),
            BatchSource::Pool(pool),
        ),
    };
    let mut hook = |_: usize, model: &Predictor| evaluator.metrics(model).map(Some);
    let (_, log) = run_cal_with(d_train, &mut labeler, selector.as_mut(), &source, &cal, &mut hook)?;
    Ok(log)
}

/// Run every run of the experiment on a pool of `threads` workers (0 means
/// rayon's default). Results do not depend on the thread count.
pub fn run_experiment_with(cfg: &ExperimentConfig, threads: usize) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let d = cfg.data.load()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CalError::InvalidArgument(format!("thread pool: {e}")))?;
    pool.install(|| {
        let h_t = train(&d, &cfg.model, seed::derive(cfg.seed, streams::TRUTH))?.predictor;
        let logs = (0..cfg.runs)
            .into_par_iter()
            .map(|i| run_once(cfg, &d, &h_t, i))
            .collect::<Result<Vec<_>>>()?;
        Ok(ExperimentOutcome {
            config: cfg.clone(),
            curves: ConvergenceCurves::from_logs(&logs)?,
            logs,
            ground_truth: h_t,
        })
    })
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ConvergenceCurves> {
    Ok(run_experiment_with(cfg, 0)?.curves)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub initial: f64,
    pub r#final: f64,
    /// `final / initial`; `None` when the initial mean is 0.
    pub ratio: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SettingSummary {
    pub setting: OracleSetting,
    pub metrics: IndexMap<String, MetricSummary>,
}

/// Paired final-round difference `a − b` across runs with the same index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedDelta {
    pub a: usize,
    pub b: usize,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub settings: Vec<SettingSummary>,
    pub deltas: Vec<PairedDelta>,
}

fn final_values(log: &RunLog) -> RoundMetrics {
    log.rounds.last().and_then(|r| r.metrics).expect("experiment rounds carry metrics")
}

fn metric_value(m: &RoundMetrics, name: &str) -> f64 {
    match name {
        "influence_mse" => m.influence_mse,
        "in_dist_error" => m.in_dist_error,
        _ => m.out_dist_error,
    }
}

/// Summaries and paired deltas for outcomes of configs that differ only in
/// oracle setting.
pub fn compare_outcomes(outcomes: &[ExperimentOutcome]) -> Result<Comparison> {
    let first = outcomes
        .first()
        .ok_or_else(|| CalError::NotComparable("no experiments to compare".into()))?;
    for o in outcomes {
        if !first.config.comparable(&o.config) {
            return Err(CalError::NotComparable(
                "configs differ in more than the oracle setting".into(),
            ));
        }
    }
    let settings = outcomes
        .iter()
        .map(|o| SettingSummary {
            setting: o.config.setting,
            metrics: METRICS
                .iter()
                .map(|&name| {
                    let c = o.curves.metric(name).expect("known metric");
                    let initial = c.mean[0];
                    let fin = *c.mean.last().expect("nonempty curve");
                    let ratio = (initial != 0.0).then(|| fin / initial);
                    (
                        name.to_string(),
                        MetricSummary {
                            initial,
                            r#final: fin,
                            ratio,
                        },
                    )
                })
                .collect(),
        })
        .collect();
    let mut deltas = Vec::new();
    for a in 0..outcomes.len() {
        for b in a + 1..outcomes.len() {
            for name in METRICS {
                let diffs: Vec<Vec<f64>> = outcomes[a]
                    .logs
                    .iter()
                    .zip(&outcomes[b].logs)
                    .map(|(la, lb)| {
                        vec![metric_value(&final_values(la), name) - metric_value(&final_values(lb), name)]
                    })
                    .collect();
                let c = Curve::aggregate(&diffs);
                deltas.push(PairedDelta {
                    a,
                    b,
                    metric: name.to_string(),
                    mean: c.mean[0],
                    std: c.std[0],
                });
            }
        }
    }
    Ok(Comparison { settings, deltas })
}

pub fn compare_settings(cfgs: &[ExperimentConfig], threads: usize) -> Result<Comparison> {
    if let Some(first) = cfgs.first() {
        if let Some(bad) = cfgs.iter().position(|c| !first.comparable(c)) {
            return Err(CalError::NotComparable(format!(
                "config {bad} differs from config 0 in more than the oracle setting"
            )));
        }
    }
    let outcomes = cfgs
        .iter()
        .map(|c| run_experiment_with(c, threads))
        .collect::<Result<Vec<_>>>()?;
    compare_outcomes(&outcomes)
}
