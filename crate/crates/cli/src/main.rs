//! `cal-audit`: train models, measure feature influence, check the
//! covariate-shift theorems, run counterfactual active learning loops and
//! experiments, and host the interactive audit service.
//!
//! Exit codes: 0 success, 2 bad input (flags, files, data), 1 anything else.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use cal_core::cal::{
    labeling_oracle_from_model, run_cal_with, BatchSource, CalConfig, FeatureOracle, GuidedOracle, RandomOracle,
    RoundMetrics,
};
use cal_core::data::{induce_bias, load_csv, write_csv, BiasConfig, Dataset, FeatureSchema, Predicate};
use cal_core::experiments::{compare_outcomes, run_experiment_with, ExperimentConfig, OracleSetting};
use cal_core::influence::{influence_vector, EstimatorMode, EstimatorSettings};
use cal_core::models::{train, ModelKind, ModelSpec, Predictor};
use cal_core::synth::SynthKind;
use cal_core::theory::{check_theorem2, witness_search, WitnessConfig};
use cal_core::CalError;

#[derive(Parser)]
#[command(name = "cal-audit", version, about = "Causal influence auditing with counterfactual active learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write it as JSON.
    Train(TrainArgs),
    /// Print the per-feature influence vector of a model.
    Audit(AuditArgs),
    /// Check a theorem on data and print the report.
    Theory(TheoryArgs),
    /// Run the counterfactual active learning loop.
    Cal(CalArgs),
    /// Run a multi-run convergence experiment.
    Experiment(ExperimentArgs),
    /// Run one experiment per oracle setting and compare them.
    Compare(CompareArgs),
    /// Serve the interactive audit API.
    Serve(ServeArgs),
    /// Write a bundled synthetic dataset and its schema.
    Synth(SynthArgs),
}

#[derive(Args)]
struct DataArgs {
    /// CSV file with a header row.
    #[arg(long)]
    data: PathBuf,
    /// Schema sidecar JSON.
    #[arg(long)]
    schema: PathBuf,
}

#[derive(Args, Clone)]
struct EstimatorArgs {
    #[arg(long, value_enum, default_value_t = EstimatorChoice::Auto)]
    estimator: EstimatorChoice,
    /// Monte-Carlo draws per feature.
    #[arg(long)]
    draws: Option<usize>,
    /// Largest dataset the exact estimator accepts.
    #[arg(long)]
    exact_limit: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum EstimatorChoice {
    Exact,
    Mc,
    Auto,
}

impl EstimatorArgs {
    fn settings(&self) -> EstimatorSettings {
        let mut s = EstimatorSettings {
            mode: match self.estimator {
                EstimatorChoice::Exact => EstimatorMode::Exact,
                EstimatorChoice::Mc => EstimatorMode::Mc,
                EstimatorChoice::Auto => EstimatorMode::Auto,
            },
            draws: self.draws,
            ..EstimatorSettings::default()
        };
        if let Some(l) = self.exact_limit {
            s.exact_limit = l;
        }
        s
    }
}

#[derive(Args)]
struct ModelArgs {
    /// Model family.
    #[arg(long, value_enum, default_value_t = KindArg::Linear)]
    kind: KindArg,
    /// JSON file with hyperparameters ({"linear": {...}, "tree": {...}, "forest": {...}}).
    #[arg(long)]
    hyperparams: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Linear,
    Tree,
    Forest,
}

impl From<KindArg> for ModelKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Linear => ModelKind::Linear,
            KindArg::Tree => ModelKind::Tree,
            KindArg::Forest => ModelKind::Forest,
        }
    }
}

impl ModelArgs {
    fn spec(&self, kind: KindArg) -> Result<ModelSpec, Failure> {
        let mut spec = ModelSpec::new(kind.into());
        if let Some(p) = &self.hyperparams {
            spec.hyperparams = read_json(p)?;
        }
        spec.hyperparams.validate()?;
        Ok(spec)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output model file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AuditArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Saved model to audit.
    #[arg(long, conflicts_with = "train")]
    model: Option<PathBuf>,
    /// Train a model of this family on the data and audit it.
    #[arg(long, value_enum)]
    train: Option<KindArg>,
    #[arg(long)]
    hyperparams: Option<PathBuf>,
    #[command(flatten)]
    estimator: EstimatorArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Check {
    Thm1,
    Thm2,
}

#[derive(Args)]
struct TheoryArgs {
    #[arg(long, value_enum)]
    check: Check,
    #[command(flatten)]
    data: DataArgs,
    /// Model under test.
    #[arg(long)]
    model: PathBuf,
    /// Second model for the influence-gap bound.
    #[arg(long)]
    model2: Option<PathBuf>,
    /// Feature to check; all features when omitted.
    #[arg(long)]
    feature: Option<String>,
    /// Region predicate, e.g. "a=1,b<=2".
    #[arg(long, conflicts_with = "auto_theta")]
    phi: Option<String>,
    /// Use a random bias predicate induced from the data as the region.
    #[arg(long)]
    auto_theta: bool,
    #[arg(long, default_value_t = 500)]
    trials: usize,
    #[arg(long)]
    exhaustive_limit: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum OracleArg {
    Guided,
    Random,
    NonCounterfactual,
}

impl From<OracleArg> for OracleSetting {
    fn from(o: OracleArg) -> Self {
        match o {
            OracleArg::Guided => OracleSetting::Guided,
            OracleArg::Random => OracleSetting::Random,
            OracleArg::NonCounterfactual => OracleSetting::NonCounterfactual,
        }
    }
}

#[derive(Args)]
struct CalArgs {
    /// JSON file with any of: data, schema, model, pool, oracle, kind,
    /// hyperparams, k, epochs, convergence_tol, estimator, seed. Flags win.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    schema: Option<PathBuf>,
    /// Ground-truth model used as the labeling oracle.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Fresh-sample pool CSV for the non-counterfactual oracle.
    #[arg(long)]
    pool: Option<PathBuf>,
    #[arg(long, value_enum)]
    oracle: Option<OracleArg>,
    /// Family of the model retrained in the loop.
    #[arg(long, value_enum)]
    kind: Option<KindArg>,
    /// Labeling batch size.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for run.jsonl and model.json; JSONL on stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExperimentArgs {
    /// Experiment config JSON. Flags override its fields.
    #[arg(long)]
    config: PathBuf,
    #[arg(long, value_enum)]
    oracle: Option<OracleArg>,
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for runs (output does not depend on it).
    #[arg(long, default_value_t = 0)]
    parallel: usize,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct CompareArgs {
    /// Experiment config JSON; repeat for several, or give one with --oracle.
    #[arg(long, required = true)]
    config: Vec<PathBuf>,
    /// Oracle settings to run with a single config.
    #[arg(long, value_enum, value_delimiter = ',')]
    oracle: Vec<OracleArg>,
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 0)]
    parallel: usize,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct ServeArgs {
    /// Service config JSON (host, port, data_dir, cors_origins).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    port: Option<u16>,
    /// Directory for session snapshots.
    #[arg(long)]
    data_dir: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, value_enum)]
    kind: SynthArg,
    #[arg(long, default_value_t = 5000)]
    rows: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV output path.
    #[arg(long)]
    out: PathBuf,
    /// Schema output path; `<out>.schema.json` when omitted.
    #[arg(long)]
    schema: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SynthArg {
    Adult,
    Arrests,
    Lending,
}

impl From<SynthArg> for SynthKind {
    fn from(s: SynthArg) -> Self {
        match s {
            SynthArg::Adult => SynthKind::Adult,
            SynthArg::Arrests => SynthKind::Arrests,
            SynthArg::Lending => SynthKind::Lending,
        }
    }
}

/// A failed command with its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn input(message: impl Into<String>) -> Self {
        Failure {
            code: 2,
            message: message.into(),
        }
    }
}

impl From<CalError> for Failure {
    fn from(e: CalError) -> Self {
        Failure {
            code: if e.is_input_error() { 2 } else { 1 },
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure {
            code: 1,
            message: e.to_string(),
        }
    }
}

type Outcome = Result<(), Failure>;

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::input(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::input(format!("{}: {e}", path.display())))
}

fn read_json_value(path: &Path) -> Result<Value, Failure> {
    read_json(path)
}

fn load_data(data: &Path, schema: &Path) -> Result<Dataset, Failure> {
    let schema = FeatureSchema::load(schema)?;
    Ok(load_csv(data, &schema)?)
}

fn print_json(v: &impl serde::Serialize) -> Outcome {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, v).map_err(|e| Failure::input(e.to_string()))?;
    writeln!(out)?;
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Outcome {
    let d = load_data(&a.data.data, &a.data.schema)?;
    let fit = train(&d, &a.model.spec(a.model.kind)?, a.seed)?;
    eprintln!("training error {:.6}", fit.training_error);
    match a.out {
        Some(p) => {
            fit.predictor.save(&p)?;
            println!("{}", p.display());
        }
        None => println!("{}", fit.predictor.to_json()?),
    }
    Ok(())
}

fn cmd_audit(a: AuditArgs) -> Outcome {
    let d = load_data(&a.data.data, &a.data.schema)?;
    let h = match (&a.model, a.train) {
        (Some(p), _) => Predictor::load(p)?,
        (None, Some(kind)) => {
            let m = ModelArgs {
                kind,
                hyperparams: a.hyperparams.clone(),
            };
            train(&d, &m.spec(kind)?, a.seed)?.predictor
        }
        (None, None) => return Err(Failure::input("audit needs --model FILE or --train KIND")),
    };
    let settings = a.estimator.settings();
    settings.validate()?;
    print_json(&influence_vector(&h, &d, &settings, a.seed)?)
}

fn cmd_theory(a: TheoryArgs) -> Outcome {
    if a.trials == 0 {
        return Err(Failure::input("--trials must be at least 1"));
    }
    let d = load_data(&a.data.data, &a.data.schema)?;
    let h = Predictor::load(&a.model)?;
    let features: Vec<String> = match &a.feature {
        Some(f) => {
            d.schema().feature_index(f)?;
            vec![f.clone()]
        }
        None => d.schema().names().map(str::to_string).collect(),
    };
    let mut reports = Vec::new();
    match a.check {
        Check::Thm2 => {
            let path = a.model2.as_ref().ok_or_else(|| Failure::input("thm2 needs --model2"))?;
            let h2 = Predictor::load(path)?;
            for f in &features {
                reports.push(serde_json::to_value(check_theorem2(&h, &h2, &d, f)?).expect("serializable"));
            }
        }
        Check::Thm1 => {
            let phi = match (&a.phi, a.auto_theta) {
                (Some(text), _) => Predicate::parse(d.schema(), text)?,
                (None, true) => induce_bias(&d, &BiasConfig::default(), a.seed)?.theta,
                (None, false) => return Err(Failure::input("thm1 needs --phi or --auto-theta")),
            };
            let mut cfg = WitnessConfig {
                trials: a.trials,
                ..WitnessConfig::default()
            };
            if let Some(l) = a.exhaustive_limit {
                cfg.exhaustive_limit = l;
            }
            for f in &features {
                reports.push(serde_json::to_value(witness_search(&h, &d, &phi, f, &cfg, a.seed)?).expect("serializable"));
            }
        }
    }
    if a.feature.is_some() {
        print_json(&reports[0])
    } else {
        print_json(&reports)
    }
}

/// Look up a string-valued override, flags first.
fn pick_path(flag: &Option<PathBuf>, cfg: &Value, key: &str) -> Result<Option<PathBuf>, Failure> {
    if let Some(p) = flag {
        return Ok(Some(p.clone()));
    }
    match cfg.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::String(s)) => Ok(Some(PathBuf::from(s))),
        Some(_) => Err(Failure::input(format!("config field `{key}` must be a string"))),
    }
}

fn pick<T: serde::de::DeserializeOwned>(flag: Option<T>, cfg: &Value, key: &str) -> Result<Option<T>, Failure> {
    if flag.is_some() {
        return Ok(flag);
    }
    match cfg.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(v) => serde_json::from_value(v.clone())
            .map(Some)
            .map_err(|e| Failure::input(format!("config field `{key}`: {e}"))),
    }
}

const CAL_CONFIG_KEYS: [&str; 12] = [
    "data", "schema", "model", "pool", "oracle", "kind", "hyperparams", "k", "epochs", "convergence_tol",
    "estimator", "seed",
];

fn cmd_cal(a: CalArgs) -> Outcome {
    let cfg = match &a.config {
        Some(p) => read_json_value(p)?,
        None => json!({}),
    };
    if let Some(obj) = cfg.as_object() {
        if let Some(k) = obj.keys().find(|k| !CAL_CONFIG_KEYS.contains(&k.as_str())) {
            return Err(Failure::input(format!("unknown config field `{k}`")));
        }
    } else {
        return Err(Failure::input("cal config must be a JSON object"));
    }
    let need = |v: Option<PathBuf>, what: &str| v.ok_or_else(|| Failure::input(format!("missing --{what}")));
    let data = need(pick_path(&a.data, &cfg, "data")?, "data")?;
    let schema = need(pick_path(&a.schema, &cfg, "schema")?, "schema")?;
    let model = need(pick_path(&a.model, &cfg, "model")?, "model")?;
    let seed: u64 = pick(a.seed, &cfg, "seed")?.ok_or_else(|| Failure::input("missing --seed"))?;
    let oracle: OracleSetting = match a.oracle {
        Some(o) => o.into(),
        None => pick(None, &cfg, "oracle")?.unwrap_or(OracleSetting::Guided),
    };
    let kind: ModelKind = match a.kind {
        Some(k) => k.into(),
        None => pick(None, &cfg, "kind")?.unwrap_or(ModelKind::Linear),
    };
    let mut spec = ModelSpec::new(kind);
    if let Some(h) = pick(None, &cfg, "hyperparams")? {
        spec.hyperparams = h;
    }
    let cal = CalConfig {
        batch_size: pick(a.k, &cfg, "k")?.unwrap_or(200),
        max_epochs: pick(a.epochs, &cfg, "epochs")?.unwrap_or(20),
        convergence_tol: pick(None, &cfg, "convergence_tol")?,
        model: spec,
        estimator: pick(None, &cfg, "estimator")?.unwrap_or_default(),
        seed,
    };
    cal.validate()?;

    let d = load_data(&data, &schema)?;
    let h_t = Predictor::load(&model)?;
    let mut labeler = labeling_oracle_from_model(h_t.clone());
    let (mut selector, source): (Box<dyn FeatureOracle>, BatchSource) = match oracle {
        OracleSetting::Guided => {
            let reference = influence_vector(&h_t, &d, &cal.estimator, cal_core::seed::derive(seed, cal_core::seed::streams::REFERENCE))?;
            (Box::new(GuidedOracle::new(reference)), BatchSource::Counterfactual)
        }
        OracleSetting::Random => (Box::new(RandomOracle::new(d.schema().clone(), seed)), BatchSource::Counterfactual),
        OracleSetting::NonCounterfactual => {
            let pool = need(pick_path(&a.pool, &cfg, "pool")?, "pool")?;
            (
                Box::new(RandomOracle::new(d.schema().clone(), seed)),
                BatchSource::Pool(load_data(&pool, &schema)?),
            )
        }
    };
    let mut no_metrics = |_: usize, _: &Predictor| Ok::<Option<RoundMetrics>, CalError>(None);
    let (final_model, log) = run_cal_with(d, &mut labeler, selector.as_mut(), &source, &cal, &mut no_metrics)?;
    match a.out {
        Some(dir) => {
            std::fs::create_dir_all(&dir).map_err(|e| Failure::input(format!("{}: {e}", dir.display())))?;
            let run = dir.join("run.jsonl");
            std::fs::write(&run, log.to_jsonl())?;
            let m = dir.join("model.json");
            final_model.save(&m)?;
            println!("{}\n{}", run.display(), m.display());
        }
        None => print!("{}", log.to_jsonl()),
    }
    Ok(())
}

fn experiment_config(
    path: &Path,
    oracle: Option<OracleArg>,
    runs: Option<usize>,
    k: Option<usize>,
    epochs: Option<usize>,
    seed: Option<u64>,
) -> Result<ExperimentConfig, Failure> {
    let mut v = read_json_value(path)?;
    let obj = v
        .as_object_mut()
        .ok_or_else(|| Failure::input(format!("{}: config must be a JSON object", path.display())))?;
    if let Some(o) = oracle {
        obj.insert("setting".into(), json!(OracleSetting::from(o)));
    }
    if let Some(r) = runs {
        obj.insert("runs".into(), json!(r));
    }
    if let Some(k) = k {
        obj.insert("batch_size".into(), json!(k));
    }
    if let Some(e) = epochs {
        obj.insert("epochs".into(), json!(e));
    }
    if let Some(s) = seed {
        obj.insert("seed".into(), json!(s));
    }
    if !obj.contains_key("seed") {
        return Err(Failure::input("missing --seed"));
    }
    let cfg: ExperimentConfig =
        serde_json::from_value(v).map_err(|e| Failure::input(format!("{}: {e}", path.display())))?;
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_experiment(a: ExperimentArgs) -> Outcome {
    let cfg = experiment_config(&a.config, a.oracle, a.runs, a.k, a.epochs, a.seed)?;
    let outcome = run_experiment_with(&cfg, a.parallel)?;
    outcome.write(&a.out)?;
    let dir = a.out.join(cfg.setting.name());
    println!("{}", dir.join("curves.csv").display());
    println!("{}", dir.join("curves.json").display());
    Ok(())
}

fn cmd_compare(a: CompareArgs) -> Outcome {
    let mut cfgs = Vec::new();
    if a.oracle.is_empty() {
        for p in &a.config {
            cfgs.push(experiment_config(p, None, a.runs, a.k, a.epochs, a.seed)?);
        }
    } else {
        if a.config.len() != 1 {
            return Err(Failure::input("--oracle takes exactly one --config"));
        }
        for &o in &a.oracle {
            cfgs.push(experiment_config(&a.config[0], Some(o), a.runs, a.k, a.epochs, a.seed)?);
        }
    }
    let mut outcomes = Vec::new();
    for c in &cfgs {
        let o = run_experiment_with(c, a.parallel)?;
        o.write(&a.out)?;
        outcomes.push(o);
    }
    let table = compare_outcomes(&outcomes)?;
    std::fs::create_dir_all(&a.out)?;
    std::fs::write(
        a.out.join("comparison.json"),
        serde_json::to_string_pretty(&table).expect("serializable") + "\n",
    )?;
    print_json(&table)
}

fn cmd_serve(a: ServeArgs) -> Outcome {
    let mut service: cal_service::ServiceConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => Default::default(),
    };
    if a.data_dir.is_some() {
        service.data_dir = a.data_dir.clone();
    }
    let env = std::env::var(cal_service::PORT_ENV).ok();
    let port = cal_service::resolve_port(a.port, env.as_deref(), service.port).map_err(Failure::input)?;
    let host = service.host.clone().unwrap_or_else(|| "127.0.0.1".into());
    let state = match &service.data_dir {
        Some(dir) => cal_service::AppState::with_store(dir).map_err(Failure::input)?,
        None => cal_service::AppState::in_memory(),
    };
    let router = cal_service::router(state, &service.cors_origins).map_err(Failure::input)?;
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind((host.as_str(), port))
            .await
            .map_err(|e| Failure::input(format!("cannot listen on {host}:{port}: {e}")))?;
        eprintln!("listening on http://{}", listener.local_addr()?);
        cal_service::serve(listener, router).await?;
        Ok(())
    })
}

fn cmd_synth(a: SynthArgs) -> Outcome {
    if a.rows == 0 {
        return Err(Failure::input("--rows must be at least 1"));
    }
    let kind: SynthKind = a.kind.into();
    let d = kind.generate(a.rows, a.seed);
    let schema_path = a.schema.unwrap_or_else(|| a.out.with_extension("schema.json"));
    write_csv(&d, &a.out)?;
    std::fs::write(
        &schema_path,
        serde_json::to_string_pretty(d.schema()).expect("serializable") + "\n",
    )?;
    println!("{}\n{}", a.out.display(), schema_path.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Audit(a) => cmd_audit(a),
        Command::Theory(a) => cmd_theory(a),
        Command::Cal(a) => cmd_cal(a),
        Command::Experiment(a) => cmd_experiment(a),
        Command::Compare(a) => cmd_compare(a),
        Command::Serve(a) => cmd_serve(a),
        Command::Synth(a) => cmd_synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
