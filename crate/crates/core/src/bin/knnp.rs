//! `knnp`: build anchor stores, predict and run seeded experiments.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde_json::json;

use knn_prompting::backend::{connect, Backend, BACKEND_ENV};
use knn_prompting::datastore::{build_store, load_store, save_store, split_demo_anchor, BuildOptions};
use knn_prompting::harness::report::{read_scaling_csv, write_scaling_csv};
use knn_prompting::harness::scaling::power_law_fit_accuracy;
use knn_prompting::harness::{
    emit_report, load_dataset, power_law_fit, predict, run_experiment, scaling_runs, ExperimentConfig, Method,
    ReportFormat, SampleScope, ScalingPoint,
};
use knn_prompting::neighbors::{DistanceKind, MaskMode, DEFAULT_K};
use knn_prompting::prompting::{build_prompt, max_shots, TaskSpec};
use knn_prompting::{Error, Result};

#[derive(Parser)]
#[command(name = "knnp", version, about = "kNN prompting over cached next-token distributions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Query the anchors once and save their distributions.
    BuildStore(BuildArgs),
    /// Predict every instance of a test file.
    Predict(PredictArgs),
    /// Seeded runs over one or more methods; writes CSV and JSON reports.
    Eval(EvalArgs),
    /// One run per m; writes the scaling points and the per-run reports.
    ScalingCurve(ScalingArgs),
    /// Fit error(m) = alpha * m^beta to a scaling CSV.
    FitPowerlaw(FitArgs),
    /// Dump anchor keys and test distributions for external visualisation.
    ExportRepr(ExportArgs),
    /// Largest shots per class that fit the context within a truncation budget.
    MaxShots(MaxShotsArgs),
}

#[derive(Args)]
struct BackendArgs {
    /// `mock://<config.json>` or `http(s)://host:port`.
    #[arg(long, env = BACKEND_ENV)]
    backend: String,
}

impl BackendArgs {
    fn connect(&self) -> Result<std::sync::Arc<dyn Backend>> {
        connect(&self.backend)
    }
}

#[derive(Args)]
struct BuildArgs {
    #[arg(long)]
    task: PathBuf,
    #[arg(long)]
    train: PathBuf,
    #[command(flatten)]
    backend: BackendArgs,
    #[arg(long, default_value_t = 1)]
    demos_per_class: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also cache hidden states for the L2 distance.
    #[arg(long)]
    hidden: bool,
    #[arg(long, default_value_t = 1)]
    parallelism: usize,
    /// Output directory, or a base path such as `stores/sst2`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Distance {
    Kl,
    L2,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mask {
    Whole,
    Partial,
}

#[derive(Clone, Copy, ValueEnum)]
enum Scope {
    Train,
    Test,
    Both,
}

#[derive(Args)]
struct MethodArgs {
    /// Comma-separated: knn, icl, icl-ensemble, contextual-calibration.
    #[arg(long, default_value = "knn", value_delimiter = ',')]
    method: Vec<Method>,
    #[arg(long, default_value_t = DEFAULT_K)]
    k: usize,
    #[arg(long, value_enum, default_value_t = Distance::Kl)]
    distance: Distance,
    #[arg(long, value_enum, default_value_t = Mask::Whole)]
    mask: Mask,
    /// Replace each class's anchors by their mean distribution.
    #[arg(long)]
    centroid: bool,
    #[arg(long, default_value_t = 1)]
    demos_per_class: usize,
    /// Content-free probe for contextual calibration.
    #[arg(long, default_value = "N/A")]
    probe: String,
    /// Rescale the calibrated scores toward the train-set class frequencies.
    #[arg(long)]
    trainset_prior: bool,
    #[arg(long, default_value_t = 1)]
    parallelism: usize,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    task: PathBuf,
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    test: PathBuf,
    #[command(flatten)]
    backend: BackendArgs,
    #[command(flatten)]
    methods: MethodArgs,
    #[arg(long, default_value = "0,1,2,3,4", value_delimiter = ',')]
    seeds: Vec<u64>,
    #[arg(long, default_value_t = 0.5)]
    imbalance_lambda: f64,
    #[arg(long, value_enum, default_value_t = Scope::Train)]
    imbalance_scope: Scope,
    /// Cap on test instances; 0 means the whole test file.
    #[arg(long, default_value_t = knn_prompting::harness::DEFAULT_TEST_LIMIT)]
    test_limit: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, default_value_t = 16)]
    m: usize,
    /// Directory for `report.csv` and `report.json`, or a single `.csv`/`.json` file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ScalingArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, default_value = "2,8,32,128", value_delimiter = ',')]
    m: Vec<usize>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    task: PathBuf,
    #[arg(long)]
    test: PathBuf,
    /// Demonstrations (ICL methods) or anchors to split (kNN without --store).
    #[arg(long)]
    train: Option<PathBuf>,
    /// A saved store; its demonstrations are reused.
    #[arg(long)]
    store: Option<PathBuf>,
    #[command(flatten)]
    backend: BackendArgs,
    #[command(flatten)]
    methods: MethodArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// JSONL predictions; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FitArgs {
    /// Scaling CSV written by `scaling-curve`.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    task: PathBuf,
    #[arg(long)]
    store: PathBuf,
    #[arg(long)]
    test: PathBuf,
    #[command(flatten)]
    backend: BackendArgs,
    #[arg(long)]
    hidden: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MaxShotsArgs {
    #[arg(long)]
    task: PathBuf,
    #[arg(long)]
    train: PathBuf,
    #[command(flatten)]
    backend: BackendArgs,
    /// Defaults to the backend's context limit.
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long, default_value_t = 0.05)]
    budget: f64,
    #[arg(long, default_value_t = 200)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl MethodArgs {
    fn config(&self, task: &TaskSpec, backend: &str, method: Method) -> ExperimentConfig {
        ExperimentConfig {
            task: task.name.clone(),
            method,
            k: self.k,
            distance: match self.distance {
                Distance::Kl => DistanceKind::Kl,
                Distance::L2 => DistanceKind::L2,
            },
            mask: match self.mask {
                Mask::Whole => MaskMode::Whole,
                Mask::Partial => MaskMode::Partial,
            },
            centroid: self.centroid,
            demo_per_class: self.demos_per_class,
            backend: backend.to_string(),
            probe_text: self.probe.clone(),
            trainset_prior: self.trainset_prior,
            parallelism: self.parallelism,
            ..ExperimentConfig::default()
        }
    }
}

impl RunArgs {
    fn configs(&self, task: &TaskSpec, m: usize) -> Vec<ExperimentConfig> {
        self.methods
            .method
            .iter()
            .map(|&method| ExperimentConfig {
                m,
                seeds: self.seeds.clone(),
                imbalance_lambda: self.imbalance_lambda,
                imbalance_scope: match self.imbalance_scope {
                    Scope::Train => SampleScope::TrainOnly,
                    Scope::Test => SampleScope::TestOnly,
                    Scope::Both => SampleScope::Both,
                },
                test_limit: (self.test_limit > 0).then_some(self.test_limit),
                ..self.methods.config(task, &self.backend.backend, method)
            })
            .collect()
    }
}

/// `dir/` or an existing directory becomes `dir/<name>`.
fn store_base(out: &Path, name: &str) -> PathBuf {
    if out.is_dir() || out.as_os_str().to_string_lossy().ends_with('/') {
        out.join(name)
    } else {
        out.to_path_buf()
    }
}

fn write_json_line(w: &mut impl Write, value: &impl serde::Serialize) -> Result<()> {
    serde_json::to_writer(&mut *w, value)?;
    w.write_all(b"\n")?;
    Ok(())
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            Box::new(BufWriter::new(File::create(p)?))
        }
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn build_store_cmd(a: &BuildArgs) -> Result<()> {
    let task = TaskSpec::load(&a.task)?;
    let train = load_dataset(&a.train)?;
    let backend = a.backend.connect()?;
    let split = split_demo_anchor(&train, a.demos_per_class, a.seed)?;
    let opts = BuildOptions {
        want_hidden: a.hidden,
        parallelism: a.parallelism,
        seed: a.seed,
    };
    let store = build_store(&task, &split, backend.as_ref(), opts)?;
    let manifest = save_store(&store, store_base(&a.out, &task.name))?;
    info!("{} anchors, {} demonstrations", store.len(), split.demos.len());
    println!("{}", manifest.display());
    Ok(())
}

fn predict_cmd(a: &PredictArgs) -> Result<()> {
    let task = TaskSpec::load(&a.task)?;
    let test = load_dataset(&a.test)?;
    let train = match &a.train {
        Some(p) => load_dataset(p)?,
        None => Vec::new(),
    };
    let store = a.store.as_ref().map(load_store).transpose()?;
    if train.is_empty() && store.is_none() {
        return Err(Error::InvalidConfig("predict needs --train or --store".into()));
    }
    let backend = a.backend.connect()?;
    let mut out = output(a.out.as_deref())?;
    for &method in &a.methods.method {
        let config = ExperimentConfig {
            seeds: vec![a.seed],
            ..a.methods.config(&task, &a.backend.backend, method)
        };
        let store = if method == Method::Knn { store.as_ref() } else { None };
        let (summary, records) = predict(&config, &task, &train, store, &test, backend.as_ref())?;
        info!("{method}: accuracy {:.4} over {}", summary.accuracy, summary.n_test);
        for r in &records {
            write_json_line(&mut out, &json!({ "method": method, "record": r }))?;
        }
    }
    out.flush()?;
    Ok(())
}

fn write_reports(results: &[knn_prompting::harness::RunResult], out: &Path) -> Result<()> {
    match out.extension().and_then(|e| e.to_str()) {
        Some("csv") => emit_report(results, ReportFormat::Csv, out),
        Some("json") => emit_report(results, ReportFormat::Json, out),
        _ => {
            emit_report(results, ReportFormat::Csv, out.join("report.csv"))?;
            emit_report(results, ReportFormat::Json, out.join("report.json"))
        }
    }
}

fn eval_cmd(a: &EvalArgs) -> Result<()> {
    let task = TaskSpec::load(&a.run.task)?;
    let train = load_dataset(&a.run.train)?;
    let test = load_dataset(&a.run.test)?;
    let backend = a.run.backend.connect()?;
    let mut results = Vec::new();
    for config in a.run.configs(&task, a.m) {
        let r = run_experiment(&config, &task, &train, &test, backend.as_ref())?;
        info!("{} m={}: {:.4} ± {:.4}", config.method, config.m, r.mean, r.std);
        results.push(r);
    }
    write_reports(&results, &a.out)
}

fn scaling_cmd(a: &ScalingArgs) -> Result<()> {
    let task = TaskSpec::load(&a.run.task)?;
    let train = load_dataset(&a.run.train)?;
    let test = load_dataset(&a.run.test)?;
    let backend = a.run.backend.connect()?;
    fs::create_dir_all(&a.out)?;
    let mut all = Vec::new();
    for config in a.run.configs(&task, a.m[0]) {
        let runs = scaling_runs(&config, &a.m, &task, &train, &test, backend.as_ref())?;
        let points: Vec<ScalingPoint> = runs.iter().map(ScalingPoint::from_run).collect();
        write_scaling_csv(&points, a.out.join(format!("scaling-{}.csv", config.method)))?;
        all.extend(runs);
    }
    write_reports(&all, &a.out)
}

fn fit_cmd(a: &FitArgs) -> Result<()> {
    let points = read_scaling_csv(&a.input)?;
    let body = json!({
        "error": power_law_fit(&points)?,
        "accuracy": power_law_fit_accuracy(&points).ok(),
        "points": points.len(),
    });
    let mut out = output(a.out.as_deref())?;
    serde_json::to_writer_pretty(&mut out, &body)?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

fn export_cmd(a: &ExportArgs) -> Result<()> {
    let task = TaskSpec::load(&a.task)?;
    let store = load_store(&a.store)?;
    let test = load_dataset(&a.test)?;
    let backend = a.backend.connect()?;
    let mut out = output(Some(&a.out))?;
    let hidden = store.hidden_keys();
    for (i, e) in store.entries().iter().enumerate() {
        write_json_line(
            &mut out,
            &json!({
                "kind": "anchor",
                "id": e.anchor_id,
                "label": e.label,
                "probs": e.key.probs(),
                "hidden": if a.hidden { hidden.map(|h| h[i].values()) } else { None },
            }),
        )?;
    }
    for ex in &test {
        let prompt = build_prompt(&task, &store.metadata().demos, ex, backend.as_ref())?;
        let (d, h) = backend.query_distribution(&prompt, a.hidden)?;
        write_json_line(
            &mut out,
            &json!({
                "kind": "test",
                "id": ex.id,
                "label": ex.label,
                "probs": d.probs(),
                "hidden": h.as_ref().map(|h| h.values()),
            }),
        )?;
    }
    out.flush()?;
    Ok(())
}

fn max_shots_cmd(a: &MaxShotsArgs) -> Result<()> {
    let task = TaskSpec::load(&a.task)?;
    let train = load_dataset(&a.train)?;
    let backend = a.backend.connect()?;
    let limit = a.limit.unwrap_or(backend.info().context_limit);
    let budget = max_shots(&task, &train, backend.as_ref(), limit, a.budget, a.trials, a.seed)?;
    println!("{}", serde_json::to_string_pretty(&budget)?);
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::BuildStore(a) => build_store_cmd(a),
        Command::Predict(a) => predict_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::ScalingCurve(a) => scaling_cmd(a),
        Command::FitPowerlaw(a) => fit_cmd(a),
        Command::ExportRepr(a) => export_cmd(a),
        Command::MaxShots(a) => max_shots_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
