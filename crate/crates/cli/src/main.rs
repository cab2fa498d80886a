//! `modconn` command-line driver: simulate, fit, tune and evaluate modular
//! latent-connectivity models.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use modconn::baselines::baseline_rows;
use modconn::directed::two_stage_fit;
use modconn::estimation::{fit_model, tune_k};
use modconn::io::{
    atomic_write, read_dataset, read_ground_truth, read_json, write_dataset, write_json,
};
use modconn::simulation::{gen_directed, gen_gaussian, SimConfig};
use modconn::{
    DirectedFit, Estimator, EvalReport, FitConfig, FittedModel, GroundTruth, MultiClassDataset,
};

const EXIT_USAGE: u8 = 1;
const EXIT_NUMERICAL: u8 = 2;
const THREADS_VAR: &str = "MODCONN_THREADS";

#[derive(Parser, Debug)]
#[command(
    name = "modconn",
    version,
    about = "Modular latent-connectivity models over multi-class data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Draw a synthetic dataset (with its ground truth) into a directory.
    Simulate(SimulateArgs),
    /// Fit the undirected model.
    Fit(FitArgs),
    /// Two-stage directed fit: shared loading, then one acyclic model per class.
    FitDirected(FitDirectedArgs),
    /// Select the number of modules by held-out likelihood.
    TuneK(TuneArgs),
    /// Score a fitted model against held-out data and/or the ground truth.
    Evaluate(EvaluateArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum RegimeArg {
    Gaussian,
    Directed,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum EstimatorArg {
    Sm,
    Mle,
}

impl From<EstimatorArg> for Estimator {
    fn from(e: EstimatorArg) -> Self {
        match e {
            EstimatorArg::Sm => Estimator::ScoreMatching,
            EstimatorArg::Mle => Estimator::Mle,
        }
    }
}

#[derive(Args, Debug, Serialize)]
struct SimulateArgs {
    #[arg(long, value_enum)]
    regime: RegimeArg,
    #[arg(long)]
    p: usize,
    #[arg(long)]
    k: usize,
    /// Observations per class.
    #[arg(long)]
    n: usize,
    #[arg(long)]
    classes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct FitArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    k: usize,
    #[arg(long, value_enum, default_value = "sm")]
    estimator: EstimatorArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fraction of every class (its tail) kept out of training.
    #[arg(long)]
    holdout: Option<f64>,
    /// JSON fit configuration; `--k`, `--seed` and `--estimator` override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct FitDirectedArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct TuneArgs {
    #[arg(long)]
    data: PathBuf,
    /// Inclusive range `a..b` or comma-separated list.
    #[arg(long, default_value = "2..10", value_parser = parse_grid)]
    k_grid: KGrid,
    #[arg(long, default_value_t = 0.2)]
    holdout: f64,
    #[arg(long, value_enum, default_value = "sm")]
    estimator: EstimatorArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct EvaluateArgs {
    #[arg(long)]
    data: PathBuf,
    /// Output of `fit` or `fit-directed`.
    #[arg(long)]
    model: PathBuf,
    /// Compare with the ground truth; without a value, the one stored with
    /// the dataset.
    #[arg(long, num_args = 0..=1)]
    truth: Option<Option<PathBuf>>,
    #[arg(long)]
    out: PathBuf,
    /// Write `n,metric,value,seed` rows for plotting.
    #[arg(long)]
    emit_plot_data: Option<PathBuf>,
}

#[derive(Clone, Debug, Serialize)]
#[serde(transparent)]
struct KGrid(Vec<usize>);

fn parse_grid(s: &str) -> Result<KGrid, String> {
    let bad = |e: std::num::ParseIntError| format!("invalid k grid {s:?}: {e}");
    let grid: Vec<usize> = match s.split_once("..") {
        Some((a, b)) => {
            let (a, b) = (
                a.trim().parse().map_err(bad)?,
                b.trim().parse().map_err(bad)?,
            );
            (a..=b).collect()
        }
        None => s
            .split(',')
            .map(|t| t.trim().parse().map_err(bad))
            .collect::<Result<_, _>>()?,
    };
    if grid.is_empty() {
        return Err(format!("empty k grid {s:?}"));
    }
    Ok(KGrid(grid))
}

/// Everything needed to replay a run.
#[derive(Serialize)]
struct RunManifest<'a, C: Serialize> {
    command: &'a str,
    argv: Vec<String>,
    config: &'a C,
    seed: u64,
    version: &'static str,
    started: String,
    finished: String,
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

/// Writes `<output>.run.json` next to the output.
fn write_manifest<C: Serialize>(
    output: &Path,
    command: &str,
    config: &C,
    seed: u64,
    started: String,
) -> anyhow::Result<()> {
    let mut name = output
        .file_name()
        .context("output path has no file name")?
        .to_os_string();
    name.push(".run.json");
    let manifest = RunManifest {
        command,
        argv: std::env::args().collect(),
        config,
        seed,
        version: env!("CARGO_PKG_VERSION"),
        started,
        finished: now(),
    };
    write_json(&output.with_file_name(name), &manifest)?;
    Ok(())
}

fn fit_config(
    path: Option<&Path>,
    k: usize,
    seed: u64,
    estimator: Estimator,
) -> anyhow::Result<FitConfig> {
    let base: FitConfig = match path {
        Some(p) => read_json(p)?,
        None => FitConfig::default(),
    };
    let cfg = FitConfig { k, seed, ..base }.with_estimator(estimator);
    cfg.validate()?;
    Ok(cfg)
}

fn simulate(a: &SimulateArgs) -> anyhow::Result<()> {
    let started = now();
    let cfg = SimConfig::new(a.p, a.k, a.classes, a.n, a.seed);
    let (ds, truth) = match a.regime {
        RegimeArg::Gaussian => gen_gaussian(&cfg)?,
        RegimeArg::Directed => gen_directed(&cfg)?,
    };
    write_dataset(&ds, &a.out, Some(&truth))?;
    write_manifest(&a.out.join("run"), "simulate", &cfg, a.seed, started)
}

fn fit(a: &FitArgs) -> anyhow::Result<()> {
    let started = now();
    let cfg = fit_config(a.config.as_deref(), a.k, a.seed, a.estimator.into())?;
    let ds = read_dataset(&a.data)?;
    let model = fit_model(&ds, &cfg, a.holdout)?;
    write_json(&a.out, &model)?;
    write_manifest(&a.out, "fit", &cfg, a.seed, started)
}

fn fit_directed(a: &FitDirectedArgs) -> anyhow::Result<()> {
    let started = now();
    let cfg = fit_config(a.config.as_deref(), a.k, a.seed, Estimator::ScoreMatching)?;
    let ds = read_dataset(&a.data)?;
    let fit = two_stage_fit(&ds, &cfg)?;
    write_json(&a.out, &fit)?;
    write_manifest(&a.out, "fit-directed", &cfg, a.seed, started)
}

fn tune(a: &TuneArgs) -> anyhow::Result<()> {
    let started = now();
    let k0 = a.k_grid.0[0];
    let cfg = fit_config(a.config.as_deref(), k0, a.seed, a.estimator.into())?;
    let ds = read_dataset(&a.data)?;
    let result = tune_k(&ds, &a.k_grid.0, &cfg, a.holdout)?;
    write_json(&a.out, &result)?;
    write_manifest(
        &a.out,
        "tune-k",
        &(cfg, &a.k_grid, a.holdout),
        a.seed,
        started,
    )
}

enum Loaded {
    Undirected(FittedModel),
    Directed(DirectedFit),
}

fn load_model(path: &Path) -> anyhow::Result<Loaded> {
    let value: serde_json::Value = read_json(path)?;
    let loaded = if value.get("structural").is_some() {
        Loaded::Directed(
            serde_json::from_value(value)
                .with_context(|| format!("{}: not a directed fit", path.display()))?,
        )
    } else {
        Loaded::Undirected(
            serde_json::from_value(value)
                .with_context(|| format!("{}: not a fitted model", path.display()))?,
        )
    };
    Ok(loaded)
}

fn load_truth(a: &EvaluateArgs) -> anyhow::Result<Option<GroundTruth>> {
    match &a.truth {
        None => Ok(None),
        Some(Some(path)) => Ok(Some(read_json(path)?)),
        Some(None) => match read_ground_truth(&a.data)? {
            Some(t) => Ok(Some(t)),
            None => bail!("{}: dataset has no ground truth", a.data.display()),
        },
    }
}

/// Held-out NLL of the model and both baselines. A model fitted with a
/// holdout is scored on the same tail split; otherwise `ds` is treated as
/// independent test data and the baselines are skipped.
fn heldout_report(
    mut report: EvalReport,
    model: &FittedModel,
    ds: &MultiClassDataset,
) -> anyhow::Result<EvalReport> {
    match model.holdout {
        Some(f) => {
            let (train, heldout) = ds.tail_split(f)?;
            report = report.with_heldout(&model.params, &heldout, &model.means)?;
            report.nll_table.extend(baseline_rows(&train, &heldout)?);
        }
        None => report = report.with_heldout(&model.params, ds, &model.means)?,
    }
    Ok(report)
}

fn curve_rows(report: &EvalReport, n: usize, seed: u64) -> String {
    let scalars = [
        ("loading_mse", report.loading_mse),
        ("latent_conn_mse", report.latent_conn_mse_mean),
        ("heldout_nll", report.heldout_nll_mean),
        ("ari", report.ari),
        ("order_spearman", report.order_spearman_mean),
        ("structural_mse", report.structural_mse_mean),
    ];
    let mut out = String::from("n,metric,value,seed\n");
    for (metric, value) in scalars {
        if let Some(v) = value {
            out.push_str(&format!("{n},{metric},{v:?},{seed}\n"));
        }
    }
    for row in &report.nll_table {
        out.push_str(&format!(
            "{n},heldout_nll_{},{:?},{seed}\n",
            row.method, row.mean
        ));
    }
    out
}

fn evaluate(a: &EvaluateArgs) -> anyhow::Result<()> {
    let started = now();
    let ds = read_dataset(&a.data)?;
    let truth = load_truth(a)?;
    let (report, n, seed) = match load_model(&a.model)? {
        Loaded::Undirected(model) => {
            let mut report = match &truth {
                Some(t) => EvalReport::against_truth(&model.params, t)?,
                None => EvalReport::default(),
            };
            report = heldout_report(report, &model, &ds)?;
            let n_train = training_size(&ds, model.holdout)?;
            (report, n_train, model.seed)
        }
        Loaded::Directed(fit) => {
            let Some(t) = &truth else {
                bail!("evaluating a directed fit needs --truth");
            };
            let report = EvalReport::against_truth(&fit.params, t)?.with_directed(&fit, t)?;
            (report, training_size(&ds, None)?, t.seed)
        }
    };
    write_json(&a.out, &report)?;
    if let Some(path) = &a.emit_plot_data {
        atomic_write(path, curve_rows(&report, n, seed).as_bytes())?;
    }
    write_manifest(&a.out, "evaluate", a, seed, started)
}

/// Mean number of training observations per class.
fn training_size(ds: &MultiClassDataset, holdout: Option<f64>) -> anyhow::Result<usize> {
    let train = match holdout {
        Some(f) => ds.tail_split(f)?.0,
        None => ds.clone(),
    };
    let sizes = train.class_sizes();
    Ok(sizes.iter().sum::<usize>() / sizes.len().max(1))
}

fn init_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var(THREADS_VAR) {
        let n: usize = v
            .parse()
            .with_context(|| format!("{THREADS_VAR}={v:?} is not a thread count"))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()?;
    }
    Ok(())
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    init_threads()?;
    match &cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Fit(a) => fit(a),
        Command::FitDirected(a) => fit_directed(a),
        Command::TuneK(a) => tune(a),
        Command::Evaluate(a) => evaluate(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let numerical = e
                .downcast_ref::<modconn::Error>()
                .is_some_and(|e| e.is_numerical());
            ExitCode::from(if numerical {
                EXIT_NUMERICAL
            } else {
                EXIT_USAGE
            })
        }
    }
}
