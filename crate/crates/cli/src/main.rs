//! `cspcr` command-line tool.

mod models;
mod report;
mod table;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cspcr::engine::{run_test, ControlInput, TargetMean, TestError, TestInputs};
use cspcr::model::{Method, Population, ProductStatistic, TestConfig};
use cspcr::ratio::{
    fit_classifier_ratio, fit_factorized_ratio, ElasticNetOptions, RatioError, RatioModel, XzFactor,
};
use cspcr::rng::SeedTree;
use cspcr::simlab::{preset, run_experiment, write_csv, DgpParams, RatioMode, TargetMeanMode, PRESETS};
use thiserror::Error;

use crate::models::{check_ratio_dims, ratio_json, read_ratio, read_sampler};
use crate::report::ReportFile;
use crate::table::Table;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, unreadable or malformed files, inconsistent inputs.
    #[error("{0}")]
    Input(String),

    /// Degenerate null law or a numerical failure while fitting or testing.
    #[error("{0}")]
    Numerical(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Input(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl From<TestError> for CliError {
    fn from(e: TestError) -> Self {
        match e {
            TestError::DegenerateNull
            | TestError::Gchisq(_)
            | TestError::AllWeightsZero
            | TestError::NonFiniteControl(_)
            | TestError::Randomize(cspcr::randomize::RandomizeError::NonFiniteStatistic(_)) => {
                CliError::Numerical(e.to_string())
            }
            other => CliError::Input(other.to_string()),
        }
    }
}

impl From<RatioError> for CliError {
    fn from(e: RatioError) -> Self {
        match e {
            RatioError::DimensionMismatch { .. } | RatioError::NonFinite | RatioError::InvalidOption(_) => {
                CliError::Input(e.to_string())
            }
            other => CliError::Numerical(format!("ratio fit failed: {other}")),
        }
    }
}

const SEED_STREAMS: &str = "\
Randomness: every random draw derives from --seed through named sub-streams,
so a run is reproducible from its flags alone.
  labeling/<row>        counterfeit treatments of each row
  tie-break/<row>       uniform tie-breaking of each row's rank
  resample              importance-resampling draw (method is)
  ratio-fit             cross-validation folds when fitting a ratio from --pools
  simulation/<i>/<rep>  one simulation trial (sweep point i, repetition rep)

Exit codes: 0 success, 2 usage or input error, 3 degenerate or numerical error.";

#[derive(Debug, Parser)]
#[command(name = "cspcr", version, about = "Covariate-shift corrected conditional randomization tests", after_help = SEED_STREAMS)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Test whether X affects Y given Z in the target population.
    #[command(after_help = SEED_STREAMS)]
    Test(TestArgs),
    /// Run a simulation preset and write its rejection-rate table.
    #[command(after_help = SEED_STREAMS)]
    Simulate(SimulateArgs),
    /// Fit a density-ratio model from source and target covariate files.
    #[command(after_help = SEED_STREAMS)]
    RatioFit(RatioFitArgs),
}

#[derive(Debug, Args)]
struct TestArgs {
    /// Labeled source data: columns y, x, z_*, v_* and optional extras.
    #[arg(long)]
    data: PathBuf,
    /// One of cspcr, cspcr-pe, pcr, is.
    #[arg(long, value_parser = parse_method)]
    method: Method,
    #[arg(long, default_value_t = TestConfig::DEFAULT_K)]
    k: usize,
    #[arg(long, default_value_t = TestConfig::DEFAULT_L)]
    l: usize,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Report path; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Column of precomputed importance weights.
    #[arg(long, value_name = "NAME")]
    weight_col: Option<String>,
    /// Ratio model JSON written by `ratio-fit`.
    #[arg(long, value_name = "PATH")]
    ratio_model: Option<PathBuf>,
    /// Source and target covariate files to fit a factorized ratio from.
    #[arg(long, num_args = 2, value_names = ["SRC", "TGT"])]
    pools: Option<Vec<PathBuf>>,
    /// Model of X given Z used to draw counterfeit treatments.
    #[arg(long, value_name = "PATH")]
    sampler_model: PathBuf,
    /// `v1` (first surrogate, the default) or `custom-col NAME`.
    #[arg(long, num_args = 1..=2, value_names = ["KIND", "NAME"])]
    control_variate: Option<Vec<String>>,
    /// Target covariate file used to estimate the control variate's target mean.
    #[arg(long, value_name = "PATH")]
    target_pool: Option<PathBuf>,
    /// Exact target mean of the control variate.
    #[arg(long, value_name = "REAL")]
    target_mean_a: Option<f64>,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(PRESETS))]
    preset: String,
    #[arg(long, default_value_t = 1000)]
    reps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV path; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; defaults to the available parallelism.
    #[arg(long)]
    threads: Option<usize>,
    /// Override a design parameter, e.g. `a_s=0.5` or `u=0.2,0.2,0.2,0.2,0.2`.
    #[arg(long = "set", value_name = "FIELD=VALUE")]
    overrides: Vec<String>,
    /// Replace the preset's sweep values.
    #[arg(long, value_delimiter = ',')]
    values: Option<Vec<f64>>,
    /// Restrict the methods, e.g. `cspcr,pcr`.
    #[arg(long, value_delimiter = ',', value_parser = parse_method)]
    methods: Option<Vec<Method>>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    l: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long, value_parser = parse_from_str::<RatioMode>)]
    ratio_mode: Option<RatioMode>,
    #[arg(long, value_parser = parse_from_str::<TargetMeanMode>)]
    target_mean: Option<TargetMeanMode>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum FitMode {
    Classifier,
    Factorized,
}

#[derive(Debug, Args)]
struct RatioFitArgs {
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    target: PathBuf,
    #[arg(long, value_enum)]
    mode: FitMode,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Model path; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse()
}

fn parse_from_str<T: std::str::FromStr<Err = String>>(s: &str) -> Result<T, String> {
    s.parse()
}

fn write_output(out: Option<&Path>, text: &str) -> Result<(), CliError> {
    match out {
        Some(path) => fs::write(path, text).map_err(|e| CliError::Input(format!("{}: {e}", path.display()))),
        None => std::io::stdout().write_all(text.as_bytes()).map_err(|e| CliError::Input(e.to_string())),
    }
}

enum Control {
    FirstSurrogate,
    Column(String),
}

fn parse_control(values: Option<&[String]>) -> Result<Control, CliError> {
    match values {
        None => Ok(Control::FirstSurrogate),
        Some([kind]) if kind == "v1" => Ok(Control::FirstSurrogate),
        Some([kind, name]) if kind == "custom-col" => Ok(Control::Column(name.clone())),
        Some(other) => Err(CliError::Input(format!(
            "--control-variate expects `v1` or `custom-col NAME`, got `{}`",
            other.join(" ")
        ))),
    }
}

fn cmd_test(args: &TestArgs) -> Result<(), CliError> {
    let table = Table::read(&args.data)?;
    let dataset = table.dataset()?;
    let sampler = read_sampler(&args.sampler_model)?;
    if sampler.z_dim() != table.z_dim() {
        return Err(CliError::Input(format!(
            "sampler model expects {} confounder columns, data has {}",
            sampler.z_dim(),
            table.z_dim()
        )));
    }

    let sources = [args.weight_col.is_some(), args.ratio_model.is_some(), args.pools.is_some()];
    let given = sources.iter().filter(|&&s| s).count();
    if given > 1 {
        return Err(CliError::Input("give at most one of --weight-col, --ratio-model, --pools".into()));
    }
    if given == 0 && args.method != Method::Pcr {
        return Err(CliError::Input(format!(
            "method {} needs importance weights: give one of --weight-col, --ratio-model, --pools",
            args.method
        )));
    }

    let weights = args.weight_col.as_deref().map(|name| table.column(name)).transpose()?;
    let ratio: Option<RatioModel> = if let Some(path) = &args.ratio_model {
        let ratio = read_ratio(path)?;
        check_ratio_dims(&ratio, table.z_dim(), table.v_dim())?;
        Some(ratio)
    } else if let Some(paths) = &args.pools {
        let source = Table::read(&paths[0])?.pool(Population::Source)?;
        let target = Table::read(&paths[1])?.pool(Population::Target)?;
        let xz = XzFactor::Classifier(fit_classifier_ratio(&source, &target)?);
        let seed = SeedTree::new(args.seed).child("ratio-fit").seed();
        let fitted = fit_factorized_ratio(&source, &target, xz, &ElasticNetOptions::default(), seed)?;
        let ratio = RatioModel::Factorized(fitted);
        check_ratio_dims(&ratio, table.z_dim(), table.v_dim())?;
        Some(ratio)
    } else {
        None
    };

    let control = parse_control(args.control_variate.as_deref())?;
    let control_values = match &control {
        Control::Column(name) => Some(table.column(name)?),
        Control::FirstSurrogate => None,
    };
    let target_pool = args.target_pool.as_deref().map(Table::read).transpose()?;
    if args.target_mean_a.is_some() && target_pool.is_some() {
        return Err(CliError::Input("give either --target-pool or --target-mean-a, not both".into()));
    }
    if args.method == Method::CspcrPe && args.target_mean_a.is_none() && target_pool.is_none() {
        return Err(CliError::Input(
            "method cspcr-pe needs the target mean of the control variate: \
             give --target-pool PATH (estimated from target rows) or --target-mean-a REAL (exact)"
                .into(),
        ));
    }
    if matches!(control, Control::FirstSurrogate) && args.method == Method::CspcrPe && table.v_dim() == 0 {
        return Err(CliError::Input("control variate v1 needs a `v_1` column".into()));
    }
    let pool = match (&target_pool, &control) {
        (Some(t), Control::FirstSurrogate) => Some(t.pool(Population::Target)?),
        _ => None,
    };
    let target_mean = match (&target_pool, &control, args.target_mean_a) {
        (_, _, Some(exact)) => Some(TargetMean::Exact(exact)),
        (Some(t), Control::Column(name), None) => {
            let column = t.column(name)?;
            if column.is_empty() {
                return Err(CliError::Input("target pool has no rows".into()));
            }
            Some(TargetMean::Exact(column.iter().sum::<f64>() / column.len() as f64))
        }
        (Some(_), Control::FirstSurrogate, None) => pool.as_ref().map(TargetMean::Pool),
        (None, _, None) => None,
    };

    let mut inputs = TestInputs::new(&dataset, &sampler, &ProductStatistic);
    if let Some(w) = &weights {
        inputs = inputs.with_weights(w);
    }
    if let Some(r) = &ratio {
        inputs = inputs.with_ratio(r);
    }
    if let Some(values) = &control_values {
        inputs = inputs.with_control(ControlInput::Values(values));
    }
    if let Some(mean) = target_mean {
        inputs = inputs.with_target_mean(mean);
    }

    let mut config = TestConfig::new(args.method).with_seed(args.seed).with_kl(args.k, args.l);
    config.alpha = args.alpha;
    config.validate(dataset.len()).map_err(|e| CliError::Input(e.to_string()))?;
    let report = run_test(&inputs, &config)?;
    write_output(args.out.as_deref(), &ReportFile::from(&report).to_json())
}

/// Applies `field=value` to the JSON form of the design parameters. A scalar
/// assigned to a vector field fills every coordinate.
fn apply_override(params: DgpParams, assignment: &str) -> Result<DgpParams, CliError> {
    let (field, value) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Input(format!("--set expects FIELD=VALUE, got `{assignment}`")))?;
    let mut json = serde_json::to_value(&params).expect("parameters serialize");
    let slot = json
        .get_mut(field.trim())
        .ok_or_else(|| CliError::Input(format!("unknown design parameter `{field}`")))?;
    let numbers: Vec<f64> = value
        .split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|_| CliError::Input(format!("`{v}` is not a number"))))
        .collect::<Result<_, _>>()?;
    *slot = match (&*slot, numbers.as_slice()) {
        (serde_json::Value::Array(current), [single]) => serde_json::json!(vec![*single; current.len()]),
        (serde_json::Value::Array(_), many) => serde_json::json!(many),
        (_, [single]) if slot.is_u64() => {
            if single.fract() != 0.0 || *single < 0.0 {
                return Err(CliError::Input(format!("`{field}` must be a non-negative integer")));
            }
            serde_json::json!(*single as u64)
        }
        (_, [single]) => serde_json::json!(*single),
        _ => return Err(CliError::Input(format!("`{field}` takes a single value"))),
    };
    serde_json::from_value(json).map_err(|e| CliError::Input(format!("{field}: {e}")))
}

fn cmd_simulate(args: &SimulateArgs) -> Result<(), CliError> {
    let mut grid = preset(&args.preset, args.reps).ok_or_else(|| CliError::Input(format!("unknown preset `{}`", args.preset)))?;
    for assignment in &args.overrides {
        grid.base = apply_override(grid.base, assignment)?;
    }
    if let Some(values) = &args.values {
        grid.sweep.values = values.clone();
    }
    if let Some(methods) = &args.methods {
        grid.methods = methods.clone();
    }
    grid.config.seed = args.seed;
    grid.config.k = args.k.unwrap_or(grid.config.k);
    grid.config.l = args.l.unwrap_or(grid.config.l);
    grid.config.alpha = args.alpha.unwrap_or(grid.config.alpha);
    grid.ratio_mode = args.ratio_mode.unwrap_or(grid.ratio_mode);
    grid.target_mean = args.target_mean.unwrap_or(grid.target_mean);

    let threads = args
        .threads
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let cells = run_experiment(&grid, threads.max(1)).map_err(CliError::Input)?;
    let mut out = Vec::new();
    write_csv(&cells, &mut out).map_err(|e| CliError::Input(e.to_string()))?;
    write_output(args.out.as_deref(), &String::from_utf8(out).expect("csv is utf-8"))
}

fn cmd_ratio_fit(args: &RatioFitArgs) -> Result<(), CliError> {
    let source = Table::read(&args.source)?.pool(Population::Source)?;
    let target = Table::read(&args.target)?.pool(Population::Target)?;
    let classifier = fit_classifier_ratio(&source, &target)?;
    let ratio = match args.mode {
        FitMode::Classifier => RatioModel::Classifier(classifier),
        FitMode::Factorized => {
            let opts = ElasticNetOptions::default();
            RatioModel::Factorized(fit_factorized_ratio(
                &source,
                &target,
                XzFactor::Classifier(classifier),
                &opts,
                args.seed,
            )?)
        }
    };
    write_output(args.out.as_deref(), &ratio_json(ratio))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match &cli.command {
        Command::Test(args) => cmd_test(args),
        Command::Simulate(args) => cmd_simulate(args),
        Command::RatioFit(args) => cmd_ratio_fit(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
