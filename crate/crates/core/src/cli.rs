//! The `ballpark` command line.
//!
//! Subcommands compose through files in `--output-dir`. Every JSON and CSV
//! artifact carries the SHA-256 fingerprint of the resolved run
//! configuration, and the same configuration reproduces the same bytes.
//!
//! Exit codes: 0 success, 2 invalid input (diagnostics on stderr), 3
//! infeasible with `--no-escalate`, 64 usage error, 1 anything else.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::{Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::classification::{fit_classifier, p_hat, predict_class};
use crate::crowd::{
    add_global_bound, aggregate_intervals, aggregate_percentile, Aggregated, AggregationMode,
    AggregationPolicy,
};
use crate::cvcv::{default_grid, tune_lambda};
use crate::error::{Error, Result};
use crate::eval::{
    kfold_eval, ridge_baseline, ridge_grid, sweep, sweep_csv, sweep_summary, EvalReport,
    LambdaChoice, Learner, Metric, SweepParameter, SweepTemplate,
};
use crate::io;
use crate::problem::{validate_problem, Bag, BallparkProblem, ConstraintSet, Dataset, SolveStatus};
use crate::qp::SolverConfig;
use crate::regression::{self, RegressionMethod};
use crate::synthetic::{
    constraints_for_bags, generate_linear, make_binary_bags, make_tercile_bags, DiffPairing,
    LinearDataSpec, SyntheticSpec,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_INVALID: i32 = 2;
pub const EXIT_INFEASIBLE: i32 = 3;
pub const EXIT_USAGE: i32 = 64;

/// Environment variable capping the worker thread count (0 = auto).
pub const THREADS_ENV: &str = "BALLPARK_THREADS";

/// Resolved run configuration. Its JSON form is what gets fingerprinted.
#[derive(Debug, Clone, Parser, Serialize)]
#[command(
    name = "ballpark",
    version,
    about = "Learn individual labels from loose aggregate constraints over bags"
)]
pub struct RunConfig {
    /// Seed for every random stream.
    #[arg(long, global = true, default_value_t = 42)]
    pub seed: u64,
    /// Directory for written artifacts; created when missing.
    #[arg(long, short = 'o', global = true, default_value = ".")]
    pub output_dir: PathBuf,
    /// Report infeasible fits (exit 3) instead of retrying with slack.
    #[arg(long, global = true)]
    pub no_escalate: bool,
    /// Linear cost per unit of slack.
    #[arg(long, global = true, default_value_t = 1e3)]
    pub slack_penalty: f64,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Subcommand, Serialize)]
#[serde(tag = "subcommand", rename_all = "kebab-case")]
pub enum Command {
    /// Generate a synthetic linear dataset plus a ground-truth sidecar.
    GenData(GenDataArgs),
    /// Build bags from feature terciles, binary features or the whole dataset.
    MakeBags(MakeBagsArgs),
    /// Synthetic ε-constraints from true bag means.
    SynthConstraints(SynthArgs),
    /// Aggregate crowd answers into a constraint set.
    AggregateCrowd(AggregateArgs),
    /// Fit a regression model from a constraint set.
    FitRegression(FitRegressionArgs),
    /// Fit a binary classifier from proportion constraints.
    FitClassification(FitClassificationArgs),
    /// Pick λ by constraint-violation cross validation.
    Tune(TuneArgs),
    /// k-fold test error against ridge baselines with few labels.
    Evaluate(EvaluateArgs),
    /// Test error across values of ε, b_l, d_l or λ.
    Sweep(SweepArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct DataArgs {
    /// Dataset CSV with a header row.
    #[arg(long)]
    pub data: PathBuf,
    /// Target column; used as labels when present, never as a feature.
    #[arg(long, default_value = io::TARGET_COLUMN)]
    pub target: String,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 500)]
    pub n: usize,
    #[arg(long, default_value_t = 13)]
    pub d: usize,
    /// Standard deviation of the true weights.
    #[arg(long, default_value_t = 1.0)]
    pub weight_scale: f64,
    /// Standard deviation of the label noise.
    #[arg(long, default_value_t = 1.0)]
    pub noise: f64,
    /// Fixed intercept; drawn like a weight when absent.
    #[arg(long)]
    pub bias: Option<f64>,
    /// Center feature columns, folding the shift into the intercept.
    #[arg(long)]
    pub center: bool,
    /// File name of the CSV; the sidecar is written next to it as `*.truth.json`.
    #[arg(long, default_value = "data.csv")]
    pub out: String,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct MakeBagsArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Features cut into low/medium/high bags.
    #[arg(long, value_delimiter = ',')]
    pub terciles: Vec<String>,
    /// 0/1 features split into two bags each.
    #[arg(long, value_delimiter = ',')]
    pub binary: Vec<String>,
    /// Add a bag named `all` holding every row.
    #[arg(long)]
    pub all_bag: bool,
    /// Tercile cut quantiles.
    #[arg(long, default_value_t = 0.33)]
    pub cut_low: f64,
    #[arg(long, default_value_t = 0.66)]
    pub cut_high: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pairing {
    SameGroup,
    SameGroupAdjacent,
    All,
}

impl From<Pairing> for DiffPairing {
    fn from(p: Pairing) -> Self {
        match p {
            Pairing::SameGroup => DiffPairing::SameGroup,
            Pairing::SameGroupAdjacent => DiffPairing::SameGroupAdjacent,
            Pairing::All => DiffPairing::All,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SynthArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Features to cut into tercile bags.
    #[arg(long, value_delimiter = ',', conflicts_with = "bags")]
    pub features: Vec<String>,
    /// Existing bags file instead of tercile features.
    #[arg(long)]
    pub bags: Option<PathBuf>,
    #[arg(long, default_value_t = 0.1)]
    pub epsilon: f64,
    /// Bounds only, no difference constraints.
    #[arg(long)]
    pub no_diffs: bool,
    #[arg(long, value_enum, default_value_t = Pairing::SameGroup)]
    pub pairing: Pairing,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Percentile,
    Interval,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct PolicyArgs {
    #[arg(long, value_enum, default_value_t = Mode::Percentile)]
    pub mode: Mode,
    /// Bag bounds use quantiles b_l and 1 − b_l.
    #[arg(long = "b-l", default_value_t = 0.25)]
    pub b_l: f64,
    /// Pairwise magnitudes use quantiles d_l and 1 − d_l.
    #[arg(long = "d-l", default_value_t = 0.25)]
    pub d_l: f64,
    /// Emit pairwise answers as ratio constraints.
    #[arg(long)]
    pub multiplicative: bool,
    /// Denominator floor for ratio constraints.
    #[arg(long)]
    pub floor: Option<f64>,
    /// Upper bound on the mean over the global bag.
    #[arg(long)]
    pub global_upper: Option<f64>,
    /// Bag holding every row; created from the dataset when missing from the bags file.
    #[arg(long, default_value = "all")]
    pub global_bag: String,
    /// Labels are 0/1 proportions: the global bound gets lower end 0.
    #[arg(long)]
    pub proportion: bool,
}

impl PolicyArgs {
    fn policy(&self) -> AggregationPolicy {
        AggregationPolicy {
            mode: match self.mode {
                Mode::Percentile => AggregationMode::Percentile,
                Mode::Interval => AggregationMode::IntervalMean,
            },
            lower_quantile: self.b_l,
            diff_lower_quantile: self.d_l,
            multiplicative: self.multiplicative,
            positivity_floor: self.floor,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct AggregateArgs {
    /// Crowd answers, one JSON object per line.
    #[arg(long)]
    pub answers: PathBuf,
    /// Question id to bag or bag pair, as JSON.
    #[arg(long)]
    pub questions: PathBuf,
    /// Bags file.
    #[arg(long)]
    pub bags: PathBuf,
    /// Dataset, needed only to build the global bag.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[command(flatten)]
    pub policy: PolicyArgs,
}

/// A fixed λ or `cvcv`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LambdaArg {
    Value(f64),
    Cvcv,
}

impl FromStr for LambdaArg {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s == "cvcv" {
            return Ok(LambdaArg::Cvcv);
        }
        match s.parse::<f64>() {
            Ok(v) if v > 0.0 && v.is_finite() => Ok(LambdaArg::Value(v)),
            _ => Err(Error::InvalidArgument(format!(
                "lambda must be a positive number or 'cvcv', got '{s}'"
            ))),
        }
    }
}

impl Serialize for LambdaArg {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            LambdaArg::Value(v) => s.serialize_f64(*v),
            LambdaArg::Cvcv => s.serialize_str("cvcv"),
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TuningArgs {
    /// Ridge regularizer, or `cvcv` to pick it without labels.
    #[arg(long, default_value = "cvcv")]
    pub lambda: LambdaArg,
    /// CVCV folds.
    #[arg(long, default_value_t = 3)]
    pub folds: usize,
    /// CVCV λ grid; 13 log-spaced values in [1e-4, 1e2] by default.
    /// CVCV λ grid; 13 log-spaced values in [1e-4, 1e2] by default.
    #[arg(long, value_delimiter = ',')]
    pub grid: Vec<f64>,
}

impl TuningArgs {
    fn grid(&self) -> Vec<f64> {
        if self.grid.is_empty() {
            default_grid()
        } else {
            self.grid.clone()
        }
    }

    fn choice(&self) -> LambdaChoice {
        match self.lambda {
            LambdaArg::Value(v) => LambdaChoice::Fixed(v),
            LambdaArg::Cvcv => LambdaChoice::Cvcv {
                grid: self.grid(),
                folds: self.folds,
            },
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct FitRegressionArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Bags and constraints JSON document.
    #[arg(long)]
    pub constraints: PathBuf,
    /// `two-step` or `feasibility`.
    #[arg(long, default_value = "two-step")]
    pub method: RegressionMethod,
    #[command(flatten)]
    pub tuning: TuningArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct FitClassificationArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Bags and constraints JSON document.
    #[arg(long)]
    pub constraints: PathBuf,
    /// Hinge loss weight C.
    #[arg(long, default_value_t = 1.0)]
    pub cost: f64,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TuneArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Bags and constraints JSON document.
    #[arg(long)]
    pub constraints: PathBuf,
    /// `two-step` or `feasibility`.
    #[arg(long, default_value = "two-step")]
    pub method: RegressionMethod,
    #[arg(long, default_value_t = 3)]
    pub folds: usize,
    /// CVCV λ grid; 13 log-spaced values in [1e-4, 1e2] by default.
    #[arg(long, value_delimiter = ',')]
    pub grid: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum LearnerKind {
    TwoStep,
    Feasibility,
    Classification,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct LearnerArgs {
    #[arg(long, value_enum, default_value_t = LearnerKind::TwoStep)]
    pub method: LearnerKind,
    /// Ridge regularizer, or `cvcv` to pick it on each training fold.
    #[arg(long, default_value = "cvcv")]
    pub lambda: LambdaArg,
    /// Inner CVCV folds.
    #[arg(long, default_value_t = 3)]
    pub cvcv_folds: usize,
    /// CVCV λ grid; 13 log-spaced values in [1e-4, 1e2] by default.
    #[arg(long, value_delimiter = ',')]
    pub grid: Vec<f64>,
    /// Hinge loss weight C for classification.
    #[arg(long, default_value_t = 1.0)]
    pub cost: f64,
    /// Outer evaluation folds.
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    /// `rmse`, `mae` or `accuracy`.
    #[arg(long, default_value = "rmse")]
    pub metric: Metric,
}

impl LearnerArgs {
    fn learner(&self) -> Learner {
        let tuning = TuningArgs {
            lambda: self.lambda,
            folds: self.cvcv_folds,
            grid: self.grid.clone(),
        };
        let method = match self.method {
            LearnerKind::Classification => return Learner::Classification { cost: self.cost },
            LearnerKind::TwoStep => RegressionMethod::TwoStep,
            LearnerKind::Feasibility => RegressionMethod::Feasibility,
        };
        Learner::Regression {
            method,
            lambda: tuning.choice(),
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Bags and constraints JSON document.
    #[arg(long)]
    pub constraints: PathBuf,
    #[command(flatten)]
    pub learner: LearnerArgs,
    /// Label budgets for the supervised ridge baseline.
    #[arg(long, value_delimiter = ',', default_value = "10")]
    pub ridge_budgets: Vec<usize>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SweepArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// `epsilon`, `b_l`, `d_l` or `lambda`.
    #[arg(long)]
    pub parameter: SweepParameter,
    #[arg(long, value_delimiter = ',', required = true)]
    pub values: Vec<f64>,
    /// Tercile features (epsilon sweeps).
    #[arg(long, value_delimiter = ',')]
    pub features: Vec<String>,
    #[arg(long)]
    pub no_diffs: bool,
    #[arg(long, value_enum, default_value_t = Pairing::SameGroup)]
    pub pairing: Pairing,
    /// Crowd answers (b_l and d_l sweeps).
    #[arg(long)]
    pub answers: Option<PathBuf>,
    #[arg(long)]
    pub questions: Option<PathBuf>,
    #[arg(long)]
    pub bags: Option<PathBuf>,
    #[command(flatten)]
    pub policy: PolicyArgs,
    /// Fixed constraint set (lambda sweeps).
    #[arg(long)]
    pub constraints: Option<PathBuf>,
    #[command(flatten)]
    pub learner: LearnerArgs,
}

/// What a successful run ended with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Outcome {
    Done,
    Infeasible,
}

impl RunConfig {
    /// Hex SHA-256 of the configuration's JSON form.
    pub fn fingerprint(&self) -> Result<String> {
        let json = serde_json::to_string(self)?;
        Ok(Sha256::digest(json.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect())
    }

    fn solver_config(&self) -> SolverConfig {
        SolverConfig {
            escalate_to_slack: !self.no_escalate,
            slack_penalty: self.slack_penalty,
            ..SolverConfig::default()
        }
    }
}

/// Runs the command line and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .try_init();
    let config = match RunConfig::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
        }
    };
    let threads = match thread_count() {
        Ok(t) => t,
        Err(e) => return report_error(&e),
    };
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start worker threads: {e}");
            return EXIT_FAILURE;
        }
    };
    match pool.install(|| execute(&config)) {
        Ok(Outcome::Done) => EXIT_OK,
        Ok(Outcome::Infeasible) => {
            eprintln!("error: constraints are infeasible and slack escalation is disabled");
            EXIT_INFEASIBLE
        }
        Err(e) => report_error(&e),
    }
}

fn thread_count() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(0),
        Ok(v) => v.trim().parse().map_err(|_| {
            Error::InvalidArgument(format!(
                "{THREADS_ENV} must be a non-negative integer, got '{v}'"
            ))
        }),
    }
}

fn report_error(e: &Error) -> i32 {
    match e {
        Error::InvalidProblem(diagnostics) => {
            eprintln!("error: invalid problem");
            for d in diagnostics {
                eprintln!("  {d}");
            }
        }
        other => eprintln!("error: {other}"),
    }
    match e {
        Error::Io(_) | Error::SingularMatrix(_) => EXIT_FAILURE,
        _ => EXIT_INVALID,
    }
}

/// Output document with the fingerprint as its first key.
#[derive(Serialize)]
struct Stamped<'a, T: Serialize> {
    fingerprint: &'a str,
    #[serde(flatten)]
    body: &'a T,
}

struct Context<'a> {
    config: &'a RunConfig,
    fingerprint: String,
    solver: SolverConfig,
}

impl Context<'_> {
    fn path(&self, name: &str) -> PathBuf {
        self.config.output_dir.join(name)
    }

    fn write_stamped<T: Serialize>(&self, name: &str, body: &T) -> Result<()> {
        let path = self.path(name);
        io::write_json(
            &path,
            &Stamped {
                fingerprint: &self.fingerprint,
                body,
            },
        )?;
        info!("wrote {}", path.display());
        Ok(())
    }
}

fn execute(config: &RunConfig) -> Result<Outcome> {
    let ctx = Context {
        config,
        fingerprint: config.fingerprint()?,
        solver: config.solver_config(),
    };
    ctx.solver.validate()?;
    std::fs::create_dir_all(&config.output_dir)?;
    match &config.command {
        Command::GenData(a) => gen_data(&ctx, a),
        Command::MakeBags(a) => make_bags(&ctx, a),
        Command::SynthConstraints(a) => synth(&ctx, a),
        Command::AggregateCrowd(a) => aggregate(&ctx, a),
        Command::FitRegression(a) => fit_regression(&ctx, a),
        Command::FitClassification(a) => fit_classification(&ctx, a),
        Command::Tune(a) => tune(&ctx, a),
        Command::Evaluate(a) => evaluate(&ctx, a),
        Command::Sweep(a) => run_sweep(&ctx, a),
    }
}

/// Reads the dataset, taking labels from the target column when it exists.
fn load_dataset(args: &DataArgs, require_targets: bool) -> Result<Dataset> {
    let has_target = io::csv_has_column(&args.data, &args.target)?;
    if require_targets && !has_target {
        return Err(Error::MissingTargets(format!(
            "{} has no '{}' column",
            args.data.display(),
            args.target
        )));
    }
    io::read_dataset_csv(&args.data, has_target.then_some(args.target.as_str()))
}

fn load_problem(
    data: &DataArgs,
    constraints: &Path,
    require_targets: bool,
) -> Result<BallparkProblem> {
    let dataset = load_dataset(data, require_targets)?;
    let problem = BallparkProblem::new(dataset, io::read_constraints(constraints)?);
    let diagnostics = validate_problem(&problem);
    if diagnostics.is_empty() {
        Ok(problem)
    } else {
        Err(Error::InvalidProblem(diagnostics))
    }
}

fn gen_data(ctx: &Context, args: &GenDataArgs) -> Result<Outcome> {
    let spec = LinearDataSpec {
        n: args.n,
        d: args.d,
        weight_scale: args.weight_scale,
        noise_sigma: args.noise,
        bias: args.bias,
    };
    let mut data = generate_linear(&spec, ctx.config.seed)?;
    if args.center {
        data.center()?;
    }
    let path = ctx.path(&args.out);
    io::write_dataset_csv(&path, &data.dataset)?;
    let sidecar = Path::new(&args.out).with_extension("truth.json");
    ctx.write_stamped(&sidecar.to_string_lossy(), &data.truth_json())?;
    Ok(Outcome::Done)
}

fn make_bags(ctx: &Context, args: &MakeBagsArgs) -> Result<Outcome> {
    if args.terciles.is_empty() && args.binary.is_empty() && !args.all_bag {
        return Err(Error::InvalidArgument(
            "make-bags needs --terciles, --binary or --all-bag".to_string(),
        ));
    }
    let dataset = load_dataset(&args.data, false)?;
    let mut bags = Vec::new();
    if !args.terciles.is_empty() {
        let mut spec = SyntheticSpec::new(args.terciles.clone(), 0.0);
        spec.cut_quantiles = (args.cut_low, args.cut_high);
        bags.extend(make_tercile_bags(&dataset, &spec)?);
    }
    bags.extend(make_binary_bags(&dataset, &args.binary)?);
    if args.all_bag {
        bags.push(Bag::new("all", 0..dataset.n_rows()));
    }
    ctx.write_stamped("bags.json", &ConstraintSet::with_bags(bags))?;
    Ok(Outcome::Done)
}

fn synth_spec(
    features: Vec<String>,
    epsilon: f64,
    no_diffs: bool,
    pairing: Pairing,
    seed: u64,
) -> SyntheticSpec {
    SyntheticSpec {
        include_diffs: !no_diffs,
        pairing: pairing.into(),
        seed,
        ..SyntheticSpec::new(features, epsilon)
    }
}

fn synth(ctx: &Context, args: &SynthArgs) -> Result<Outcome> {
    let dataset = load_dataset(&args.data, true)?;
    let spec = synth_spec(
        args.features.clone(),
        args.epsilon,
        args.no_diffs,
        args.pairing,
        ctx.config.seed,
    );
    let bags = match &args.bags {
        Some(path) => io::read_constraints(path)?.bags,
        None if args.features.is_empty() => {
            return Err(Error::InvalidArgument(
                "synth-constraints needs --features or --bags".to_string(),
            ))
        }
        None => make_tercile_bags(&dataset, &spec)?,
    };
    let cs = constraints_for_bags(&dataset, bags, &spec)?;
    ctx.write_stamped("constraints.json", &cs)?;
    Ok(Outcome::Done)
}

fn global_bag(bags: &[Bag], name: &str, data: Option<&Path>) -> Result<Bag> {
    if let Some(bag) = bags.iter().find(|b| b.name == name) {
        return Ok(bag.clone());
    }
    let path = data.ok_or_else(|| {
        Error::InvalidArgument(format!(
            "global bag '{name}' is not in the bags file; pass --data to build it"
        ))
    })?;
    let n = io::read_dataset_csv(path, None)?.n_rows();
    Ok(Bag::new(name, 0..n))
}

fn aggregate_answers(
    policy: &AggregationPolicy,
    answers: &crate::crowd::CrowdAnswerSet,
    bags: Vec<Bag>,
    questions: &crate::crowd::QuestionMap,
) -> Result<Aggregated> {
    match policy.mode {
        AggregationMode::Percentile => aggregate_percentile(answers, policy, bags, questions),
        AggregationMode::IntervalMean => aggregate_intervals(answers, bags, questions),
    }
}

#[derive(Serialize)]
struct AggregateDoc<'a> {
    #[serde(flatten)]
    constraints: &'a ConstraintSet,
    diagnostics: Vec<String>,
}

fn aggregate(ctx: &Context, args: &AggregateArgs) -> Result<Outcome> {
    let answers = io::read_answers(&args.answers)?;
    let questions = io::read_questions(&args.questions)?;
    let bags = io::read_constraints(&args.bags)?.bags;
    let policy = args.policy.policy();
    let agg = aggregate_answers(&policy, &answers, bags, &questions)?;
    for d in &agg.diagnostics {
        eprintln!("warning: {d}");
    }
    let mut cs = agg.constraints;
    if let Some(upper) = args.policy.global_upper {
        let bag = global_bag(&cs.bags, &args.policy.global_bag, args.data.as_deref())?;
        cs = add_global_bound(&cs, upper, bag, args.policy.proportion);
    }
    ctx.write_stamped(
        "constraints.json",
        &AggregateDoc {
            constraints: &cs,
            diagnostics: agg.diagnostics.iter().map(ToString::to_string).collect(),
        },
    )?;
    Ok(Outcome::Done)
}

fn predictions_csv(values: &[f64], fingerprint: &str) -> String {
    let mut out = String::from("row,prediction,fingerprint\n");
    for (i, v) in values.iter().enumerate() {
        out.push_str(&format!("{i},{v},{fingerprint}\n"));
    }
    out
}

fn fit_regression(ctx: &Context, args: &FitRegressionArgs) -> Result<Outcome> {
    let problem = load_problem(&args.data, &args.constraints, false)?;
    let fit = match args.method {
        RegressionMethod::Feasibility => {
            if args.tuning.lambda == LambdaArg::Cvcv {
                info!("feasibility fits have no regularizer; skipping CVCV");
            }
            regression::fit_feasibility(&problem, &ctx.solver)?
        }
        RegressionMethod::TwoStep => {
            let lambda = match args.tuning.lambda {
                LambdaArg::Value(v) => v,
                LambdaArg::Cvcv => {
                    let report = tune_lambda(
                        &problem,
                        &args.tuning.grid(),
                        args.tuning.folds,
                        ctx.config.seed,
                        args.method,
                        &ctx.solver,
                    )?;
                    ctx.write_stamped("cvcv.json", &report)?;
                    report.chosen_lambda
                }
            };
            regression::fit_two_step(&problem, lambda, &ctx.solver)?
        }
    };
    io::write_json(&ctx.path("fit.json"), &fit.report(&ctx.fingerprint))?;
    let pred = regression::predict(&fit, problem.dataset.features())?;
    io::write_text(
        &ctx.path("predictions.csv"),
        &predictions_csv(pred.as_slice(), &ctx.fingerprint),
    )?;
    Ok(match fit.solution.status {
        SolveStatus::Infeasible => Outcome::Infeasible,
        _ => Outcome::Done,
    })
}

fn fit_classification(ctx: &Context, args: &FitClassificationArgs) -> Result<Outcome> {
    let problem = load_problem(&args.data, &args.constraints, false)?;
    let fit = fit_classifier(&problem, args.cost, &ctx.solver)?;
    let proportions = p_hat(&fit, &problem)?;
    io::write_json(
        &ctx.path("fit.json"),
        &fit.report(&ctx.fingerprint, &proportions),
    )?;
    let pred = predict_class(&fit, problem.dataset.features())?;
    io::write_text(
        &ctx.path("predictions.csv"),
        &predictions_csv(&pred, &ctx.fingerprint),
    )?;
    Ok(match fit.status {
        SolveStatus::Infeasible => Outcome::Infeasible,
        _ => Outcome::Done,
    })
}

fn tune(ctx: &Context, args: &TuneArgs) -> Result<Outcome> {
    let problem = load_problem(&args.data, &args.constraints, false)?;
    let grid = if args.grid.is_empty() {
        default_grid()
    } else {
        args.grid.clone()
    };
    let report = tune_lambda(
        &problem,
        &grid,
        args.folds,
        ctx.config.seed,
        args.method,
        &ctx.solver,
    )?;
    ctx.write_stamped("cvcv.json", &report)?;
    Ok(Outcome::Done)
}

#[derive(Serialize)]
struct RidgeRow {
    budget: usize,
    report: EvalReport,
}

#[derive(Serialize)]
struct EvaluateDoc {
    learner: Learner,
    ballpark: EvalReport,
    ridge: Vec<RidgeRow>,
}

/// Concatenates tidy CSV blocks under a single header.
fn join_csv(blocks: &[String]) -> String {
    let mut out = String::new();
    for (i, block) in blocks.iter().enumerate() {
        let body = if i == 0 {
            block.as_str()
        } else {
            block.split_once('\n').map_or("", |(_, rest)| rest)
        };
        out.push_str(body);
    }
    out
}

fn evaluate(ctx: &Context, args: &EvaluateArgs) -> Result<Outcome> {
    let problem = load_problem(&args.data, &args.constraints, true)?;
    let learner = args.learner.learner();
    let (k, metric, seed) = (args.learner.folds, args.learner.metric, ctx.config.seed);
    let ballpark = kfold_eval(&problem, &learner, metric, k, seed, &ctx.solver)?
        .with_fingerprint(ctx.fingerprint.as_str());
    let mut csv = vec![ballpark.to_csv("ballpark")];
    let mut ridge = Vec::new();
    for &budget in &args.ridge_budgets {
        let report = ridge_baseline(&problem.dataset, budget, &ridge_grid(), k, seed, metric)?
            .with_fingerprint(ctx.fingerprint.as_str());
        csv.push(report.to_csv(&format!("ridge-{budget}")));
        ridge.push(RidgeRow { budget, report });
    }
    ctx.write_stamped(
        "eval.json",
        &EvaluateDoc {
            learner,
            ballpark,
            ridge,
        },
    )?;
    io::write_text(&ctx.path("eval.csv"), &join_csv(&csv))?;
    Ok(Outcome::Done)
}

fn sweep_template(args: &SweepArgs, seed: u64) -> Result<SweepTemplate> {
    let missing =
        |flag: &str| Error::InvalidArgument(format!("{} sweeps need --{flag}", args.parameter));
    match args.parameter {
        SweepParameter::Epsilon => {
            if args.features.is_empty() {
                return Err(missing("features"));
            }
            Ok(SweepTemplate::Synthetic {
                dataset: load_dataset(&args.data, true)?,
                spec: synth_spec(
                    args.features.clone(),
                    0.0,
                    args.no_diffs,
                    args.pairing,
                    seed,
                ),
            })
        }
        SweepParameter::LowerQuantile | SweepParameter::DiffLowerQuantile => {
            let answers =
                io::read_answers(args.answers.as_deref().ok_or_else(|| missing("answers"))?)?;
            let questions = io::read_questions(
                args.questions
                    .as_deref()
                    .ok_or_else(|| missing("questions"))?,
            )?;
            let bags =
                io::read_constraints(args.bags.as_deref().ok_or_else(|| missing("bags"))?)?.bags;
            let global_upper = match args.policy.global_upper {
                Some(upper) => Some((
                    global_bag(&bags, &args.policy.global_bag, Some(&args.data.data))?,
                    upper,
                )),
                None => None,
            };
            Ok(SweepTemplate::Crowd {
                dataset: load_dataset(&args.data, true)?,
                answers,
                questions,
                bags,
                policy: args.policy.policy(),
                global_upper,
            })
        }
        SweepParameter::Lambda => {
            let constraints = args
                .constraints
                .as_deref()
                .ok_or_else(|| missing("constraints"))?;
            Ok(SweepTemplate::Fixed(load_problem(
                &args.data,
                constraints,
                true,
            )?))
        }
    }
}

#[derive(Serialize)]
struct SweepDoc<'a> {
    parameter: SweepParameter,
    learner: Learner,
    summary: std::collections::BTreeMap<String, f64>,
    rows: &'a [crate::eval::SweepRow],
}

fn run_sweep(ctx: &Context, args: &SweepArgs) -> Result<Outcome> {
    let template = sweep_template(args, ctx.config.seed)?;
    let learner = args.learner.learner();
    let mut rows = sweep(
        &template,
        args.parameter,
        &args.values,
        &learner,
        args.learner.metric,
        args.learner.folds,
        ctx.config.seed,
        &ctx.solver,
    )?;
    for row in &mut rows {
        row.report.config_fingerprint = ctx.fingerprint.clone();
    }
    ctx.write_stamped(
        "sweep.json",
        &SweepDoc {
            parameter: args.parameter,
            learner,
            summary: sweep_summary(&rows),
            rows: &rows,
        },
    )?;
    io::write_text(&ctx.path("sweep.csv"), &sweep_csv(&rows))?;
    Ok(Outcome::Done)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> RunConfig {
        RunConfig::try_parse_from(std::iter::once("ballpark").chain(args.iter().copied())).unwrap()
    }

    #[test]
    fn defaults_and_fingerprint() {
        let a = parse(&["gen-data"]);
        assert_eq!(a.seed, 42);
        let b = parse(&["gen-data", "--seed", "42"]);
        assert_eq!(a.fingerprint().unwrap(), b.fingerprint().unwrap());
        let c = parse(&["gen-data", "--seed", "7"]);
        assert_ne!(a.fingerprint().unwrap(), c.fingerprint().unwrap());
        assert_eq!(a.fingerprint().unwrap().len(), 64);
    }

    #[test]
    fn lambda_argument() {
        assert_eq!("cvcv".parse::<LambdaArg>().unwrap(), LambdaArg::Cvcv);
        assert_eq!("0.5".parse::<LambdaArg>().unwrap(), LambdaArg::Value(0.5));
        assert!("0".parse::<LambdaArg>().is_err());
        assert!("fast".parse::<LambdaArg>().is_err());
        let cfg = parse(&[
            "fit-regression",
            "--data",
            "d.csv",
            "--constraints",
            "c.json",
            "--lambda",
            "2",
        ]);
        let json = serde_json::to_value(&cfg).unwrap();
        assert_eq!(json["command"]["subcommand"], "fit-regression");
        assert_eq!(json["command"]["tuning"]["lambda"], 2.0);
    }

    #[test]
    fn usage_errors_exit_64() {
        assert_eq!(run(["ballpark", "--bogus"]), EXIT_USAGE);
        assert_eq!(run(["ballpark"]), EXIT_USAGE);
        assert_eq!(
            run(["ballpark", "fit-regression", "--method", "magic"]),
            EXIT_USAGE
        );
        assert_eq!(run(["ballpark", "--help"]), EXIT_OK);
    }

    #[test]
    fn joined_csv_keeps_one_header() {
        let joined = join_csv(&["h\n1\n".to_string(), "h\n2\n".to_string()]);
        assert_eq!(joined, "h\n1\n2\n");
    }
}
