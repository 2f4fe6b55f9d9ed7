//! The `softforest` command line.
//!
//! Every subcommand prints `[section]` blocks of `key: value` lines on stdout.
//! Wall-clock figures only ever appear in the `[timing]` block, so two runs
//! with the same inputs print the same text outside it. Exit status is 0 on
//! success, 1 for a usage error and 2 when the work itself fails.

use crate::activation::{Activation, SmoothStep};
use crate::data::{self, CsvColumns, Dataset, FeatureStats, ResponseScaling, Split, SplitAssignment};
use crate::ensemble::EnsembleConfig;
use crate::metrics::{self, MetricReport};
use crate::model::{HeadLayout, SoftTreeModel};
use crate::objective::Objective;
use crate::oracle::{self, BenchSpec, Generator, SyntheticSpec};
use crate::store::{self, ModelFile, TrainSummary};
use crate::trainer::{self, RankBy, SearchSpace, TrainSpec};
use clap::{Args, Parser, Subcommand, ValueEnum};
use std::ffi::OsString;
use std::fmt::Display;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

pub const THREADS_ENV: &str = "SOFTFOREST_THREADS";

#[derive(Debug, Parser)]
#[command(name = "softforest", version, about = "Soft decision-tree ensembles")]
pub struct Cli {
    /// Worker threads (results do not depend on it).
    #[arg(long, global = true, env = THREADS_ENV)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a model on the train split of a CSV file.
    Train(TrainArgs),
    /// Random hyperparameter search; keeps the best model.
    Tune(TuneArgs),
    /// Write per-row natural-scale predictions.
    Predict(PredictArgs),
    /// Metrics of a saved model on a CSV file.
    Evaluate(EvaluateArgs),
    /// Write a synthetic dataset.
    Gen(GenArgs),
    /// Time supernode against per-tree forward + backward.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct DataArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Comma-separated response columns.
    #[arg(long, value_delimiter = ',', required = true)]
    pub tasks: Vec<String>,
    #[arg(long, default_value = ",", value_parser = parse_delimiter)]
    pub delimiter: u8,
    /// Seed of the 64/16/20 split; defaults to --seed.
    #[arg(long)]
    pub split_seed: Option<u64>,
    /// Min-max scale responses to [0, 1] (mse only).
    #[arg(long)]
    pub scale_responses: bool,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// mse, logistic, poisson, zip or nb.
    #[arg(long, value_parser = parse_objective)]
    pub loss: Objective,
    /// One ensemble per head instead of shared routing (zip, nb).
    #[arg(long)]
    pub separate_heads: bool,
    /// One set of splits for all tasks.
    #[arg(long)]
    pub share_splits: bool,
    /// Smooth-step width.
    #[arg(long, default_value_t = 1.0)]
    pub gamma: f64,
    /// Epochs without improvement before stopping [default: 25, capped at the epoch budget].
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub depth_decay: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Keep the final parameters instead of the best-validation ones.
    #[arg(long)]
    pub keep_last: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 20)]
    pub trees: usize,
    #[arg(long, default_value_t = 3)]
    pub depth: usize,
    #[arg(long, default_value_t = 1e-2)]
    pub lr: f64,
    #[arg(long, default_value_t = 64)]
    pub batch: usize,
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.0)]
    pub lambda: f64,
}

#[derive(Debug, Args)]
pub struct TuneArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub budget: usize,
    #[arg(long, value_delimiter = ',', default_value = "2,3,4")]
    pub depths: Vec<usize>,
    /// `lo:hi`, or one value.
    #[arg(long, default_value = "5:100")]
    pub trees: Span<usize>,
    #[arg(long, value_delimiter = ',', default_value = "64,128,256,512")]
    pub batches: Vec<usize>,
    #[arg(long, default_value = "1e-5:1e-2")]
    pub lr: Span<f64>,
    #[arg(long, default_value = "1e-5:10")]
    pub lambda: Span<f64>,
    #[arg(long, default_value = "20:500")]
    pub epochs: Span<usize>,
    #[arg(long, value_enum, default_value_t = Rank::Loss)]
    pub rank: Rank,
    /// CSV log of every trial.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Rank {
    Loss,
    Deviance,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = ",", value_parser = parse_delimiter)]
    pub delimiter: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitChoice {
    All,
    Train,
    Valid,
    Test,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Rows to score; a named split needs the model's stored split seed.
    #[arg(long, value_enum, default_value_t = SplitChoice::All)]
    pub split: SplitChoice,
    #[arg(long, default_value = ",", value_parser = parse_delimiter)]
    pub delimiter: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GenKind {
    TwoClusters,
    Linear,
    Zip,
    Nb,
    Multitask,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long, value_enum)]
    pub kind: GenKind,
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 5)]
    pub p: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = ",", value_parser = parse_delimiter)]
    pub delimiter: u8,
    /// two-clusters: distance between class means.
    #[arg(long, default_value_t = 4.0)]
    pub separation: f64,
    /// linear, multitask: noise standard deviation.
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    /// zip: probability of the Poisson component.
    #[arg(long, default_value_t = 0.7)]
    pub pi: f64,
    /// zip, nb: baseline mean.
    #[arg(long, default_value_t = 2.0)]
    pub mu: f64,
    /// zip, nb: strength of the feature effect.
    #[arg(long, default_value_t = 0.5)]
    pub signal: f64,
    /// zip: upper bound on the mean.
    #[arg(long, default_value_t = 5.0)]
    pub mu_cap: f64,
    /// nb: dispersion.
    #[arg(long, default_value_t = 2.0)]
    pub phi: f64,
    /// multitask: number of tasks.
    #[arg(long, default_value_t = 3)]
    pub tasks: usize,
    /// multitask: task relatedness in [0, 1].
    #[arg(long, default_value_t = 0.8)]
    pub rho: f64,
    /// multitask: fraction of hidden responses.
    #[arg(long, default_value_t = 0.5)]
    pub missing_rate: f64,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, default_value_t = 100)]
    pub trees: usize,
    #[arg(long, default_value_t = 4)]
    pub depth: usize,
    #[arg(long, default_value_t = 50)]
    pub features: usize,
    #[arg(long, default_value_t = 256)]
    pub batch: usize,
    #[arg(long, default_value_t = 15)]
    pub reps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Closed range flag value: `lo:hi` or a single pinned value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Span<T> {
    pub lo: T,
    pub hi: T,
}

impl<T: FromStr + Copy> FromStr for Span<T>
where
    T::Err: Display,
{
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parse = |v: &str| v.trim().parse::<T>().map_err(|e| format!("{v:?}: {e}"));
        match s.split_once(':') {
            Some((lo, hi)) => Ok(Span {
                lo: parse(lo)?,
                hi: parse(hi)?,
            }),
            None => {
                let v = parse(s)?;
                Ok(Span { lo: v, hi: v })
            }
        }
    }
}

impl<T> From<Span<T>> for trainer::Range<T> {
    fn from(s: Span<T>) -> Self {
        trainer::Range::new(s.lo, s.hi)
    }
}

fn parse_delimiter(s: &str) -> Result<u8, String> {
    match s {
        "\\t" | "tab" => Ok(b'\t'),
        _ if s.len() == 1 && s.is_ascii() => Ok(s.as_bytes()[0]),
        _ => Err(format!("delimiter must be one ASCII character, got {s:?}")),
    }
}

fn parse_objective(s: &str) -> Result<Objective, String> {
    s.parse().map_err(|e: crate::objective::ObjectiveError| e.to_string())
}

#[derive(Debug)]
pub enum CliError {
    /// Bad flags or flag combinations; nothing was attempted.
    Usage(String),
    /// The command was valid but failed while running.
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

fn usage(m: impl Display) -> CliError {
    CliError::Usage(m.to_string())
}

fn runtime(m: impl Display) -> CliError {
    CliError::Runtime(m.to_string())
}

/// Ordered `[section]` blocks of `key: value` lines.
#[derive(Debug, Default, Clone, PartialEq)]
pub struct Report {
    sections: Vec<(String, Vec<(String, String)>)>,
}

impl Report {
    pub fn section(&mut self, name: &str) -> &mut Self {
        self.sections.push((name.to_string(), Vec::new()));
        self
    }

    pub fn put(&mut self, key: impl Into<String>, value: impl Display) -> &mut Self {
        if self.sections.is_empty() {
            self.section("result");
        }
        let last = self.sections.last_mut().expect("a section");
        last.1.push((key.into(), value.to_string()));
        self
    }

    /// `key: value` pairs of a section.
    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.sections
            .iter()
            .filter(|s| s.0 == section)
            .flat_map(|s| &s.1)
            .find(|kv| kv.0 == key)
            .map(|kv| kv.1.as_str())
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (i, (name, kvs)) in self.sections.iter().enumerate() {
            if i > 0 {
                out.push('\n');
            }
            out.push_str(&format!("[{name}]\n"));
            for (k, v) in kvs {
                out.push_str(&format!("{k}: {v}\n"));
            }
        }
        out
    }

    /// Parses text produced by [`render`](Self::render).
    pub fn parse(text: &str) -> Report {
        let mut r = Report::default();
        for line in text.lines() {
            let line = line.trim_end();
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                r.section(name);
            } else if let Some((k, v)) = line.split_once(": ") {
                r.put(k, v);
            }
        }
        r
    }
}

/// Shortest round-trip form, switching to exponent notation for very small
/// or very large magnitudes.
pub struct Num(pub f64);

impl Display for Num {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let a = self.0.abs();
        if a != 0.0 && a.is_finite() && !(1e-4..1e15).contains(&a) {
            write!(f, "{:e}", self.0)
        } else {
            write!(f, "{}", self.0)
        }
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "none".to_string(), |v| Num(v).to_string())
}

/// Parses `argv` (program name first), runs the command, and returns the exit
/// status. Reports go to stdout, diagnostics to stderr.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let stdout = std::io::stdout();
    match execute(&cli, &mut stdout.lock()) {
        Ok(()) => 0,
        Err(e) => {
            let kind = match e {
                CliError::Usage(_) => "usage error",
                CliError::Runtime(_) => "error",
            };
            eprintln!("{kind}: {e}");
            e.exit_code()
        }
    }
}

/// Runs a parsed command, writing its report to `out`.
pub fn execute(cli: &Cli, out: &mut dyn Write) -> Result<(), CliError> {
    let report = match cli.threads {
        Some(0) => return Err(usage("--threads must be at least 1")),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(n).build().map_err(runtime)?;
            pool.install(|| dispatch(&cli.command))?
        }
        None => dispatch(&cli.command)?,
    };
    out.write_all(report.render().as_bytes()).map_err(runtime)
}

fn dispatch(cmd: &Command) -> Result<Report, CliError> {
    match cmd {
        Command::Train(a) => train(a),
        Command::Tune(a) => tune(a),
        Command::Predict(a) => predict(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Gen(a) => gen(a),
        Command::Bench(a) => bench(a),
    }
}

struct Prepared {
    train: Dataset,
    valid: Dataset,
    test: Dataset,
    stats: FeatureStats,
    scaling: Option<ResponseScaling>,
    split_seed: u64,
}

fn check_data_args(d: &DataArgs, m: &ModelArgs) -> Result<(), CliError> {
    if d.scale_responses && m.loss != Objective::SquaredError {
        return Err(usage("--scale-responses only applies to --loss mse"));
    }
    if d.tasks.iter().any(|t| t.trim().is_empty()) {
        return Err(usage("--tasks has an empty column name"));
    }
    if m.separate_heads && m.loss.heads_required() == 1 {
        return Err(usage(format!("--separate-heads needs a two-head loss, not {}", m.loss)));
    }
    SmoothStep::new(m.gamma).map_err(usage)?;
    Ok(())
}

fn prepare(d: &DataArgs, m: &ModelArgs) -> Result<Prepared, CliError> {
    let tasks: Vec<&str> = d.tasks.iter().map(|s| s.trim()).collect();
    let data = data::load_csv(&d.data, &tasks, d.delimiter).map_err(runtime)?;
    let split_seed = d.split_seed.unwrap_or(m.seed);
    let assignment = data::split(data.len(), split_seed).map_err(runtime)?;
    let train_rows = assignment.rows(Split::Train);
    let stats = data::fit_feature_stats(&data, &train_rows).map_err(runtime)?;
    let mut data = data;
    data.apply_feature_stats(&stats).map_err(runtime)?;
    let scaling = d.scale_responses.then(|| data::fit_response_scaling(&data, &train_rows));
    if let Some(s) = &scaling {
        data.apply_response_scaling(s);
    }
    data.validate_responses(m.loss).map_err(runtime)?;
    Ok(Prepared {
        train: data.select(&train_rows),
        valid: data.select(&assignment.rows(Split::Valid)),
        test: data.select(&assignment.rows(Split::Test)),
        stats,
        scaling,
        split_seed,
    })
}

fn base_config(m: &ModelArgs, trees: usize, depth: usize, p: usize, t: usize) -> Result<EnsembleConfig, CliError> {
    let act = Activation::SmoothStep(SmoothStep::new(m.gamma).map_err(usage)?);
    let cfg = EnsembleConfig::new(trees, depth, p)
        .with_tasks(t)
        .with_activation(act)
        .with_shared_splits(m.share_splits);
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

fn layout(m: &ModelArgs) -> HeadLayout {
    if m.separate_heads {
        HeadLayout::Separate
    } else {
        HeadLayout::Shared
    }
}

fn base_spec(m: &ModelArgs, max_epochs: usize) -> TrainSpec {
    TrainSpec {
        max_epochs,
        patience: m.patience.unwrap_or(25.min(max_epochs)),
        depth_decay: m.depth_decay,
        seed: m.seed,
        restore_best: !m.keep_last,
        ..TrainSpec::default()
    }
}

fn metric_lines(r: &mut Report, m: &MetricReport) {
    r.put("rows", m.rows);
    r.put("loss", Num(m.loss));
    r.put("mean_mse", opt(m.task_mean(|t| t.mse)));
    if m.objective.is_count() {
        r.put("mean_poisson_deviance", opt(m.task_mean(|t| t.poisson_deviance)));
    }
    if m.objective.is_count() || m.objective == Objective::Logistic {
        r.put("mean_auc", opt(m.task_mean(|t| t.auc)));
    }
    for t in &m.tasks {
        let key = |what: &str| format!("task.{}.{what}", t.task);
        r.put(key("observed"), t.observed);
        r.put(key("loss"), opt(t.loss));
        r.put(key("mse"), opt(t.mse));
        if t.poisson_deviance.is_some() {
            r.put(key("poisson_deviance"), opt(t.poisson_deviance));
        }
        if t.auc.is_some() {
            r.put(key("auc"), opt(t.auc));
        }
    }
}

fn score(model: &SoftTreeModel, data: &Dataset) -> Result<MetricReport, CliError> {
    let raw = model.predict_raw(&data.features).map_err(runtime)?;
    metrics::evaluate(model.objective, &raw, data).map_err(runtime)
}

fn model_file(model: &SoftTreeModel, prep: &Prepared, spec: &TrainSpec, report: &trainer::TrainReport) -> ModelFile {
    let mut f = ModelFile::new(
        model,
        prep.train.feature_names.clone(),
        prep.train.task_names.clone(),
        prep.stats.clone(),
    );
    f.response_scaling = prep.scaling.clone();
    f.split_seed = Some(prep.split_seed);
    f.training = Some(TrainSummary::new(spec, report));
    f
}

fn split_lines(r: &mut Report, prep: &Prepared) {
    r.put("split_seed", prep.split_seed);
    r.put("rows_train", prep.train.len());
    r.put("rows_valid", prep.valid.len());
    r.put("rows_test", prep.test.len());
}

fn train(a: &TrainArgs) -> Result<Report, CliError> {
    check_data_args(&a.data, &a.model)?;
    let spec = TrainSpec {
        learning_rate: a.lr,
        batch_size: a.batch,
        lambda: a.lambda,
        ..base_spec(&a.model, a.epochs)
    };
    spec.validate().map_err(usage)?;
    base_config(&a.model, a.trees, a.depth, 1, a.data.tasks.len())?;

    let started = Instant::now();
    let prep = prepare(&a.data, &a.model)?;
    let cfg = base_config(&a.model, a.trees, a.depth, prep.train.num_features(), prep.train.num_tasks())?;
    let mut model = SoftTreeModel::new(a.model.loss, cfg, layout(&a.model), a.model.seed).map_err(runtime)?;
    let report = trainer::fit(&mut model, &spec, &prep.train, &prep.valid).map_err(runtime)?;
    let file = model_file(&model, &prep, &spec, &report);
    store::save(&file, &a.model.out).map_err(runtime)?;
    let test = score(&model, &prep.test)?;
    let elapsed = started.elapsed();

    let mut r = Report::default();
    r.section("train");
    r.put("loss_function", a.model.loss);
    r.put("parameters", model.num_params());
    split_lines(&mut r, &prep);
    r.put("epochs_run", report.epochs_run());
    r.put("best_epoch", report.best_epoch);
    r.put("best_valid_loss", Num(report.best_valid_loss));
    r.put("final_train_loss", Num(report.final_train_loss));
    r.put("final_valid_loss", Num(report.final_valid_loss));
    r.put("stopped_early", report.stopped_early);
    r.put("steps", report.steps);
    r.put("model", a.model.out.display());
    r.section("test");
    metric_lines(&mut r, &test);
    r.section("timing");
    r.put("seconds", elapsed.as_secs_f64());
    Ok(r)
}

fn tune(a: &TuneArgs) -> Result<Report, CliError> {
    check_data_args(&a.data, &a.model)?;
    if a.budget == 0 {
        return Err(usage("--budget must be at least 1"));
    }
    let space = SearchSpace {
        depths: a.depths.clone(),
        trees: a.trees.into(),
        batch_sizes: a.batches.clone(),
        learning_rate: a.lr.into(),
        lambda: a.lambda.into(),
        epochs: a.epochs.into(),
    };
    space.validate().map_err(usage)?;
    if a.depths.iter().any(|&d| d == 0 || d > crate::ensemble::MAX_DEPTH) || a.batches.contains(&0) {
        return Err(usage("depths must be in 1..=16 and batch sizes positive"));
    }
    let rank = match a.rank {
        Rank::Loss => RankBy::ValidLoss,
        Rank::Deviance if a.model.loss.is_count() => RankBy::ValidDeviance,
        Rank::Deviance => return Err(usage("--rank deviance needs a count loss")),
    };
    // patience is capped per trial, so only its lower bound matters here
    let base = base_spec(&a.model, a.epochs.hi);
    TrainSpec {
        max_epochs: base.patience.max(1),
        ..base.clone()
    }
    .validate()
    .map_err(usage)?;

    let started = Instant::now();
    let prep = prepare(&a.data, &a.model)?;
    let cfg = base_config(&a.model, 1, 1, prep.train.num_features(), prep.train.num_tasks())?;
    let result = trainer::random_search(
        a.model.loss,
        layout(&a.model),
        cfg,
        &base,
        &space,
        a.budget,
        rank,
        &prep.train,
        &prep.valid,
    )
    .map_err(runtime)?;
    let file = model_file(&result.model, &prep, &result.spec, &result.report);
    store::save(&file, &a.model.out).map_err(runtime)?;
    if let Some(path) = &a.log {
        write_trial_log(path, &result.trials).map_err(runtime)?;
    }
    let test = score(&result.model, &prep.test)?;
    let elapsed = started.elapsed();

    let mut r = Report::default();
    r.section("tune");
    r.put("loss_function", a.model.loss);
    split_lines(&mut r, &prep);
    r.put("budget", a.budget);
    r.put("best_trial", result.best);
    let best = &result.trials[result.best];
    r.put("depth", best.depth);
    r.put("trees", best.trees);
    r.put("batch", best.batch_size);
    r.put("lr", Num(best.learning_rate));
    r.put("lambda", Num(best.lambda));
    r.put("max_epochs", best.max_epochs);
    r.put("epochs_run", best.epochs_run);
    r.put("valid_loss", Num(best.valid_loss));
    r.put("valid_deviance", opt(best.valid_deviance));
    r.put("model", a.model.out.display());
    r.section("trials");
    for t in &result.trials {
        let status = match &t.failure {
            Some(f) => format!("failed ({f})"),
            None => format!("valid_loss={}", Num(t.valid_loss)),
        };
        r.put(
            format!("trial.{}", t.index),
            format!(
                "depth={} trees={} batch={} lr={} lambda={} epochs={}/{} {status}",
                t.depth, t.trees, t.batch_size, Num(t.learning_rate), Num(t.lambda), t.epochs_run, t.max_epochs
            ),
        );
    }
    r.section("test");
    metric_lines(&mut r, &test);
    r.section("timing");
    r.put("seconds", elapsed.as_secs_f64());
    Ok(r)
}

fn write_trial_log(path: &Path, trials: &[trainer::Trial]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "trial",
        "depth",
        "trees",
        "batch",
        "lr",
        "lambda",
        "max_epochs",
        "epochs_run",
        "valid_loss",
        "valid_deviance",
        "failure",
    ])?;
    for t in trials {
        w.write_record([
            t.index.to_string(),
            t.depth.to_string(),
            t.trees.to_string(),
            t.batch_size.to_string(),
            t.learning_rate.to_string(),
            t.lambda.to_string(),
            t.max_epochs.to_string(),
            t.epochs_run.to_string(),
            t.valid_loss.to_string(),
            t.valid_deviance.map(|v| v.to_string()).unwrap_or_default(),
            t.failure.clone().unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a CSV with a saved model's columns and applies its stored transforms.
fn load_for_model(file: &ModelFile, path: &Path, delimiter: u8, tasks_optional: bool) -> Result<Dataset, CliError> {
    let columns = CsvColumns {
        tasks: file.task_names.clone(),
        features: Some(file.feature_names.clone()),
        optional_tasks: tasks_optional,
    };
    let mut data = data::load_csv_columns(path, &columns, delimiter).map_err(runtime)?;
    data.apply_feature_stats(&file.feature_stats).map_err(runtime)?;
    if let Some(s) = &file.response_scaling {
        data.apply_response_scaling(s);
    }
    Ok(data)
}

fn predict(a: &PredictArgs) -> Result<Report, CliError> {
    let started = Instant::now();
    let file = store::load(&a.model).map_err(runtime)?;
    let data = load_for_model(&file, &a.data, a.delimiter, true)?;
    let model = file.model();
    let natural = model.predict_natural(&data.features).map_err(runtime)?;
    let names = model.objective.output_names();
    let (n, t, q) = (data.len(), model.num_tasks(), names.len());

    let mut header = vec!["row".to_string()];
    for task in &file.task_names {
        header.extend(names.iter().map(|o| format!("{task}_{o}")));
    }
    let mut w = csv::WriterBuilder::new()
        .delimiter(a.delimiter)
        .from_path(&a.out)
        .map_err(runtime)?;
    w.write_record(&header).map_err(runtime)?;
    let vals = natural.as_slice();
    for row in 0..n {
        let mut rec = vec![row.to_string()];
        for task in 0..t {
            for j in 0..q {
                let mut v = vals[(row * t + task) * q + j];
                if let (Some(s), 0) = (&file.response_scaling, j) {
                    v = s.inverse(task, v);
                }
                rec.push(v.to_string());
            }
        }
        w.write_record(&rec).map_err(runtime)?;
    }
    w.flush().map_err(runtime)?;

    let mut r = Report::default();
    r.section("predict");
    r.put("rows", n);
    r.put("tasks", t);
    r.put("columns", header.len());
    r.put("out", a.out.display());
    r.section("timing");
    r.put("seconds", started.elapsed().as_secs_f64());
    Ok(r)
}

fn evaluate(a: &EvaluateArgs) -> Result<Report, CliError> {
    let started = Instant::now();
    let file = store::load(&a.model).map_err(runtime)?;
    let data = load_for_model(&file, &a.data, a.delimiter, false)?;
    let which = match a.split {
        SplitChoice::All => None,
        SplitChoice::Train => Some(Split::Train),
        SplitChoice::Valid => Some(Split::Valid),
        SplitChoice::Test => Some(Split::Test),
    };
    let data = match which {
        None => data,
        Some(s) => {
            let seed = file
                .split_seed
                .ok_or_else(|| runtime("model file has no split seed; use --split all"))?;
            let assignment: SplitAssignment = data::split(data.len(), seed).map_err(runtime)?;
            data.select(&assignment.rows(s))
        }
    };
    let model = file.model();
    let m = score(&model, &data)?;
    let mut r = Report::default();
    r.section("evaluate");
    r.put("loss_function", model.objective);
    r.put("split", format!("{:?}", a.split).to_lowercase());
    metric_lines(&mut r, &m);
    r.section("timing");
    r.put("seconds", started.elapsed().as_secs_f64());
    Ok(r)
}

fn gen(a: &GenArgs) -> Result<Report, CliError> {
    let generator = match a.kind {
        GenKind::TwoClusters => Generator::TwoClusters {
            separation: a.separation,
        },
        GenKind::Linear => Generator::LinearRegression { noise: a.noise },
        GenKind::Zip => Generator::ZipCounts {
            pi: a.pi,
            mu: a.mu,
            signal: a.signal,
            mu_cap: a.mu_cap,
        },
        GenKind::Nb => Generator::NbCounts {
            mu: a.mu,
            phi: a.phi,
            signal: a.signal,
        },
        GenKind::Multitask => Generator::RelatedMultitask {
            tasks: a.tasks,
            rho: a.rho,
            noise: a.noise,
            missing_rate: a.missing_rate,
        },
    };
    let spec = SyntheticSpec::new(generator, a.n, a.p, a.seed);
    if a.p < spec.min_features() {
        return Err(usage(format!("--p must be at least {} for this generator", spec.min_features())));
    }
    let finite_pos = |v: f64| v.is_finite() && v > 0.0;
    let ok = match generator {
        Generator::TwoClusters { separation } => separation.is_finite(),
        Generator::LinearRegression { noise } => noise.is_finite() && noise >= 0.0,
        Generator::ZipCounts { pi, mu, mu_cap, signal } => {
            (0.0..=1.0).contains(&pi) && finite_pos(mu) && finite_pos(mu_cap) && signal.is_finite()
        }
        Generator::NbCounts { mu, phi, signal } => finite_pos(mu) && finite_pos(phi) && signal.is_finite(),
        Generator::RelatedMultitask {
            tasks,
            rho,
            noise,
            missing_rate,
        } => tasks >= 1 && (0.0..=1.0).contains(&rho) && noise >= 0.0 && (0.0..1.0).contains(&missing_rate),
    };
    if !ok {
        return Err(usage("generator parameters out of range"));
    }
    let data = oracle::generate(&spec);
    data::write_csv(&data, &a.out, a.delimiter).map_err(runtime)?;
    let mut r = Report::default();
    r.section("gen");
    r.put("kind", format!("{:?}", a.kind).to_lowercase());
    r.put("rows", data.len());
    r.put("features", data.num_features());
    r.put("tasks", data.task_names.join(","));
    r.put("observed_fraction", Num(data.observed_fraction()));
    r.put("out", a.out.display());
    Ok(r)
}

fn bench(a: &BenchArgs) -> Result<Report, CliError> {
    let spec = BenchSpec {
        trees: a.trees,
        depth: a.depth,
        features: a.features,
        batch: a.batch,
        reps: a.reps,
        seed: a.seed,
    };
    if a.batch == 0 || a.reps == 0 {
        return Err(usage("--batch and --reps must be positive"));
    }
    EnsembleConfig::new(a.trees, a.depth, a.features).validate().map_err(usage)?;
    let res = oracle::speed_comparison(&spec).map_err(runtime)?;
    let mut r = Report::default();
    r.section("bench");
    r.put("trees", a.trees);
    r.put("depth", a.depth);
    r.put("features", a.features);
    r.put("batch", a.batch);
    r.put("reps", a.reps);
    r.put("threads", rayon::current_num_threads());
    r.put("max_abs_diff", Num(res.max_abs_diff));
    r.section("timing");
    r.put("supernode_ms", format!("{:.3}", res.supernode.as_secs_f64() * 1e3));
    r.put("looped_ms", format!("{:.3}", res.looped.as_secs_f64() * 1e3));
    r.put("speedup", format!("{:.2}", res.speedup()));
    Ok(r)
}
