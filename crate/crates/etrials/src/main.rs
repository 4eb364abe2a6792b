//! Command-line front end for the trial-analysis pipeline.
//!
//! Exit codes: 0 success, 2 validation failure, 3 estimation failure,
//! 4 usage error. The `ETRIALS_THREADS` environment variable caps the
//! worker pool; output is identical at any thread count.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use etrials::cleaning::{
    drop_best_so_far, flatten_subproblems, restrict_to_help_requesters, summarize_conditions,
};
use etrials::covariates::{classification_permutation_test, select_features, CptOptions};
use etrials::data_model::{validate_tables, Provenance, TrialDataset};
use etrials::error::{Error, Result};
use etrials::estimators::{
    difference_in_means, loop_estimate, regression_estimate, EstimateOptions, EstimateResult,
    Outcome,
};
use etrials::imputation::{ImputerKind, ImputerSpec};
use etrials::ingestion::{build_analysis_table_with, load_tables, HeaderMapping, LogTables};
use etrials::report::{run_report, ReportOptions};
use etrials::simulation::{generate, OutcomeKind, SimConfig};

#[derive(Parser)]
#[command(
    name = "etrials",
    about = "Analyze randomized experiments logged in the eight-file E-TRIALS CSV layout",
    version,
    args_override_self = true
)]
struct Cli {
    /// Read default flag values from a key=value file (one per line;
    /// explicit command-line flags win).
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check the log tables for schema and invariant violations.
    Validate(ValidateArgs),
    /// Run the filtering pipeline and emit the analysis table.
    Clean(CleanArgs),
    /// Covariate balance check via a classification permutation test.
    Balance(BalanceArgs),
    /// Drop near-zero-variance and highly correlated covariates.
    SelectFeatures(SelectFeaturesArgs),
    /// Estimate the average treatment effect.
    Estimate(EstimateArgs),
    /// Generate a synthetic trial with known ground truth.
    Simulate(SimulateArgs),
    /// Full pipeline: balance, feature selection, all three estimators.
    Report(ReportArgs),
}

#[derive(Args)]
struct TableArgs {
    /// Directory containing the log CSV files.
    dir: PathBuf,
    /// Header-mapping file (canonical=actual lines, plus missing=token,…).
    #[arg(long, value_name = "FILE")]
    mapping: Option<PathBuf>,
}

#[derive(Args)]
struct ArmArgs {
    /// Condition code of the treatment arm.
    #[arg(long, default_value_t = 1)]
    treatment_code: i64,
    /// Condition code of the control arm.
    #[arg(long, default_value_t = 0)]
    control_code: i64,
    /// Study-level assignment probability.
    #[arg(long, default_value_t = 0.5)]
    p_assign: f64,
}

#[derive(Args)]
struct ValidateArgs {
    #[command(flatten)]
    tables: TableArgs,
    /// Also build and write the canonical analysis CSV.
    #[arg(long, value_name = "FILE")]
    emit_analysis_table: Option<PathBuf>,
    #[command(flatten)]
    arms: ArmArgs,
}

#[derive(Args)]
struct CleanArgs {
    #[command(flatten)]
    tables: TableArgs,
    /// Remove problem rows carrying this condition code.
    #[arg(long)]
    best_so_far_code: Option<i64>,
    /// Keep only students who requested at least one hint.
    #[arg(long)]
    require_hint: bool,
    /// Write the per-condition summary table here.
    #[arg(long, value_name = "FILE")]
    summary_out: Option<PathBuf>,
    /// Analysis CSV destination (stdout when omitted).
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
    #[command(flatten)]
    arms: ArmArgs,
}

#[derive(Args)]
struct BalanceArgs {
    /// Analysis CSV produced by `clean` or `simulate`.
    input: PathBuf,
    #[arg(long, default_value_t = 199)]
    permutations: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    trees: usize,
    #[arg(long, default_value_t = 5)]
    min_leaf: usize,
}

#[derive(Args)]
struct SelectFeaturesArgs {
    /// Analysis CSV produced by `clean` or `simulate`.
    input: PathBuf,
    #[arg(long, default_value_t = 1e-8)]
    var_threshold: f64,
    #[arg(long, default_value_t = 0.9)]
    cor_threshold: f64,
    /// Selection table destination (stdout when omitted).
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum EstimatorArg {
    TTest,
    Reg,
    Loop,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum OutcomeArg {
    Proximal,
    Distal,
}

impl From<OutcomeArg> for Outcome {
    fn from(o: OutcomeArg) -> Outcome {
        match o {
            OutcomeArg::Proximal => Outcome::Proximal,
            OutcomeArg::Distal => Outcome::Distal,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ImputerArg {
    Mean,
    Linear,
    Forest,
}

impl From<ImputerArg> for ImputerKind {
    fn from(i: ImputerArg) -> ImputerKind {
        match i {
            ImputerArg::Mean => ImputerKind::Mean,
            ImputerArg::Linear => ImputerKind::Linear,
            ImputerArg::Forest => ImputerKind::Forest,
        }
    }
}

#[derive(Args)]
struct ForestArgs {
    #[arg(long, default_value_t = 100)]
    trees: usize,
    /// Features tried per split (default √q for classification, q/3 for
    /// regression).
    #[arg(long)]
    mtry: Option<usize>,
    #[arg(long, default_value_t = 5)]
    min_leaf: usize,
}

impl ForestArgs {
    fn imputer_spec(&self, kind: ImputerKind) -> ImputerSpec {
        let mut spec = ImputerSpec::new(kind);
        spec.n_trees = self.trees;
        spec.mtry = self.mtry;
        spec.min_leaf = self.min_leaf;
        spec
    }
}

#[derive(Args)]
struct EstimateArgs {
    /// Analysis CSV produced by `clean` or `simulate`.
    input: PathBuf,
    #[arg(long, value_enum, default_value_t = EstimatorArg::All)]
    estimator: EstimatorArg,
    #[arg(long, value_enum, default_value_t = OutcomeArg::Proximal)]
    outcome: OutcomeArg,
    #[arg(long, value_enum, default_value_t = ImputerArg::Forest)]
    imputer: ImputerArg,
    /// Override the assignment probability stored in the input.
    #[arg(long)]
    p_assign: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Confidence level for the interval.
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    /// Use the Welch t-test instead of the pooled-variance form.
    #[arg(long)]
    welch: bool,
    #[command(flatten)]
    forest: ForestArgs,
    /// Emit JSON instead of CSV.
    #[arg(long)]
    json: bool,
    /// Destination (stdout when omitted).
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SimOutcomeArg {
    Constant,
    Linear,
    Nonlinear,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, default_value_t = 200)]
    n: usize,
    /// Number of numeric covariates.
    #[arg(long, default_value_t = 4)]
    covariates: usize,
    #[arg(long, default_value_t = 10)]
    clusters: usize,
    #[arg(long, default_value_t = 0.0)]
    cluster_sd: f64,
    /// True average treatment effect.
    #[arg(long, default_value_t = 0.3)]
    tau: f64,
    #[arg(long, value_enum, default_value_t = SimOutcomeArg::Linear)]
    outcome: SimOutcomeArg,
    #[arg(long, default_value_t = 1.0)]
    noise_sd: f64,
    #[arg(long, default_value_t = 0.5)]
    p_assign: f64,
    /// Levels of an extra categorical covariate (0 = none).
    #[arg(long, default_value_t = 0)]
    categorical_levels: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Analysis CSV destination (stdout when omitted).
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
    /// Per-unit potential-outcome truth sidecar CSV.
    #[arg(long, value_name = "FILE")]
    truth_out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Analysis CSV produced by `clean` or `simulate`.
    input: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    #[arg(long)]
    welch: bool,
    #[arg(long, value_enum, default_value_t = ImputerArg::Forest)]
    imputer: ImputerArg,
    #[command(flatten)]
    forest: ForestArgs,
    #[arg(long, default_value_t = 199)]
    permutations: usize,
    #[arg(long, default_value_t = 1e-8)]
    var_threshold: f64,
    #[arg(long, default_value_t = 0.9)]
    cor_threshold: f64,
    /// Skip the permutation balance check.
    #[arg(long)]
    skip_balance: bool,
    /// Directory receiving results.csv, ci_plot.csv, provenance.json.
    #[arg(long, value_name = "DIR", default_value = ".")]
    out_dir: PathBuf,
}

fn out_writer(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(io::stdout().lock()),
    })
}

fn load_mapped_tables(args: &TableArgs) -> Result<LogTables> {
    let mapping = args
        .mapping
        .as_deref()
        .map(HeaderMapping::load)
        .transpose()?;
    load_tables(&args.dir, mapping.as_ref())
}

fn read_dataset(path: &Path) -> Result<TrialDataset> {
    TrialDataset::read_analysis_csv(File::open(path)?)
}

fn run_validate(args: &ValidateArgs) -> Result<i32> {
    let tables = load_mapped_tables(&args.tables)?;
    let report = validate_tables(&tables);
    let mut stdout = io::stdout().lock();
    serde_json::to_writer_pretty(&mut stdout, &report)?;
    writeln!(stdout)?;
    if let Some(path) = &args.emit_analysis_table {
        let dataset = build_analysis_table_with(
            &tables,
            args.arms.treatment_code,
            args.arms.control_code,
            args.arms.p_assign,
            Provenance::default(),
        )?;
        dataset.write_analysis_csv(out_writer(Some(path))?)?;
    }
    Ok(if report.violations.is_empty() { 0 } else { 2 })
}

fn run_clean(args: &CleanArgs) -> Result<i32> {
    let mut tables = load_mapped_tables(&args.tables)?;
    let mut provenance = Provenance::default();
    let mut rows = std::mem::take(&mut tables.problem_logs);
    rows = flatten_subproblems(rows, &mut provenance);
    if let Some(code) = args.best_so_far_code {
        rows = drop_best_so_far(rows, code, &mut provenance);
    }
    if args.require_hint {
        rows = restrict_to_help_requesters(rows, tables.action_logs.as_deref(), &mut provenance);
    }
    if let Some(path) = &args.summary_out {
        summarize_conditions(&rows).write_csv(out_writer(Some(path))?)?;
    }
    tables.problem_logs = rows;
    let dataset = build_analysis_table_with(
        &tables,
        args.arms.treatment_code,
        args.arms.control_code,
        args.arms.p_assign,
        provenance,
    )?;
    dataset.write_analysis_csv(out_writer(args.out.as_deref())?)?;
    Ok(0)
}

fn run_balance(args: &BalanceArgs) -> Result<i32> {
    let dataset = read_dataset(&args.input)?;
    let options = CptOptions {
        n_trees: args.trees,
        min_leaf: args.min_leaf,
    };
    let result =
        classification_permutation_test(&dataset, args.permutations, args.seed, &options)?;
    let mut stdout = io::stdout().lock();
    serde_json::to_writer_pretty(&mut stdout, &result)?;
    writeln!(stdout)?;
    Ok(0)
}

fn run_select_features(args: &SelectFeaturesArgs) -> Result<i32> {
    let dataset = read_dataset(&args.input)?;
    let result = select_features(&dataset, args.var_threshold, args.cor_threshold)?;
    result.write_csv(out_writer(args.out.as_deref())?)?;
    Ok(0)
}

fn write_estimates(results: &[EstimateResult], json: bool, w: &mut dyn Write) -> Result<()> {
    if json {
        serde_json::to_writer_pretty(&mut *w, results)?;
        writeln!(w)?;
        return Ok(());
    }
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record([
        "perf", "method", "est", "se", "p_value", "ci_low", "ci_high", "n_treated", "n_control",
    ])?;
    for r in results {
        wtr.write_record([
            r.outcome.label().to_string(),
            r.estimator.label().to_string(),
            format!("{}", r.estimate),
            format!("{}", r.std_error),
            format!("{}", r.p_value),
            format!("{}", r.ci_low),
            format!("{}", r.ci_high),
            r.n_treated.to_string(),
            r.n_control.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

fn run_estimate(args: &EstimateArgs) -> Result<i32> {
    let mut dataset = read_dataset(&args.input)?;
    if let Some(p) = args.p_assign {
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::domain(format!("p-assign {p} outside (0,1)")));
        }
        for r in &mut dataset.records {
            r.assigned_prob = p;
        }
    }
    let outcome: Outcome = args.outcome.into();
    let opts = EstimateOptions {
        level: args.level,
        welch: args.welch,
    };
    let spec = args.forest.imputer_spec(args.imputer.into());
    let all_covariates = dataset.covariate_names.clone();
    let mut results = Vec::new();
    match args.estimator {
        EstimatorArg::TTest => results.push(difference_in_means(&dataset, outcome, &opts)?),
        EstimatorArg::Reg => {
            results.push(regression_estimate(&dataset, outcome, &all_covariates, &opts)?)
        }
        EstimatorArg::Loop => {
            results.push(loop_estimate(&dataset, outcome, &spec, args.seed, &opts)?)
        }
        EstimatorArg::All => {
            results.push(difference_in_means(&dataset, outcome, &opts)?);
            results.push(regression_estimate(&dataset, outcome, &all_covariates, &opts)?);
            results.push(loop_estimate(&dataset, outcome, &spec, args.seed, &opts)?);
        }
    }
    let mut w = out_writer(args.out.as_deref())?;
    write_estimates(&results, args.json, &mut w)?;
    Ok(0)
}

fn run_simulate(args: &SimulateArgs) -> Result<i32> {
    let outcome = match args.outcome {
        SimOutcomeArg::Constant => OutcomeKind::Constant,
        SimOutcomeArg::Linear => OutcomeKind::Linear,
        SimOutcomeArg::Nonlinear => OutcomeKind::Nonlinear,
    };
    let config = SimConfig {
        n: args.n,
        q: args.covariates,
        n_clusters: args.clusters,
        cluster_sd: args.cluster_sd,
        tau: args.tau,
        outcome,
        noise_sd: args.noise_sd,
        p: args.p_assign,
        categorical_levels: args.categorical_levels,
    };
    let trial = generate(&config, args.seed)?;
    trial
        .dataset
        .write_analysis_csv(out_writer(args.out.as_deref())?)?;
    if let Some(path) = &args.truth_out {
        trial.write_truth_csv(out_writer(Some(path))?)?;
    }
    Ok(0)
}

fn run_report_cmd(args: &ReportArgs) -> Result<i32> {
    let dataset = read_dataset(&args.input)?;
    let opts = ReportOptions {
        seed: args.seed,
        level: args.level,
        welch: args.welch,
        imputer: args.forest.imputer_spec(args.imputer.into()),
        n_permutations: args.permutations,
        variance_threshold: args.var_threshold,
        correlation_threshold: args.cor_threshold,
        skip_balance: args.skip_balance,
    };
    let report = run_report(&dataset, &opts)?;
    std::fs::create_dir_all(&args.out_dir)?;
    report.write_results_csv(out_writer(Some(&args.out_dir.join("results.csv")))?)?;
    report.write_ci_csv(out_writer(Some(&args.out_dir.join("ci_plot.csv")))?)?;
    report.write_provenance_json(out_writer(Some(&args.out_dir.join("provenance.json")))?)?;
    Ok(0)
}

/// Expands `--config FILE` into `--key value` tokens placed right after
/// the subcommand so explicit flags (which come later) override them.
fn expand_config(args: Vec<String>) -> std::result::Result<Vec<String>, String> {
    let config_path = {
        let mut found = None;
        let mut iter = args.iter().enumerate();
        while let Some((i, a)) = iter.next() {
            if a == "--config" {
                found = args.get(i + 1).cloned();
                if found.is_none() {
                    return Err("--config requires a file argument".into());
                }
            } else if let Some(p) = a.strip_prefix("--config=") {
                found = Some(p.to_string());
            }
        }
        found
    };
    let Some(path) = config_path else {
        return Ok(args);
    };
    let text = std::fs::read_to_string(&path)
        .map_err(|e| format!("cannot read config file {path}: {e}"))?;
    let mut extra = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(format!("config line is not key=value: {line}"));
        };
        let key = key.trim();
        let value = value.trim();
        extra.push(format!("--{key}"));
        if value.eq_ignore_ascii_case("true") {
            // bare flags like welch=true
            extra.pop();
            extra.push(format!("--{key}"));
        } else if value.eq_ignore_ascii_case("false") {
            extra.pop();
        } else {
            extra.push(value.to_string());
        }
    }
    // The subcommand is the first token after the binary name that is not
    // a flag or a flag value; config defaults slot in right after it.
    let mut out = Vec::with_capacity(args.len() + extra.len());
    let mut inserted = false;
    let mut skip_value = false;
    for (i, a) in args.into_iter().enumerate() {
        let is_flag = a.starts_with('-');
        out.push(a);
        if i == 0 || inserted {
            continue;
        }
        if skip_value {
            skip_value = false;
            continue;
        }
        if is_flag {
            skip_value = !out.last().unwrap().contains('=');
            continue;
        }
        out.extend(extra.iter().cloned());
        inserted = true;
    }
    Ok(out)
}

fn configure_threads() {
    if let Ok(v) = std::env::var("ETRIALS_THREADS") {
        if let Ok(n) = v.trim().parse::<usize>() {
            if n >= 1 {
                let _ = rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build_global();
            }
        }
    }
}

fn main() -> ExitCode {
    configure_threads();
    let raw: Vec<String> = std::env::args().collect();
    let expanded = match expand_config(raw) {
        Ok(a) => a,
        Err(msg) => {
            eprintln!("error: {msg}");
            return ExitCode::from(4);
        }
    };
    let cli = match Cli::try_parse_from(expanded) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 4,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let outcome = match &cli.command {
        Command::Validate(a) => run_validate(a),
        Command::Clean(a) => run_clean(a),
        Command::Balance(a) => run_balance(a),
        Command::SelectFeatures(a) => run_select_features(a),
        Command::Estimate(a) => run_estimate(a),
        Command::Simulate(a) => run_simulate(a),
        Command::Report(a) => run_report_cmd(a),
    };
    match outcome {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
