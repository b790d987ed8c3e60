//! Command-line surface: `fit`, `simulate`, `sweep` and `theory`.
//!
//! Every command reads an optional flat JSON config with kebab-case keys;
//! flags given on the command line override values from the file. Exit codes
//! are 0 on success, 2 for bad input and 3 for numerical failure.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mixture_em::Variant;
use crate::pipeline::{run_smoothem, PipelineConfig, PipelineError, PipelineFlags, PipelineResult, MIN_OBSERVATIONS};
use crate::simgen::{self, Dataset, Scenario, SimError, SpikeProcess, SweepRow, SweepSpec};
use crate::theory::{self, ConstantSet, GammaMode, TheoryError, TheoryRow};

/// Points in the dense curve written next to a fit.
pub const CURVE_POINTS: usize = 512;

/// Environment variable consulted when no seed flag is given.
pub const SEED_ENV: &str = "SMOOTHEM_SEED";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("numerical failure: {0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) | CliError::Io { .. } => 2,
            CliError::Numeric(_) => 3,
        }
    }

    fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io { path: path.to_path_buf(), source }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Smooth(_) | PipelineError::Spline(_) | PipelineError::Em(_) => {
                CliError::Numeric(e.to_string())
            }
            _ => CliError::Input(e.to_string()),
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Pipeline(p) => p.into(),
            SimError::LengthMismatch => CliError::Numeric(e.to_string()),
            _ => CliError::Input(e.to_string()),
        }
    }
}

impl From<TheoryError> for CliError {
    fn from(e: TheoryError) -> Self {
        CliError::Input(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "smoothem", version, about = "Smooth-curve estimation with spike detection")]
pub struct Cli {
    /// Worker threads; defaults to the number of available cores.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a CSV with `x,y` columns and write fit.csv, params.json and curve.csv.
    Fit(FitArgs),
    /// Generate a synthetic dataset with truth columns.
    Simulate(SimulateArgs),
    /// Run replicated simulations over a grid and write per-cell summaries.
    Sweep(SweepArgs),
    /// Write a table of convergence constants.
    Theory(TheoryArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    Equal,
    Inflated,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Equal => Variant::EqualVariance,
            VariantArg::Inflated => Variant::InflatedVariance,
        }
    }
}

/// Flags shared by commands that run the pipeline.
#[derive(Debug, Clone, Default, Args)]
pub struct PipelineFlagArgs {
    /// Comma-separated smoothing parameters, e.g. `1e-4,1e-2,1`.
    #[arg(long, value_delimiter = ',')]
    pub lambda_grid: Option<Vec<f64>>,
    #[arg(long, value_enum)]
    pub variant: Option<VariantArg>,
    /// Weight of the overfit score in the selection criterion.
    #[arg(long)]
    pub beta: Option<f64>,
}

impl PipelineFlagArgs {
    fn apply(&self, cfg: &mut PipelineConfig) {
        if let Some(g) = &self.lambda_grid {
            cfg.lambda_grid = g.clone();
        }
        if let Some(v) = self.variant {
            cfg.variant = v.into();
        }
        if let Some(b) = self.beta {
            cfg.overfit_weight = b;
        }
    }
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Input CSV with a header containing `x` and `y`.
    pub input: PathBuf,
    /// Output directory, created if missing.
    #[arg(short, long, default_value = ".")]
    pub out: PathBuf,
    /// Pipeline configuration as flat JSON.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub pipeline: PipelineFlagArgs,
    /// Seed for the overfit perturbation.
    #[arg(long, env = SEED_ENV)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Output CSV path.
    #[arg(short, long)]
    pub out: PathBuf,
    /// Scenario as flat JSON.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub stn: Option<f64>,
    #[arg(long)]
    pub alpha_star: Option<f64>,
    #[arg(long)]
    pub sigma_star: Option<f64>,
    /// Use clumped spikes with the default rate shape.
    #[arg(long)]
    pub clumped: bool,
    #[arg(long, env = SEED_ENV)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Output CSV path.
    #[arg(short, long)]
    pub out: PathBuf,
    /// Sweep specification as flat JSON.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Pipeline configuration as flat JSON.
    #[arg(long)]
    pub pipeline_config: Option<PathBuf>,
    #[command(flatten)]
    pub pipeline: PipelineFlagArgs,
    #[arg(long)]
    pub replicates: Option<usize>,
    #[arg(long, env = SEED_ENV)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TheoryArgs {
    /// Output CSV path.
    #[arg(short, long)]
    pub out: PathBuf,
    /// Grid specification as flat JSON.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

/// Grid for the `theory` command. The spike mean of each row is
/// `6 * stn * sigma*`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields, default)]
pub struct TheoryGrid {
    pub pairs: Vec<(f64, f64)>,
    pub one_minus_alphas: Vec<f64>,
    pub stn: f64,
    pub constant_set: ConstantSet,
    pub gamma_mode: GammaMode,
}

impl Default for TheoryGrid {
    fn default() -> Self {
        Self {
            pairs: theory::TABLE_PAIRS.to_vec(),
            one_minus_alphas: theory::TABLE_SPIKE_FRACTIONS.to_vec(),
            stn: 1.0,
            constant_set: ConstantSet::KnownAlpha,
            gamma_mode: GammaMode::Zero,
        }
    }
}

/// Fully resolved settings for a `fit` run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub input: PathBuf,
    pub out_dir: PathBuf,
    pub pipeline: PipelineConfig,
}

impl RunConfig {
    pub fn from_args(args: &FitArgs) -> Result<Self, CliError> {
        let mut pipeline: PipelineConfig = read_config(args.config.as_deref())?;
        args.pipeline.apply(&mut pipeline);
        if let Some(s) = args.seed {
            pipeline.perturbation_seed = s;
        }
        pipeline.validate()?;
        if !args.input.is_file() {
            return Err(CliError::Input(format!("{}: no such file", args.input.display())));
        }
        Ok(Self { input: args.input.clone(), out_dir: args.out.clone(), pipeline })
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(CliError::Input("--threads must be at least 1".into()));
        }
        builder = builder.num_threads(t);
    }
    let pool = builder.build().map_err(|e| CliError::Input(e.to_string()))?;
    pool.install(|| match cli.command {
        Command::Fit(a) => cmd_fit(&RunConfig::from_args(&a)?).map(|_| ()),
        Command::Simulate(a) => cmd_simulate(&a),
        Command::Sweep(a) => cmd_sweep(&a),
        Command::Theory(a) => cmd_theory(&a),
    })
}

fn read_config<C: DeserializeOwned + Default>(path: Option<&Path>) -> Result<C, CliError> {
    let Some(path) = path else {
        return Ok(C::default());
    };
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

/// Reads `x,y` columns from CSV text. Other columns are ignored.
pub fn parse_xy<R: std::io::Read>(reader: R) -> Result<(Vec<f64>, Vec<f64>), CliError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers().map_err(|e| CliError::Input(format!("line 1: {e}")))?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::Input(format!("line 1: header must contain an `{name}` column")))
    };
    let (ix, iy) = (col("x")?, col("y")?);
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            CliError::Input(format!("line {line}: {e}"))
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let field = |i: usize, name: &str| -> Result<f64, CliError> {
            let raw = rec.get(i).unwrap_or("");
            let v: f64 = raw
                .parse()
                .map_err(|_| CliError::Input(format!("line {line}: cannot parse {name} value `{raw}`")))?;
            if !v.is_finite() {
                return Err(CliError::Input(format!("line {line}: {name} value `{raw}` is not finite")));
            }
            Ok(v)
        };
        xs.push(field(ix, "x")?);
        ys.push(field(iy, "y")?);
    }
    if xs.len() < MIN_OBSERVATIONS {
        return Err(CliError::Input(format!(
            "need at least {MIN_OBSERVATIONS} observations, found {}",
            xs.len()
        )));
    }
    Ok((xs, ys))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct LambdaSummary {
    pub lambda: f64,
    pub loglik: f64,
    pub overfit: f64,
    pub criterion: f64,
    pub threshold: Option<f64>,
    pub spikes: usize,
    pub em_iterations: usize,
    pub collapsed: bool,
}

/// Contents of `params.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct ParamsReport {
    pub n: usize,
    pub lambda_star: f64,
    pub alpha: f64,
    pub mu: f64,
    pub sigma2: f64,
    pub sigma_h2: Option<f64>,
    pub variant: Variant,
    pub loglik: f64,
    pub spikes: usize,
    pub sigma_tau: f64,
    pub flags: PipelineFlags,
    pub per_lambda: Vec<LambdaSummary>,
}

impl ParamsReport {
    pub fn new(res: &PipelineResult<f64>) -> Self {
        let count = |l: &[bool]| l.iter().filter(|&&b| b).count();
        Self {
            n: res.labels.len(),
            lambda_star: res.lambda_star,
            alpha: res.params.alpha,
            mu: res.params.mu,
            sigma2: res.params.sigma2,
            sigma_h2: res.params.sigma_h2,
            variant: res.params.variant,
            loglik: res.star_row().loglik,
            spikes: count(&res.labels),
            sigma_tau: res.sigma_tau,
            flags: res.flags,
            per_lambda: res
                .per_lambda
                .iter()
                .map(|r| LambdaSummary {
                    lambda: r.lambda,
                    loglik: r.loglik,
                    overfit: r.overfit,
                    criterion: r.criterion,
                    threshold: r.threshold,
                    spikes: count(&r.labels),
                    em_iterations: r.em_iterations,
                    collapsed: r.collapsed,
                })
                .collect(),
        }
    }
}

/// Shortest text that parses back to the same float.
pub fn fmt_float(v: f64) -> String {
    format!("{v}")
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    let mut f = fs::File::create(path).map_err(|e| CliError::io(path, e))?;
    f.write_all(bytes).map_err(|e| CliError::io(path, e))
}

fn csv_bytes(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<Vec<u8>, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| CliError::Numeric(e.to_string());
    w.write_record(header).map_err(io)?;
    for r in rows {
        w.write_record(&r).map_err(io)?;
    }
    w.into_inner().map_err(|e| CliError::Numeric(e.to_string()))
}

/// Runs the pipeline on a CSV file and writes the three output files.
pub fn cmd_fit(cfg: &RunConfig) -> Result<PipelineResult<f64>, CliError> {
    let file = fs::File::open(&cfg.input).map_err(|e| CliError::io(&cfg.input, e))?;
    let (xs, ys) = parse_xy(file)?;
    let res = run_smoothem(&xs, &ys, &cfg.pipeline)?;
    create_dir(&cfg.out_dir)?;

    let fitted = &res.fit.fitted;
    let rows = (0..xs.len()).map(|i| {
        vec![
            fmt_float(xs[i]),
            fmt_float(ys[i]),
            fmt_float(fitted[i]),
            fmt_float(ys[i] - fitted[i]),
            u8::from(res.labels[i]).to_string(),
            fmt_float(res.posterior[i]),
        ]
    });
    let fit_csv = csv_bytes(&["x", "y", "fitted", "residual", "spike", "posterior"], rows)?;
    write_file(&cfg.out_dir.join("fit.csv"), &fit_csv)?;

    let grid = res.basis.grid(CURVE_POINTS);
    let curve = res.predict(&grid)?;
    let rows = grid.iter().zip(&curve).map(|(x, f)| vec![fmt_float(*x), fmt_float(*f)]);
    write_file(&cfg.out_dir.join("curve.csv"), &csv_bytes(&["x", "fitted"], rows)?)?;

    let json = serde_json::to_vec_pretty(&ParamsReport::new(&res)).map_err(|e| CliError::Numeric(e.to_string()))?;
    write_file(&cfg.out_dir.join("params.json"), &json)?;
    Ok(res)
}

/// Serializes a dataset with its truth columns.
pub fn dataset_csv(data: &Dataset) -> Result<Vec<u8>, CliError> {
    let rows = (0..data.xs.len()).map(|i| {
        vec![
            fmt_float(data.xs[i]),
            fmt_float(data.ys[i]),
            fmt_float(data.true_f[i]),
            u8::from(data.true_labels[i]).to_string(),
        ]
    });
    csv_bytes(&["x", "y", "f", "spike"], rows)
}

pub fn cmd_simulate(args: &SimulateArgs) -> Result<(), CliError> {
    let mut sc: Scenario = read_config(args.config.as_deref())?;
    if let Some(n) = args.n {
        sc.n = n;
    }
    if let Some(s) = args.stn {
        sc.stn = s;
    }
    if let Some(a) = args.alpha_star {
        sc.alpha_star = a;
    }
    if let Some(s) = args.sigma_star {
        sc.sigma_star = s;
    }
    if args.clumped {
        sc.spike_process = SpikeProcess::Nhpp(Default::default());
    }
    if let Some(s) = args.seed {
        sc.seed = s;
    }
    let data = simgen::generate(&sc)?;
    write_file(&args.out, &dataset_csv(&data)?)
}

pub const SWEEP_HEADER: [&str; 16] = [
    "n",
    "stn",
    "one_minus_alpha",
    "l2",
    "linf",
    "fnr",
    "fpr",
    "sse",
    "l2_sd",
    "linf_sd",
    "fnr_sd",
    "fpr_sd",
    "sse_sd",
    "completed",
    "failed",
    "partial",
];

pub fn sweep_csv(rows: &[SweepRow]) -> Result<Vec<u8>, CliError> {
    let f = fmt_float;
    let recs = rows.iter().map(|r| {
        vec![
            r.cell.n.to_string(),
            f(r.cell.stn),
            f(r.cell.one_minus_alpha),
            f(r.mean.l2),
            f(r.mean.linf),
            f(r.mean.fnr),
            f(r.mean.fpr),
            f(r.mean.sse),
            f(r.sd.l2),
            f(r.sd.linf),
            f(r.sd.fnr),
            f(r.sd.fpr),
            f(r.sd.sse),
            r.completed.to_string(),
            r.failed.to_string(),
            u8::from(r.partial).to_string(),
        ]
    });
    csv_bytes(&SWEEP_HEADER, recs)
}

pub fn cmd_sweep(args: &SweepArgs) -> Result<(), CliError> {
    let mut spec: SweepSpec = read_config(args.config.as_deref())?;
    let mut cfg: PipelineConfig = read_config(args.pipeline_config.as_deref())?;
    args.pipeline.apply(&mut cfg);
    if let Some(r) = args.replicates {
        spec.replicates = r;
    }
    if let Some(s) = args.seed {
        spec.master_seed = s;
    }
    let rows = simgen::sweep(&spec, &cfg)?;
    write_file(&args.out, &sweep_csv(&rows)?)
}

pub const THEORY_HEADER: [&str; 9] = ["sigma_star", "r", "one_minus_alpha", "nu", "L", "gamma", "cr", "k", "flag"];

pub fn theory_rows(grid: &TheoryGrid) -> Result<Vec<TheoryRow>, CliError> {
    let mut rows = Vec::new();
    for &(s, r) in &grid.pairs {
        for &p in &grid.one_minus_alphas {
            rows.push(theory::theory_row(s, r, p, 6.0 * grid.stn * s, grid.constant_set, grid.gamma_mode)?);
        }
    }
    Ok(rows)
}

pub fn theory_csv(rows: &[TheoryRow]) -> Result<Vec<u8>, CliError> {
    let f = fmt_float;
    let recs = rows.iter().map(|r| {
        vec![
            f(r.sigma_star),
            f(r.r),
            f(r.one_minus_alpha),
            f(r.nu),
            f(r.l),
            f(r.gamma),
            f(r.cr),
            r.k.map(|k| k.to_string()).unwrap_or_default(),
            r.flag.as_str().to_string(),
        ]
    });
    csv_bytes(&THEORY_HEADER, recs)
}

pub fn cmd_theory(args: &TheoryArgs) -> Result<(), CliError> {
    let grid: TheoryGrid = read_config(args.config.as_deref())?;
    write_file(&args.out, &theory_csv(&theory_rows(&grid)?)?)
}
