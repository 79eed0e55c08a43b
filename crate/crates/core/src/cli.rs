//! Batch front end: `fit`, `simulate` and `compare`.
//!
//! Exit codes: 0 success, 1 input or usage error (nothing written),
//! 2 a fit failed to converge, 3 `compare` found a difference above the
//! tolerance.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Map, Value};

use crate::data::{read_long_csv, write_long_csv_file, CsvSchema, Dataset};
use crate::error::Error;
use crate::gaussian::MvnMethod;
use crate::likelihood::{LogLikOptions, Method, Prepared};
use crate::model::{CovParam, ModelSpec, Template};
use crate::optimizer::{fit_model, Algorithm, FdMode, FitResult, OptConfig};
use crate::simulator::{calibrate_threshold, simulate, template_truth, Censoring, SimConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 1;
pub const EXIT_NOT_CONVERGED: i32 = 2;
pub const EXIT_DIFFERENCE: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "censlmm", version, about = "Linear mixed models for left-censored longitudinal data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Worker threads for likelihood evaluation; 0 uses every core.
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit one or more likelihoods to a long-format CSV file.
    Fit(FitArgs),
    /// Simulate a dataset from a model template.
    Simulate(SimulateArgs),
    /// Fit the marginal and quadrature likelihoods and compare the estimates.
    Compare(CompareArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModelArg {
    /// Random intercept.
    Ri,
    /// Random intercept and slope.
    Is,
    /// Bivariate intercept and slope, one residual variance per marker.
    Biv,
}

impl ModelArg {
    fn template(self) -> Template {
        match self {
            ModelArg::Ri => Template::RandomIntercept,
            ModelArg::Is => Template::InterceptSlope,
            ModelArg::Biv => Template::Bivariate,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum CovParamArg {
    Cholesky,
    Correlation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Naive,
    Marginal,
    Agq,
}

impl MethodArg {
    fn method(self) -> Method {
        match self {
            MethodArg::Naive => Method::Naive,
            MethodArg::Marginal => Method::Marginal,
            MethodArg::Agq => Method::Agq,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum AlgorithmArg {
    Marquardt,
    Bfgs,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FdArg {
    Forward,
    Central,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MvnMethodArg {
    Subregion,
    Lattice,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long, value_enum, default_value = "is")]
    pub model: ModelArg,
    #[arg(long, value_enum, default_value = "cholesky")]
    pub cov_param: CovParamArg,
}

impl ModelArgs {
    fn spec(&self, n_covariates: usize) -> crate::Result<ModelSpec> {
        let cp = match self.cov_param {
            CovParamArg::Cholesky => CovParam::Cholesky,
            CovParamArg::Correlation => CovParam::Correlation,
        };
        ModelSpec::template(self.model.template(), n_covariates, cp)
    }
}

#[derive(Debug, Args)]
pub struct InputArgs {
    /// Long-format CSV, one row per measurement.
    #[arg(long)]
    pub input: PathBuf,
    /// Extra covariate column entering the fixed design; repeatable.
    #[arg(long = "covariate")]
    pub covariates: Vec<String>,
    /// Detection limit for rows without a per-row limit.
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long, default_value = "id")]
    pub id_col: String,
    #[arg(long, default_value = "time")]
    pub time_col: String,
    #[arg(long, default_value = "y")]
    pub y_col: String,
    /// 1 = quantified, 0 = below the detection limit.
    #[arg(long, default_value = "obs")]
    pub obs_col: String,
    #[arg(long, default_value = "limit")]
    pub limit_col: String,
    #[arg(long, default_value = "marker")]
    pub marker_col: String,
}

impl InputArgs {
    fn schema(&self) -> CsvSchema {
        CsvSchema {
            id: self.id_col.clone(),
            time: self.time_col.clone(),
            response: self.y_col.clone(),
            obs: self.obs_col.clone(),
            limit: Some(self.limit_col.clone()),
            marker: Some(self.marker_col.clone()),
            covariates: self.covariates.clone(),
            global_threshold: self.threshold,
        }
    }
}

#[derive(Debug, Args)]
pub struct LikArgs {
    /// Starting quadrature order per random effect.
    #[arg(long, default_value_t = 10)]
    pub gh_order: usize,
    /// Order-doubling tolerance; 0 keeps --gh-order fixed.
    #[arg(long, default_value_t = 1e-6)]
    pub qtol: f64,
    /// Absolute accuracy of rectangle probabilities.
    #[arg(long, default_value_t = 1e-6)]
    pub mvn_tol: f64,
    /// Relative accuracy of rectangle probabilities; 0 disables it.
    #[arg(long, default_value_t = 1e-4)]
    pub mvn_rel_tol: f64,
    #[arg(long, default_value_t = 1_000_000)]
    pub mvn_max_evals: usize,
    #[arg(long, value_enum, default_value = "subregion")]
    pub mvn_method: MvnMethodArg,
    /// Seed of the randomized lattice rule.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl LikArgs {
    fn options(&self, method: Method) -> LogLikOptions {
        LogLikOptions {
            method,
            mvn_tol: self.mvn_tol,
            mvn_rel_tol: self.mvn_rel_tol,
            mvn_max_evals: self.mvn_max_evals,
            mvn_method: match self.mvn_method {
                MvnMethodArg::Subregion => MvnMethod::Subregion,
                MvnMethodArg::Lattice => MvnMethod::Lattice,
            },
            gh_order: self.gh_order,
            qtol: self.qtol,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Args)]
pub struct OptArgs {
    #[arg(long, value_enum, default_value = "bfgs")]
    pub algorithm: AlgorithmArg,
    #[arg(long, value_enum, default_value = "central")]
    pub fd: FdArg,
    /// Relative difference step; defaults to 1e-5 (central) or 1e-7 (forward).
    #[arg(long)]
    pub fd_step: Option<f64>,
    #[arg(long, default_value_t = 200)]
    pub max_iter: usize,
    #[arg(long, default_value_t = 1e-8)]
    pub f_tol: f64,
    #[arg(long, default_value_t = 1e-5)]
    pub g_tol: f64,
    /// Skip the observed-information standard errors.
    #[arg(long)]
    pub no_se: bool,
}

impl OptArgs {
    fn config(&self) -> OptConfig {
        let algorithm = match self.algorithm {
            AlgorithmArg::Marquardt => Algorithm::Marquardt,
            AlgorithmArg::Bfgs => Algorithm::QuasiNewton,
        };
        let mut cfg = OptConfig::with_algorithm(algorithm).with_fd(match self.fd {
            FdArg::Forward => FdMode::Forward,
            FdArg::Central => FdMode::Central,
        });
        if let Some(step) = self.fd_step {
            cfg.fd_step = step;
        }
        cfg.max_iter = self.max_iter;
        cfg.f_tol = self.f_tol;
        cfg.g_tol = self.g_tol;
        cfg.compute_se = !self.no_se;
        cfg
    }
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Likelihood to maximize; repeatable. Default: all three.
    #[arg(long = "method", value_enum)]
    pub methods: Vec<MethodArg>,
    #[command(flatten)]
    pub lik: LikArgs,
    #[command(flatten)]
    pub opt: OptArgs,
    /// JSON Lines report, one flat record per method.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 50)]
    pub n_subjects: usize,
    #[arg(long, default_value_t = 5)]
    pub n_per_subject: usize,
    /// Fixed detection limit; overrides --target-censoring.
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Expected fraction of censored rows; 0 disables censoring.
    #[arg(long, default_value_t = 0.152)]
    pub target_censoring: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// CSV file to write.
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub lik: LikArgs,
    #[command(flatten)]
    pub opt: OptArgs,
    /// Largest acceptable absolute difference per parameter.
    #[arg(long, default_value_t = 0.01)]
    pub tolerance: f64,
    #[arg(long)]
    pub output: Option<PathBuf>,
}

/// Parses `args` and runs the command, returning the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => run(cli),
        Err(e) => {
            let _ = e.print();
            if e.use_stderr() {
                EXIT_INPUT
            } else {
                EXIT_OK
            }
        }
    }
}

pub fn run(cli: Cli) -> i32 {
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start thread pool: {e}");
            return EXIT_INPUT;
        }
    };
    pool.install(|| match &cli.command {
        Command::Fit(a) => run_fit(a),
        Command::Simulate(a) => run_simulate(a),
        Command::Compare(a) => run_compare(a),
    })
}

fn input_error(e: impl std::fmt::Display) -> i32 {
    eprintln!("error: {e}");
    EXIT_INPUT
}

/// Reads the data and checks it against the model before any fitting.
fn load(input: &InputArgs, model: &ModelArgs) -> Result<(Dataset, ModelSpec), String> {
    let d = read_long_csv(&input.input, &input.schema())
        .map_err(|e| format!("{}: {e}", input.input.display()))?;
    let spec = model.spec(input.covariates.len()).map_err(|e| e.to_string())?;
    Prepared::new(&d, &spec).map_err(|e| e.to_string())?;
    Ok((d, spec))
}

fn write_records(path: &PathBuf, records: &[Map<String, Value>]) -> std::io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        writeln!(w)?;
    }
    w.flush()
}

fn fit_record(d: &Dataset, r: &FitResult) -> Map<String, Value> {
    let mut m = Map::new();
    m.insert("record".into(), json!("fit"));
    m.insert("method".into(), json!(r.method.name()));
    m.insert("algorithm".into(), json!(r.algorithm.name()));
    m.insert("converged".into(), json!(r.converged));
    m.insert("loglik".into(), json!(r.loglik));
    m.insert("iterations".into(), json!(r.iterations));
    m.insert("gradient_norm".into(), json!(r.gradient_norm));
    m.insert("hessian_ok".into(), json!(r.hessian_ok));
    m.insert("evaluations".into(), json!(r.evaluations));
    m.insert("gh_order".into(), json!(r.gh_order));
    m.insert("message".into(), json!(r.message));
    m.insert("n_subjects".into(), json!(d.subjects().len()));
    m.insert("n_rows".into(), json!(d.n_rows()));
    m.insert("censored_fraction".into(), json!(d.censored_fraction()));
    for (i, name) in r.names.iter().enumerate() {
        m.insert(format!("est_{name}"), json!(r.estimates[i]));
    }
    for (i, name) in r.names.iter().enumerate() {
        m.insert(format!("se_{name}"), json!(r.se.as_ref().map(|s| s[i])));
    }
    m
}

fn print_table(fits: &[FitResult]) {
    let Some(first) = fits.first() else { return };
    let width = first.names.iter().map(|n| n.len()).max().unwrap_or(8).max(9);
    print!("{:<10}", "method");
    for n in &first.names {
        print!(" {n:>width$}");
    }
    println!(" {:>12} {:>5} {:>8}", "loglik", "conv", "seconds");
    for r in fits {
        print!("{:<10}", r.method.name());
        for v in &r.estimates {
            print!(" {v:>width$.4}");
        }
        println!(
            " {:>12.4} {:>5} {:>8.2}",
            r.loglik,
            if r.converged { "yes" } else { "no" },
            r.elapsed.as_secs_f64()
        );
        if let Some(se) = &r.se {
            print!("{:<10}", "");
            for v in se {
                let s = format!("({v:.4})");
                print!(" {s:>width$}");
            }
            println!();
        }
    }
}

fn fit_all(d: &Dataset, spec: &ModelSpec, methods: &[Method], lik: &LikArgs, cfg: &OptConfig) -> Result<Vec<FitResult>, Error> {
    methods
        .iter()
        .map(|&m| fit_model(d, spec, &lik.options(m), cfg))
        .collect()
}

fn run_fit(a: &FitArgs) -> i32 {
    let (d, spec) = match load(&a.input, &a.model) {
        Ok(v) => v,
        Err(e) => return input_error(e),
    };
    let mut methods: Vec<Method> = Vec::new();
    let requested = if a.methods.is_empty() {
        vec![MethodArg::Naive, MethodArg::Marginal, MethodArg::Agq]
    } else {
        a.methods.clone()
    };
    for m in requested {
        if !methods.contains(&m.method()) {
            methods.push(m.method());
        }
    }
    let fits = match fit_all(&d, &spec, &methods, &a.lik, &a.opt.config()) {
        Ok(f) => f,
        Err(e) => {
            eprintln!("error: fit failed: {e}");
            return EXIT_NOT_CONVERGED;
        }
    };
    print_table(&fits);
    if let Some(path) = &a.output {
        let records: Vec<_> = fits.iter().map(|r| fit_record(&d, r)).collect();
        if let Err(e) = write_records(path, &records) {
            return input_error(format!("cannot write {}: {e}", path.display()));
        }
    }
    if fits.iter().all(|r| r.converged) {
        EXIT_OK
    } else {
        eprintln!("warning: at least one fit did not converge");
        EXIT_NOT_CONVERGED
    }
}

fn run_simulate(a: &SimulateArgs) -> i32 {
    let spec = match a.model.spec(0) {
        Ok(s) => s,
        Err(e) => return input_error(e),
    };
    let truth = match template_truth(a.model.model.template(), spec.cov_param) {
        Ok(t) => t,
        Err(e) => return input_error(e),
    };
    if a.n_subjects == 0 || a.n_per_subject == 0 {
        return input_error("--n-subjects and --n-per-subject must be positive");
    }
    let mut cfg = SimConfig::new(a.n_subjects, a.n_per_subject, spec, truth);
    cfg.seed = a.seed;
    let threshold = match a.threshold {
        Some(c) => Some(c),
        None if a.target_censoring == 0.0 => None,
        None => match calibrate_threshold(&cfg.truth, &cfg.spec, &cfg.times, a.target_censoring) {
            Ok(c) => Some(c),
            Err(e) => return input_error(e),
        },
    };
    cfg.censoring = threshold.map_or(Censoring::None, Censoring::Threshold);
    let d = match simulate(&cfg) {
        Ok(d) => d,
        Err(e) => return input_error(e),
    };
    if let Err(e) = write_long_csv_file(&d, &a.output) {
        return input_error(format!("cannot write {}: {e}", a.output.display()));
    }
    println!(
        "wrote {} rows for {} subjects to {}",
        d.n_rows(),
        d.subjects().len(),
        a.output.display()
    );
    match threshold {
        Some(c) => println!("detection limit {c:.6}, censored fraction {:.4}", d.censored_fraction()),
        None => println!("no censoring, censored fraction {:.4}", d.censored_fraction()),
    }
    EXIT_OK
}

fn run_compare(a: &CompareArgs) -> i32 {
    let (d, spec) = match load(&a.input, &a.model) {
        Ok(v) => v,
        Err(e) => return input_error(e),
    };
    let fits = match fit_all(&d, &spec, &[Method::Marginal, Method::Agq], &a.lik, &a.opt.config()) {
        Ok(f) => f,
        Err(e) => {
            eprintln!("error: fit failed: {e}");
            return EXIT_NOT_CONVERGED;
        }
    };
    print_table(&fits);
    let (marg, agq) = (&fits[0], &fits[1]);
    let diffs: Vec<f64> = marg
        .estimates
        .iter()
        .zip(&agq.estimates)
        .map(|(x, y)| (x - y).abs())
        .collect();
    let max_diff = diffs.iter().copied().fold(0.0, f64::max);
    let within = max_diff <= a.tolerance;
    println!(
        "max |marginal - agq| = {max_diff:.3e} (tolerance {}), loglik difference {:.3e}",
        a.tolerance,
        marg.loglik - agq.loglik
    );
    if !within {
        let worst = diffs
            .iter()
            .enumerate()
            .max_by(|x, y| x.1.total_cmp(y.1))
            .map(|(i, _)| marg.names[i].as_str())
            .unwrap_or("");
        println!("estimates disagree beyond the tolerance; largest gap in {worst}");
    }
    if let Some(path) = &a.output {
        let mut records: Vec<_> = fits.iter().map(|r| fit_record(&d, r)).collect();
        let mut m = Map::new();
        m.insert("record".into(), json!("comparison"));
        m.insert("tolerance".into(), json!(a.tolerance));
        m.insert("max_abs_diff".into(), json!(max_diff));
        m.insert("within_tolerance".into(), json!(within));
        m.insert("loglik_marginal".into(), json!(marg.loglik));
        m.insert("loglik_agq".into(), json!(agq.loglik));
        for (name, v) in marg.names.iter().zip(&diffs) {
            m.insert(format!("diff_{name}"), json!(v));
        }
        records.push(m);
        if let Err(e) = write_records(path, &records) {
            return input_error(format!("cannot write {}: {e}", path.display()));
        }
    }
    if !fits.iter().all(|r| r.converged) {
        EXIT_NOT_CONVERGED
    } else if within {
        EXIT_OK
    } else {
        EXIT_DIFFERENCE
    }
}
