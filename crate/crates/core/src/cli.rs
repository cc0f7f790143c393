//! Command-line front end: `fit`, `cv`, `bench` and `consistency`.
//!
//! Exit codes: 0 success, 1 input or runtime error, 2 fit written but not
//! converged, 64 usage error.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::batch::{BatchConfig, WoodburyMode};
use crate::bench::{run_bench, write_csv, BenchConfig, V1Choice};
use crate::componentwise::{ComponentwiseConfig, Sigma2Denominator};
use crate::consistency::{
    bayes_records, bayesian_consistency_experiment, gap_experiment, gap_records, orthogonal_experiment, write_records,
    BayesConfig, GapConfig, V1Rule,
};
use crate::error::{Error, Result};
use crate::inference::Algorithm;
use crate::model::{standardize, AnPolicy, Hyperparameters, RawDataset};
use crate::simgen::{Example3Noise, Scenario};
use crate::solver::{fit, SolverConfig};
use crate::tuning::{cv_select_v1, default_grid, CvConfig, Scoring};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 1;
pub const EXIT_NOT_CONVERGED: i32 = 2;
pub const EXIT_USAGE: i32 = 64;

#[derive(Debug, Parser)]
#[command(name = "ssvb", version, about = "Spike-and-slab variational Bayes for sparse linear regression")]
pub struct Cli {
    /// Worker threads for parallel work (default: logical cores).
    #[arg(long, global = true, env = "SSVB_THREADS", value_parser = clap::value_parser!(u16).range(1..))]
    pub threads: Option<u16>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit one model to a CSV file and write the result as JSON.
    Fit(FitArgs),
    /// Choose v1 by K-fold cross-validation and write the score table.
    Cv(CvArgs),
    /// Run a replicated simulation benchmark.
    Bench(BenchArgs),
    /// Run a large-sample behaviour experiment.
    Consistency(ConsistencyArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum AlgorithmArg {
    Alg1,
    Alg2,
}

impl From<AlgorithmArg> for Algorithm {
    fn from(a: AlgorithmArg) -> Self {
        match a {
            AlgorithmArg::Alg1 => Algorithm::Componentwise,
            AlgorithmArg::Alg2 => Algorithm::Batch,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum AnPolicyArg {
    MinNonzeroEigen,
    FixedN,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum WoodburyArg {
    Auto,
    Always,
    Never,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum DenominatorArg {
    Product,
    Sum,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ScoringArg {
    Sparse,
    TwoStage,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ScenarioArg {
    Example1,
    Example2,
    Example3a,
    Example3b,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum NoiseArg {
    Variance3,
    Sd3,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ExperimentArg {
    Gap,
    Bayes,
    Orthogonal,
}

fn positive(s: &str) -> std::result::Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("`{s}` is not a number"))?;
    if v.is_finite() && v > 0.0 {
        Ok(v)
    } else {
        Err(format!("must be positive, got {v}"))
    }
}

fn truncation(s: &str) -> std::result::Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("`{s}` is not a number"))?;
    if v > 0.0 && v < 0.5 {
        Ok(v)
    } else {
        Err(format!("must lie in (0, 0.5), got {v}"))
    }
}

/// Prior and solver settings shared by every fitting command.
#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    #[arg(long, default_value = "1", value_parser = positive)]
    pub nu: f64,
    #[arg(long, default_value = "1", value_parser = positive)]
    pub lambda: f64,
    #[arg(long, default_value = "1", value_parser = positive)]
    pub a0: f64,
    #[arg(long, default_value = "1", value_parser = positive)]
    pub b0: f64,
    /// Inclusion probabilities are truncated to [c, 1 - c].
    #[arg(long, default_value = "0.001", value_parser = truncation)]
    pub c: f64,
    #[arg(long, value_enum, default_value = "min-nonzero-eigen")]
    pub an_policy: AnPolicyArg,
    /// Explicit slab variance correction; overrides --an-policy.
    #[arg(long, value_parser = positive)]
    pub a_n: Option<f64>,
    /// Iteration cap (sweeps for alg1).
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    pub max_iters: Option<u32>,
    /// Convergence threshold on the largest Bernoulli entropy change.
    #[arg(long, value_parser = positive)]
    pub tol: Option<f64>,
    #[arg(long, value_enum, default_value = "auto")]
    pub woodbury: WoodburyArg,
    /// Denominator of the noise variance update (default: sum for alg1,
    /// product for alg2).
    #[arg(long, value_enum)]
    pub sigma2_denominator: Option<DenominatorArg>,
}

impl ModelArgs {
    fn hyperparameters(&self, v1: f64) -> Hyperparameters {
        Hyperparameters {
            v1,
            nu: self.nu,
            lambda: self.lambda,
            a0: self.a0,
            b0: self.b0,
            c: self.c,
            an_policy: match (self.a_n, self.an_policy) {
                (Some(a), _) => AnPolicy::Explicit(a),
                (None, AnPolicyArg::MinNonzeroEigen) => AnPolicy::MinNonzeroEigen,
                (None, AnPolicyArg::FixedN) => AnPolicy::FixedN,
            },
        }
    }

    fn solver(&self) -> SolverConfig {
        let mut componentwise = ComponentwiseConfig::default();
        let mut batch = BatchConfig {
            woodbury: match self.woodbury {
                WoodburyArg::Auto => WoodburyMode::Auto,
                WoodburyArg::Always => WoodburyMode::Always,
                WoodburyArg::Never => WoodburyMode::Never,
            },
            ..Default::default()
        };
        if let Some(d) = self.sigma2_denominator {
            let d = match d {
                DenominatorArg::Product => Sigma2Denominator::Product,
                DenominatorArg::Sum => Sigma2Denominator::Sum,
            };
            componentwise.sigma2_denominator = d;
            batch.sigma2_denominator = d;
        }
        if let Some(m) = self.max_iters {
            componentwise.max_sweeps = m as usize;
            batch.max_iters = m as usize;
        }
        if let Some(t) = self.tol {
            componentwise.entropy_tol = t;
            batch.entropy_tol = t;
        }
        SolverConfig { componentwise, batch }
    }
}

#[derive(Debug, Clone, Args)]
pub struct CvGridArgs {
    #[arg(long, default_value = "5", value_parser = clap::value_parser!(u32).range(2..))]
    pub folds: u32,
    /// Comma-separated v1 values (default: 9 log-spaced points on [0.01, 100]).
    #[arg(long, value_delimiter = ',', value_parser = positive)]
    pub grid: Vec<f64>,
    #[arg(long, value_enum, default_value = "sparse")]
    pub scoring: ScoringArg,
}

impl CvGridArgs {
    fn config(&self, seed: u64) -> CvConfig {
        CvConfig {
            folds: self.folds as usize,
            v1_grid: if self.grid.is_empty() { default_grid() } else { self.grid.clone() },
            scoring: match self.scoring {
                ScoringArg::Sparse => Scoring::Sparse,
                ScoringArg::TwoStage => Scoring::TwoStage,
            },
            seed,
        }
    }
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_enum, default_value = "alg2")]
    pub algorithm: AlgorithmArg,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, default_value = "1", value_parser = positive, allow_negative_numbers = true)]
    pub v1: f64,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Args)]
pub struct CvArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_enum, default_value = "alg2")]
    pub algorithm: AlgorithmArg,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, default_value = "0")]
    pub seed: u64,
    #[command(flatten)]
    pub grid: CvGridArgs,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, value_enum)]
    pub scenario: ScenarioArg,
    /// Sample size for example1 (default 60) and example2 (default 100).
    #[arg(long, value_parser = clap::value_parser!(u32).range(2..))]
    pub n: Option<u32>,
    /// Noise standard deviation for example1.
    #[arg(long, default_value = "1", value_parser = positive)]
    pub sigma: f64,
    /// Noise scale for example3a.
    #[arg(long, value_enum, default_value = "variance3")]
    pub noise: NoiseArg,
    #[arg(long, default_value = "100", value_parser = clap::value_parser!(u32).range(1..))]
    pub reps: u32,
    #[arg(long, default_value = "0")]
    pub seed: u64,
    /// Fixed v1; cross-validation is used when omitted.
    #[arg(long, value_parser = positive, allow_negative_numbers = true)]
    pub v1: Option<f64>,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "alg1,alg2")]
    pub algorithms: Vec<AlgorithmArg>,
    #[arg(long)]
    pub out_replicates: PathBuf,
    #[arg(long)]
    pub out_summary: PathBuf,
    #[command(flatten)]
    pub grid: CvGridArgs,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Args)]
pub struct ConsistencyArgs {
    #[arg(long, value_enum)]
    pub experiment: ExperimentArg,
    #[arg(long, default_value = "100", value_parser = clap::value_parser!(u32).range(1..))]
    pub reps: u32,
    #[arg(long, default_value = "0")]
    pub seed: u64,
    /// Comma-separated sample sizes (defaults depend on the experiment).
    #[arg(long, value_delimiter = ',')]
    pub n_grid: Vec<usize>,
    #[arg(long)]
    pub output: PathBuf,
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let pool = match rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads.map_or(0, usize::from))
        .build()
    {
        Ok(pool) => pool,
        Err(e) => {
            eprintln!("error: cannot start worker pool: {e}");
            return EXIT_INPUT;
        }
    };
    let outcome = pool.install(|| match &cli.command {
        Command::Fit(a) => cmd_fit(a),
        Command::Cv(a) => cmd_cv(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Consistency(a) => cmd_consistency(a),
    });
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_INPUT
        }
    }
}

/// Writes to a sibling temporary file and renames it into place, so a failed
/// command never leaves a partial output.
fn write_atomically(path: &Path, body: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = PathBuf::from(tmp);
    let result = (|| {
        let mut w = BufWriter::new(File::create(&tmp)?);
        body(&mut w)?;
        w.flush()?;
        Ok(())
    })();
    match result {
        Ok(()) => Ok(std::fs::rename(&tmp, path)?),
        Err(e) => {
            let _ = std::fs::remove_file(&tmp);
            Err(e)
        }
    }
}

fn read_input(path: &Path) -> Result<RawDataset> {
    RawDataset::from_csv_path(path).map_err(|e| {
        let detail = match e {
            Error::InvalidInput(m) => m,
            other => other.to_string(),
        };
        Error::InvalidInput(format!("{}: {detail}", path.display()))
    })
}

fn cmd_fit(a: &FitArgs) -> Result<i32> {
    let raw = read_input(&a.input)?;
    let data = standardize(&raw)?;
    let hp = a.model.hyperparameters(a.v1);
    hp.validate()?;
    let result = fit(&data, &hp, a.algorithm.into(), &a.model.solver())?;
    write_atomically(&a.output, |w| {
        serde_json::to_writer_pretty(&mut *w, &result.to_json())?;
        writeln!(w)?;
        Ok(())
    })?;
    if result.converged {
        Ok(EXIT_OK)
    } else {
        eprintln!("warning: not converged after {} iterations", result.iterations);
        Ok(EXIT_NOT_CONVERGED)
    }
}

fn cmd_cv(a: &CvArgs) -> Result<i32> {
    let raw = read_input(&a.input)?;
    let hp = a.model.hyperparameters(1.0);
    let cfg = a.grid.config(a.seed);
    let (best, table) = cv_select_v1(&raw, &hp, &cfg, a.algorithm.into(), &a.model.solver())?;
    write_atomically(&a.output, |w| table.write_csv(w))?;
    println!("selected v1 = {best}");
    Ok(EXIT_OK)
}

fn cmd_bench(a: &BenchArgs) -> Result<i32> {
    let scenario = match a.scenario {
        ScenarioArg::Example1 => Scenario::Example1 { n: a.n.map_or(60, |n| n as usize), sigma: a.sigma },
        ScenarioArg::Example2 => Scenario::Example2 { n: a.n.map_or(100, |n| n as usize) },
        ScenarioArg::Example3a => Scenario::Example3a {
            noise: match a.noise {
                NoiseArg::Variance3 => Example3Noise::Variance3,
                NoiseArg::Sd3 => Example3Noise::Sd3,
            },
        },
        ScenarioArg::Example3b => Scenario::Example3b,
    };
    if a.n.is_some() && matches!(a.scenario, ScenarioArg::Example3a | ScenarioArg::Example3b) {
        return Err(Error::InvalidInput("--n is fixed at 100 for the p = 1000 scenarios".into()));
    }
    let mut algorithms: Vec<Algorithm> = a.algorithms.iter().map(|&x| x.into()).collect();
    algorithms.dedup();
    let cfg = BenchConfig {
        scenario,
        reps: a.reps as usize,
        seed: a.seed,
        algorithms,
        v1: match a.v1 {
            Some(v) => V1Choice::Fixed(v),
            None => V1Choice::CrossValidated(a.grid.config(0)),
        },
        hp: a.model.hyperparameters(1.0),
        solver: a.model.solver(),
    };
    let report = run_bench(&cfg)?;
    write_atomically(&a.out_replicates, |w| write_csv(&report.replicates, w))?;
    write_atomically(&a.out_summary, |w| write_csv(&report.summary, w))?;
    for s in &report.summary {
        if s.failures > 0 {
            eprintln!("warning: {} replicate(s) of {} failed", s.failures, s.algorithm);
        }
    }
    Ok(EXIT_OK)
}

fn cmd_consistency(a: &ConsistencyArgs) -> Result<i32> {
    let reps = a.reps as usize;
    let records = match a.experiment {
        ExperimentArg::Gap => {
            let mut cfg = GapConfig { reps, seed: a.seed, ..Default::default() };
            if !a.n_grid.is_empty() {
                cfg.n_grid = a.n_grid.clone();
            }
            gap_records(&gap_experiment(&cfg)?)
        }
        ExperimentArg::Bayes => {
            let mut cfg = BayesConfig { reps, seed: a.seed, v1: V1Rule::Power(1.0), ..Default::default() };
            if !a.n_grid.is_empty() {
                cfg.n_grid = a.n_grid.clone();
            }
            bayes_records(&bayesian_consistency_experiment(&cfg)?)
        }
        ExperimentArg::Orthogonal => orthogonal_experiment(reps, a.seed)?,
    };
    write_atomically(&a.output, |w| write_records(&records, w))?;
    Ok(EXIT_OK)
}
