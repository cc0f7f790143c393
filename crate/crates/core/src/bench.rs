//! Replicated simulation benchmark: generate, tune, fit, score.

use std::io::Write;
use std::time::Instant;

use nalgebra::DVector;
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::inference::Algorithm;
use crate::model::{standardize, Hyperparameters};
use crate::rng;
use crate::simgen::{median, model_error, mrme, ols_slopes, selection_counts, Scenario, SimData};
use crate::solver::{fit, SolverConfig};
use crate::tuning::{cv_select_v1, CvConfig};

/// How `v1` is chosen for each replicate.
#[derive(Debug, Clone, PartialEq)]
pub enum V1Choice {
    Fixed(f64),
    /// K-fold CV on the replicate's data. The configured seed is ignored;
    /// each replicate draws its own fold seed from its stream.
    CrossValidated(CvConfig),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub scenario: Scenario,
    pub reps: usize,
    pub seed: u64,
    pub algorithms: Vec<Algorithm>,
    pub v1: V1Choice,
    pub hp: Hyperparameters,
    pub solver: SolverConfig,
}

/// One (replicate, algorithm) outcome. Metrics are computed on the
/// original scale from the sparse coefficients.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicateRow {
    pub replicate: usize,
    pub algorithm: &'static str,
    pub status: String,
    pub v1: f64,
    pub me: f64,
    pub me_ols: f64,
    pub correct: usize,
    pub incorrect: usize,
    pub selected: usize,
    pub exact_support: bool,
    /// Some truly negative coefficient is estimated negative.
    pub neg_sign: bool,
    pub linf_error: f64,
    pub converged: bool,
    pub iterations: usize,
    pub wall_ms: f64,
}

impl ReplicateRow {
    pub fn ok(&self) -> bool {
        self.status == "ok"
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub scenario: &'static str,
    pub algorithm: &'static str,
    pub reps_ok: usize,
    pub failures: usize,
    pub mrme: f64,
    pub mean_me: f64,
    pub median_me: f64,
    pub mean_correct: f64,
    pub mean_incorrect: f64,
    pub neg_sign_count: usize,
    pub exact_support_count: usize,
    pub mean_selected: f64,
    pub not_converged: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub replicates: Vec<ReplicateRow>,
    pub summary: Vec<SummaryRow>,
}

fn failed_row(replicate: usize, algorithm: Algorithm, err: &Error) -> ReplicateRow {
    ReplicateRow {
        replicate,
        algorithm: algorithm.tag(),
        status: format!("failed: {err}"),
        v1: f64::NAN,
        me: f64::NAN,
        me_ols: f64::NAN,
        correct: 0,
        incorrect: 0,
        selected: 0,
        exact_support: false,
        neg_sign: false,
        linf_error: f64::NAN,
        converged: false,
        iterations: 0,
        wall_ms: 0.0,
    }
}

fn score(
    replicate: usize,
    algorithm: Algorithm,
    sim: &SimData,
    me_ols: f64,
    cv_seed: u64,
    cfg: &BenchConfig,
) -> Result<ReplicateRow> {
    let start = Instant::now();
    let v1 = match &cfg.v1 {
        V1Choice::Fixed(v) => *v,
        V1Choice::CrossValidated(cv) => {
            let cv = CvConfig { seed: cv_seed, ..cv.clone() };
            cv_select_v1(&sim.data, &cfg.hp, &cv, algorithm, &cfg.solver)?.0
        }
    };
    let data = standardize(&sim.data)?;
    let result = fit(&data, &cfg.hp.with_v1(v1), algorithm, &cfg.solver.lean())?;
    let wall_ms = start.elapsed().as_secs_f64() * 1e3;

    let (_, beta_hat) = result.original_coefficients();
    let support = sim.support();
    let (correct, incorrect) = selection_counts(&result.selected, &support, sim.beta_star.len());
    let neg_sign = (0..beta_hat.len()).any(|j| sim.beta_star[j] < 0.0 && beta_hat[j] < 0.0);
    Ok(ReplicateRow {
        replicate,
        algorithm: algorithm.tag(),
        status: "ok".into(),
        v1,
        me: model_error(&beta_hat, &sim.beta_star, &sim.covariance, sim.sigma * sim.sigma),
        me_ols,
        correct,
        incorrect,
        selected: result.selected.len(),
        exact_support: result.selected == support,
        neg_sign,
        linf_error: (&beta_hat - &sim.beta_star).amax(),
        converged: result.converged,
        iterations: result.iterations,
        wall_ms,
    })
}

fn run_replicate(replicate: usize, cfg: &BenchConfig) -> Vec<ReplicateRow> {
    let mut rng = rng::stream(cfg.seed, replicate as u64);
    let sim = match cfg.scenario.generate(&mut rng) {
        Ok(sim) => sim,
        Err(e) => return cfg.algorithms.iter().map(|&a| failed_row(replicate, a, &e)).collect(),
    };
    let cv_seed: u64 = rng.random();
    let me_ols = if sim.data.p() + 1 < sim.data.n() {
        let ols: DVector<f64> = ols_slopes(&sim.data);
        model_error(&ols, &sim.beta_star, &sim.covariance, sim.sigma * sim.sigma)
    } else {
        f64::NAN
    };
    cfg.algorithms
        .iter()
        .map(|&a| score(replicate, a, &sim, me_ols, cv_seed, cfg).unwrap_or_else(|e| failed_row(replicate, a, &e)))
        .collect()
}

fn summarize(scenario: &'static str, algorithm: Algorithm, rows: &[ReplicateRow]) -> SummaryRow {
    let mine: Vec<&ReplicateRow> = rows.iter().filter(|r| r.algorithm == algorithm.tag()).collect();
    let ok: Vec<&ReplicateRow> = mine.iter().copied().filter(|r| r.ok()).collect();
    let k = ok.len();
    let mean = |f: &dyn Fn(&ReplicateRow) -> f64| {
        if k == 0 {
            f64::NAN
        } else {
            ok.iter().map(|r| f(r)).sum::<f64>() / k as f64
        }
    };
    let me: Vec<f64> = ok.iter().map(|r| r.me).collect();
    let me_ols: Vec<f64> = ok.iter().map(|r| r.me_ols).collect();
    let relative = if me_ols.iter().all(|m| m.is_finite()) {
        mrme(&me, &me_ols).unwrap_or(f64::NAN)
    } else {
        f64::NAN
    };
    SummaryRow {
        scenario,
        algorithm: algorithm.tag(),
        reps_ok: k,
        failures: mine.len() - k,
        mrme: relative,
        mean_me: mean(&|r| r.me),
        median_me: if k == 0 { f64::NAN } else { median(&me) },
        mean_correct: mean(&|r| r.correct as f64),
        mean_incorrect: mean(&|r| r.incorrect as f64),
        neg_sign_count: ok.iter().filter(|r| r.neg_sign).count(),
        exact_support_count: ok.iter().filter(|r| r.exact_support).count(),
        mean_selected: mean(&|r| r.selected as f64),
        not_converged: ok.iter().filter(|r| !r.converged).count(),
    }
}

/// Runs every replicate (in parallel on the current rayon pool) and
/// summarizes per algorithm. Rows are ordered by replicate, then algorithm.
pub fn run_bench(cfg: &BenchConfig) -> Result<BenchReport> {
    if cfg.reps == 0 {
        return Err(Error::InvalidInput("at least one replicate is required".into()));
    }
    if cfg.algorithms.is_empty() {
        return Err(Error::InvalidInput("no algorithms selected".into()));
    }
    cfg.hp.validate()?;
    if let V1Choice::CrossValidated(cv) = &cfg.v1 {
        cv.validate()?;
    }
    let replicates: Vec<ReplicateRow> = (0..cfg.reps)
        .into_par_iter()
        .map(|r| run_replicate(r, cfg))
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect();
    let summary = cfg
        .algorithms
        .iter()
        .map(|&a| summarize(cfg.scenario.name(), a, &replicates))
        .collect();
    Ok(BenchReport { replicates, summary })
}

pub fn write_csv<T: Serialize, W: Write>(rows: &[T], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}
