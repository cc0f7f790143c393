//! Executable checks of the large-sample behaviour of the batch solver:
//! the one-step closed form on orthogonal designs, the logit gap between
//! signal and noise features, and concentration of the variational model
//! probability on the true model.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::batch::{BatchConfig, BatchSolver, WoodburyMode};
use crate::error::{Error, Result};
use crate::inference::{model_probability, model_probability_lower_bound, Algorithm, ModelIndex};
use crate::model::{standardize, AnPolicy, Hyperparameters, RawDataset, StandardizedDataset};
use crate::rng;
use crate::simgen::{gen_example1, median};
use crate::solver::{fit, SolverConfig};

/// Agreement tolerance between solver and closed-form logits, relative to
/// `max(1, |logit|)`.
pub const ONE_STEP_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct OrthogonalProbe {
    pub n: usize,
    pub p: usize,
    pub beta_star: DVector<f64>,
    pub sigma: f64,
    pub v1: f64,
}

impl OrthogonalProbe {
    pub fn validate(&self) -> Result<()> {
        if self.p == 0 || self.p >= self.n || self.beta_star.len() != self.p {
            return Err(Error::InvalidInput("probe needs 1 <= p < n and |beta| = p".into()));
        }
        if !(self.sigma > 0.0 && self.v1 > 0.0) {
            return Err(Error::InvalidInput("probe sigma and v1 must be positive".into()));
        }
        Ok(())
    }
}

/// Centered `n × p` design with `XᵀX = nI`.
pub fn orthogonal_design<R: Rng + ?Sized>(n: usize, p: usize, rng: &mut R) -> DMatrix<f64> {
    let mut a = DMatrix::from_fn(n, p, |_, _| -> f64 { StandardNormal.sample(rng) });
    for mut col in a.column_iter_mut() {
        let m = col.mean();
        col.add_scalar_mut(-m);
    }
    a.qr().q() * (n as f64).sqrt()
}

/// `2·logit φ_j = -log(v1 n + 1) + (n β̂_j² / σ²) · n / (n + 1/v1)` with `β̂`
/// the OLS estimate, for a design with `XᵀX = nI`.
pub fn closed_form_logits(data: &StandardizedDataset, sigma2: f64, v1: f64) -> DVector<f64> {
    let n = data.n() as f64;
    let ols = data.x.tr_mul(&data.y) / n;
    ols.map(|b| 0.5 * (-(v1 * n + 1.0).ln() + (n * b * b / sigma2) * n / (n + 1.0 / v1)))
}

/// Logits after one batch iteration with `θ = 1/2`, `σ̂² = sigma2` pinned and
/// `a_n = n`.
pub fn solver_one_step_logits(data: &StandardizedDataset, sigma2: f64, v1: f64) -> Result<DVector<f64>> {
    let hp = Hyperparameters {
        an_policy: AnPolicy::FixedN,
        ..Hyperparameters::default().with_v1(v1)
    };
    let cfg = BatchConfig {
        max_iters: 1,
        woodbury: WoodburyMode::Never,
        pin_sigma2: true,
        initial_sigma2: sigma2,
        record_elbo: false,
        ..Default::default()
    };
    let mut solver = BatchSolver::new(data, &hp, &cfg)?;
    Ok(solver.step()?.logits)
}

/// Compares solver and closed-form logits on already-built data.
pub fn check_one_step(data: &StandardizedDataset, sigma2: f64, v1: f64) -> Result<DVector<f64>> {
    let closed = closed_form_logits(data, sigma2, v1);
    let solver = solver_one_step_logits(data, sigma2, v1)?;
    let mut worst = 0.0f64;
    for (a, b) in closed.iter().zip(solver.iter()) {
        worst = worst.max((a - b).abs() / a.abs().max(1.0));
    }
    if !(worst <= ONE_STEP_TOL) {
        return Err(Error::MismatchBeyondTolerance { max_abs_diff: worst });
    }
    Ok(closed)
}

/// Draws an orthogonal design and response for `probe` and returns the
/// closed-form one-step logits after checking them against the solver.
pub fn one_step_logits(probe: &OrthogonalProbe, seed: u64) -> Result<DVector<f64>> {
    probe.validate()?;
    let mut rng = rng::stream(seed, 0);
    let x = orthogonal_design(probe.n, probe.p, &mut rng);
    let noise = DVector::from_fn(probe.n, |_, _| -> f64 { StandardNormal.sample(&mut rng) });
    let y = &x * &probe.beta_star + noise * probe.sigma;
    let y = y.add_scalar(-y.mean());
    let data = StandardizedDataset::from_standardized(y, x)?;
    check_one_step(&data, probe.sigma * probe.sigma, probe.v1)
}

/// Random probe: `20 ≤ n < 200`, `1 ≤ p < min(n, 30)`, about 40% non-zero
/// coefficients in `[-3, 3]`, `σ ∈ [0.2, 3]`, `log10 v1 ∈ [-2, 2]`.
pub fn random_probe<R: Rng + ?Sized>(rng: &mut R) -> OrthogonalProbe {
    let n = rng.random_range(20..200);
    let p = rng.random_range(1..n.min(30));
    let beta_star = DVector::from_fn(p, |_, _| {
        if rng.random_bool(0.4) {
            rng.random_range(-3.0..3.0)
        } else {
            0.0
        }
    });
    OrthogonalProbe {
        n,
        p,
        beta_star,
        sigma: rng.random_range(0.2..3.0),
        v1: 10f64.powf(rng.random_range(-2.0..2.0)),
    }
}

/// Runs `reps` random probes and reports, per probe, the largest relative
/// deviation between solver and closed-form logits.
pub fn orthogonal_experiment(reps: usize, seed: u64) -> Result<Vec<TrendRecord>> {
    (0..reps)
        .into_par_iter()
        .map(|r| {
            let probe = random_probe(&mut rng::stream(seed, r as u64));
            probe.validate()?;
            let mut g = rng::stream(seed ^ 0x5eed, r as u64);
            let x = orthogonal_design(probe.n, probe.p, &mut g);
            let noise = DVector::from_fn(probe.n, |_, _| -> f64 { StandardNormal.sample(&mut g) });
            let y = &x * &probe.beta_star + noise * probe.sigma;
            let y = y.add_scalar(-y.mean());
            let data = StandardizedDataset::from_standardized(y, x)?;
            let sigma2 = probe.sigma * probe.sigma;
            let closed = closed_form_logits(&data, sigma2, probe.v1);
            let solver = solver_one_step_logits(&data, sigma2, probe.v1)?;
            let worst = closed
                .iter()
                .zip(solver.iter())
                .map(|(a, b)| (a - b).abs() / a.abs().max(1.0))
                .fold(0.0, f64::max);
            Ok(TrendRecord {
                n: probe.n,
                p: probe.p,
                v1: probe.v1,
                metric: "max_rel_diff".into(),
                value: worst,
            })
        })
        .collect()
}

/// One long-format output record.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrendRecord {
    pub n: usize,
    pub p: usize,
    pub v1: f64,
    pub metric: String,
    pub value: f64,
}

pub fn write_records<W: Write>(records: &[TrendRecord], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// `v1` as a function of `n`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum V1Rule {
    Fixed(f64),
    /// `v1 = n^k`.
    Power(f64),
}

impl V1Rule {
    pub fn at(self, n: usize) -> f64 {
        match self {
            Self::Fixed(v) => v,
            Self::Power(k) => (n as f64).powf(k),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GapConfig {
    pub n_grid: Vec<usize>,
    pub p: usize,
    pub n_signal: usize,
    pub beta_min: f64,
    pub sigma: f64,
    pub v1: V1Rule,
    /// Gap constant `C`: failures are noise logits above `-C/2` and signal
    /// logits below `C/2`.
    pub gap: f64,
    pub reps: usize,
    pub seed: u64,
}

impl Default for GapConfig {
    fn default() -> Self {
        Self {
            n_grid: vec![50, 200, 800, 3200],
            p: 32,
            n_signal: 3,
            beta_min: 1.0,
            sigma: 1.0,
            v1: V1Rule::Power(2.0),
            gap: 2.0,
            reps: 100,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GapRow {
    pub n: usize,
    pub p: usize,
    pub v1: f64,
    pub noise_failure: f64,
    pub signal_failure: f64,
}

/// Gaussian design with `n_signal` coefficients equal to `beta_min` and the
/// rest zero.
fn gap_replicate(n: usize, cfg: &GapConfig, rng: &mut rng::SimRng) -> Result<(bool, bool)> {
    let x = DMatrix::from_fn(n, cfg.p, |_, _| -> f64 { StandardNormal.sample(rng) });
    let beta = DVector::from_fn(cfg.p, |j, _| if j < cfg.n_signal { cfg.beta_min } else { 0.0 });
    let noise = DVector::from_fn(n, |_, _| -> f64 { StandardNormal.sample(rng) });
    let y = &x * beta + noise * cfg.sigma;
    let data = standardize(&RawDataset::new(y, x)?)?;
    let hp = Hyperparameters::default().with_v1(cfg.v1.at(n));
    let bcfg = BatchConfig {
        max_iters: 1,
        pin_sigma2: true,
        initial_sigma2: cfg.sigma * cfg.sigma,
        woodbury: WoodburyMode::Never,
        record_elbo: false,
        ..Default::default()
    };
    let logits = BatchSolver::new(&data, &hp, &bcfg)?.step()?.logits;
    let half = cfg.gap / 2.0;
    let noise_fail = (cfg.n_signal..cfg.p).any(|j| logits[j] > -half);
    let signal_fail = (0..cfg.n_signal).any(|j| logits[j] < half);
    Ok((noise_fail, signal_fail))
}

/// Empirical probabilities, per `n`, that after one batch iteration some
/// noise logit exceeds `-C/2` or some signal logit falls below `C/2`.
pub fn gap_experiment(cfg: &GapConfig) -> Result<Vec<GapRow>> {
    if cfg.n_signal > cfg.p || cfg.reps == 0 {
        return Err(Error::InvalidInput("gap experiment needs n_signal <= p and reps > 0".into()));
    }
    cfg.n_grid
        .iter()
        .enumerate()
        .map(|(g, &n)| {
            let outcomes: Vec<Result<(bool, bool)>> = (0..cfg.reps)
                .into_par_iter()
                .map(|r| {
                    let mut rng = rng::stream(cfg.seed, (g * cfg.reps + r) as u64);
                    gap_replicate(n, cfg, &mut rng)
                })
                .collect();
            let outcomes = outcomes.into_iter().collect::<Result<Vec<_>>>()?;
            let k = outcomes.len() as f64;
            Ok(GapRow {
                n,
                p: cfg.p,
                v1: cfg.v1.at(n),
                noise_failure: outcomes.iter().filter(|o| o.0).count() as f64 / k,
                signal_failure: outcomes.iter().filter(|o| o.1).count() as f64 / k,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BayesConfig {
    pub n_grid: Vec<usize>,
    pub sigma: f64,
    pub v1: V1Rule,
    pub algorithm: Algorithm,
    pub reps: usize,
    pub seed: u64,
}

impl Default for BayesConfig {
    fn default() -> Self {
        Self {
            n_grid: vec![60, 240, 960],
            sigma: 3.0,
            v1: V1Rule::Power(1.0),
            algorithm: Algorithm::Batch,
            reps: 100,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BayesRow {
    pub n: usize,
    pub p: usize,
    pub v1: f64,
    pub q_p10: f64,
    pub q_median: f64,
    pub q_p90: f64,
    /// Fits where `1 - Σ_{S*}(1-φ) - Σ_{not S*} φ` exceeded `q(γ*)`.
    pub bound_violations: usize,
}

fn quantile(sorted: &[f64], prob: f64) -> f64 {
    let pos = prob * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Distribution over replicates of the variational probability of the true
/// model on the eight-predictor AR(0.5) truth `(3, 1.5, 0, 0, 2, 0, 0, 0)`.
pub fn bayesian_consistency_experiment(cfg: &BayesConfig) -> Result<Vec<BayesRow>> {
    if cfg.reps == 0 {
        return Err(Error::InvalidInput("reps must be positive".into()));
    }
    let solver = SolverConfig::default().lean();
    cfg.n_grid
        .iter()
        .enumerate()
        .map(|(g, &n)| {
            let v1 = cfg.v1.at(n);
            let fits: Vec<Result<(f64, f64)>> = (0..cfg.reps)
                .into_par_iter()
                .map(|r| {
                    let mut rng = rng::stream(cfg.seed, (g * cfg.reps + r) as u64);
                    let sim = gen_example1(n, cfg.sigma, &mut rng)?;
                    let data = standardize(&sim.data)?;
                    let result = fit(&data, &Hyperparameters::default().with_v1(v1), cfg.algorithm, &solver)?;
                    let truth = ModelIndex::from_support(sim.beta_star.len(), &sim.support());
                    let q = model_probability(&truth, &result.state.phi)?;
                    Ok((q, model_probability_lower_bound(&truth, &result.state.phi)))
                })
                .collect();
            let fits = fits.into_iter().collect::<Result<Vec<_>>>()?;
            let mut qs: Vec<f64> = fits.iter().map(|f| f.0).collect();
            qs.sort_by(f64::total_cmp);
            Ok(BayesRow {
                n,
                p: 8,
                v1,
                q_p10: quantile(&qs, 0.1),
                q_median: median(&qs),
                q_p90: quantile(&qs, 0.9),
                bound_violations: fits.iter().filter(|(q, lb)| lb > q).count(),
            })
        })
        .collect()
}

pub fn gap_records(rows: &[GapRow]) -> Vec<TrendRecord> {
    rows.iter()
        .flat_map(|r| {
            [("noise_failure", r.noise_failure), ("signal_failure", r.signal_failure)].map(|(m, v)| TrendRecord {
                n: r.n,
                p: r.p,
                v1: r.v1,
                metric: m.into(),
                value: v,
            })
        })
        .collect()
}

pub fn bayes_records(rows: &[BayesRow]) -> Vec<TrendRecord> {
    rows.iter()
        .flat_map(|r| {
            [
                ("q_p10", r.q_p10),
                ("q_median", r.q_median),
                ("q_p90", r.q_p90),
                ("bound_violations", r.bound_violations as f64),
            ]
            .map(|(m, v)| TrendRecord {
                n: r.n,
                p: r.p,
                v1: r.v1,
                metric: m.into(),
                value: v,
            })
        })
        .collect()
}

pub fn is_non_increasing(values: &[f64]) -> bool {
    values.windows(2).all(|w| w[1] <= w[0])
}

pub fn is_non_decreasing(values: &[f64]) -> bool {
    values.windows(2).all(|w| w[1] >= w[0])
}
