//! Component-wise variational Bayes: each sweep updates `(μ_j, σ_j², φ_j)`
//! for `j = 1..p` in order, then the MAP estimates `θ̂` and `σ̂²`.
//!
//! Each coordinate update is the exact maximizer of the objective in
//! [`crate::elbo`] over `q_j` with everything else held fixed. The `σ̂²` step
//! is exact only with [`Sigma2Denominator::Sum`].

use std::time::Instant;

use nalgebra::DVector;

use crate::elbo::compute_elbo;
use crate::error::{Error, Result};
use crate::inference::{max_entropy_change, Algorithm, FitResult};
use crate::model::{expit, logit, Hyperparameters, StandardizedDataset, VariationalState};

/// Starting point for the component-wise solver.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitPolicy {
    pub phi: f64,
    pub theta: f64,
    /// `None` uses the sample variance of the centered response.
    pub sigma2: Option<f64>,
}

impl Default for InitPolicy {
    fn default() -> Self {
        Self {
            phi: 0.5,
            theta: 0.5,
            sigma2: None,
        }
    }
}

/// Denominator of the `σ̂²` MAP update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sigma2Denominator {
    /// `n + Σ_j φ_j + ν + 2`: the stationary point of the objective.
    Sum,
    /// `n + Π_j φ_j + ν + 2`, as the update is usually printed.
    Product,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ComponentwiseConfig {
    pub max_sweeps: usize,
    pub entropy_tol: f64,
    pub init: InitPolicy,
    pub sigma2_denominator: Sigma2Denominator,
}

impl Default for ComponentwiseConfig {
    fn default() -> Self {
        Self {
            max_sweeps: 500,
            entropy_tol: 1e-5,
            init: InitPolicy::default(),
            sigma2_denominator: Sigma2Denominator::Sum,
        }
    }
}

impl ComponentwiseConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_sweeps < 1 {
            return Err(Error::InvalidInput("max_sweeps must be at least 1".into()));
        }
        if !(self.entropy_tol > 0.0) {
            return Err(Error::InvalidInput("entropy_tol must be positive".into()));
        }
        Ok(())
    }
}

pub fn initial_state(data: &StandardizedDataset, hp: &Hyperparameters, init: &InitPolicy) -> VariationalState {
    let p = data.p();
    let n = data.n() as f64;
    let sigma2_hat = init
        .sigma2
        .unwrap_or_else(|| (data.y.norm_squared() / (n - 1.0)).max(f64::MIN_POSITIVE));
    VariationalState {
        mu: DVector::zeros(p),
        sigma2_j: DVector::from_element(p, sigma2_hat / (n + 1.0 / hp.v1)),
        phi: DVector::from_element(p, hp.clamp_prob(init.phi)),
        theta_hat: hp.clamp_prob(init.theta),
        sigma2_hat,
        frozen: vec![false; p],
        iter: 0,
    }
}

/// Logit of the optimal `φ_j` given `μ_j`, `σ_j²` and the MAP estimates.
pub(crate) fn inclusion_logit(mu: f64, sigma2_j: f64, state: &VariationalState, hp: &Hyperparameters) -> f64 {
    logit(state.theta_hat) + 0.5 * (sigma2_j / (hp.v1 * state.sigma2_hat)).ln() + mu * mu / (2.0 * sigma2_j)
}

/// Coordinate update using a maintained `fitted = X β̄`; keeps `fitted` current.
fn update_coordinate_with(
    j: usize,
    state: &mut VariationalState,
    data: &StandardizedDataset,
    hp: &Hyperparameters,
    fitted: &mut DVector<f64>,
) {
    let n = data.n() as f64;
    let col = data.x.column(j);
    let old = state.phi[j] * state.mu[j];
    // X_jᵀ(y - Σ_{l≠j} X_l φ_l μ_l)
    let partial = col.dot(&(&data.y - &*fitted)) + col.norm_squared() * old;
    let denom = n + 1.0 / hp.v1;
    let mu = partial / denom;
    let s2 = state.sigma2_hat / denom;
    let phi = hp.clamp_prob(expit(inclusion_logit(mu, s2, state, hp)));

    state.mu[j] = mu;
    state.sigma2_j[j] = s2;
    state.phi[j] = phi;
    fitted.axpy(phi * mu - old, &col, 1.0);
}

/// Exact coordinate update of `q_j`; all other coordinates are untouched.
pub fn update_coordinate(
    j: usize,
    state: &mut VariationalState,
    data: &StandardizedDataset,
    hp: &Hyperparameters,
) -> Result<()> {
    state.check_dims(data.p())?;
    if j >= data.p() {
        return Err(Error::DimensionMismatch(format!("coordinate {j} out of range for p = {}", data.p())));
    }
    let mut fitted = &data.x * state.beta_bar();
    update_coordinate_with(j, state, data, hp, &mut fitted);
    Ok(())
}

/// `θ̂ = (Σφ_j + a0 - 1) / (p + a0 + b0 - 2)`, clamped to `[c, 1-c]`.
pub fn update_theta(state: &mut VariationalState, hp: &Hyperparameters) -> Result<()> {
    let p = state.p() as f64;
    let denom = p + hp.a0 + hp.b0 - 2.0;
    if !(denom > 0.0) {
        return Err(Error::DegeneratePrior);
    }
    state.theta_hat = hp.clamp_prob((state.phi.sum() + hp.a0 - 1.0) / denom);
    Ok(())
}

/// Numerator and denominator of the component-wise `σ̂²` update.
pub fn sigma2_map_terms(
    state: &VariationalState,
    data: &StandardizedDataset,
    hp: &Hyperparameters,
    denominator: Sigma2Denominator,
) -> (f64, f64) {
    let n = data.n() as f64;
    let resid = &data.y - &data.x * state.beta_bar();
    let inv_v1 = 1.0 / hp.v1;
    let penalty: f64 = (0..state.p())
        .map(|j| {
            let (phi, mu, v) = (state.phi[j], state.mu[j], state.sigma2_j[j]);
            (n * (1.0 - phi) + inv_v1) * phi * mu * mu + (n + inv_v1) * phi * v
        })
        .sum();
    let numerator = resid.norm_squared() + penalty + hp.nu * hp.lambda;
    let phi_term = match denominator {
        Sigma2Denominator::Sum => state.phi.sum(),
        Sigma2Denominator::Product => state.phi.iter().product(),
    };
    (numerator, n + phi_term + hp.nu + 2.0)
}

pub fn update_sigma2_map(
    state: &mut VariationalState,
    data: &StandardizedDataset,
    hp: &Hyperparameters,
    denominator: Sigma2Denominator,
) {
    let (num, den) = sigma2_map_terms(state, data, hp, denominator);
    state.sigma2_hat = num / den;
}

/// One full sweep: coordinates `0..p` in order, then `θ̂`, then `σ̂²`.
pub fn sweep(
    state: &mut VariationalState,
    data: &StandardizedDataset,
    hp: &Hyperparameters,
    denominator: Sigma2Denominator,
) -> Result<()> {
    let mut fitted = &data.x * state.beta_bar();
    for j in 0..data.p() {
        update_coordinate_with(j, state, data, hp, &mut fitted);
    }
    update_theta(state, hp)?;
    update_sigma2_map(state, data, hp, denominator);
    state.iter += 1;
    Ok(())
}

pub fn fit_componentwise(
    data: &StandardizedDataset,
    hp: &Hyperparameters,
    cfg: &ComponentwiseConfig,
) -> Result<FitResult> {
    hp.validate()?;
    cfg.validate()?;
    let start = Instant::now();
    let mut state = initial_state(data, hp, &cfg.init);
    let mut elbo_trace = vec![compute_elbo(&state, data, hp)?.total];
    let mut entropy_trace = Vec::new();
    let mut converged = false;
    while state.iter < cfg.max_sweeps {
        let prev = state.phi.clone();
        sweep(&mut state, data, hp, cfg.sigma2_denominator)?;
        elbo_trace.push(compute_elbo(&state, data, hp)?.total);
        let change = max_entropy_change(&prev, &state.phi);
        entropy_trace.push(change);
        if change < cfg.entropy_tol {
            converged = true;
            break;
        }
    }
    let n = data.n() as f64;
    let mut fit = FitResult::assemble(Algorithm::Componentwise, state, data, hp.v1, n);
    fit.elbo_trace = elbo_trace;
    fit.entropy_trace = entropy_trace;
    fit.converged = converged;
    fit.wall_time = start.elapsed();
    Ok(fit)
}
