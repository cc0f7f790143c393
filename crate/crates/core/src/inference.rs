//! Post-fit quantities: selected sets, sparse coefficients, model
//! probabilities, the entropy convergence measure and the two prediction
//! modes ("S" = sparse coefficients, "TS" = OLS refit on the selected set).

use std::time::Duration;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Scaling, StandardizedDataset, VariationalState};

/// Threshold on `φ_j` that defines the selected set.
pub const SELECTION_CUTOFF: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Algorithm {
    /// Coordinate-wise updates of `(μ_j, σ_j², φ_j)`.
    #[serde(rename = "alg1")]
    Componentwise,
    /// Simultaneous `μ` solve with linearized, truncated `φ` updates.
    #[serde(rename = "alg2")]
    Batch,
}

impl Algorithm {
    pub fn tag(self) -> &'static str {
        match self {
            Algorithm::Componentwise => "alg1",
            Algorithm::Batch => "alg2",
        }
    }
}

/// Binary model index `γ`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelIndex(pub Vec<bool>);

impl ModelIndex {
    pub fn from_support(p: usize, support: &[usize]) -> Self {
        let mut g = vec![false; p];
        for &j in support {
            g[j] = true;
        }
        Self(g)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub algorithm: Algorithm,
    pub state: VariationalState,
    /// Zero-based indices with `φ_j > 0.5`.
    pub selected: Vec<usize>,
    /// `μ_j` where `φ_j ≥ 0.5`, else 0 (standardized scale).
    pub sparse_beta: DVector<f64>,
    pub elbo_trace: Vec<f64>,
    /// Maximum Bernoulli-entropy change per iteration.
    pub entropy_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub wall_time: Duration,
    pub v1: f64,
    /// Value used in the slab variance denominator.
    pub a_n: f64,
    /// Number of inclusion probabilities that changed in each batch iteration.
    pub woodbury_ranks: Vec<usize>,
    /// Slab means after each iteration, when requested by the solver config.
    pub mu_trace: Vec<DVector<f64>>,
    pub scaling: Scaling,
    pub feature_names: Vec<String>,
}

impl FitResult {
    pub(crate) fn assemble(
        algorithm: Algorithm,
        state: VariationalState,
        data: &StandardizedDataset,
        v1: f64,
        a_n: f64,
    ) -> Self {
        let selected = selected_set(&state.phi, SELECTION_CUTOFF);
        let sparse_beta = sparse_beta(&state, SELECTION_CUTOFF);
        Self {
            algorithm,
            iterations: state.iter,
            state,
            selected,
            sparse_beta,
            elbo_trace: Vec::new(),
            entropy_trace: Vec::new(),
            converged: false,
            wall_time: Duration::ZERO,
            v1,
            a_n,
            woodbury_ranks: Vec::new(),
            mu_trace: Vec::new(),
            scaling: data.scaling.clone(),
            feature_names: data.feature_names.clone(),
        }
    }

    /// Sparse coefficients in the original feature units, with intercept.
    pub fn original_coefficients(&self) -> (f64, DVector<f64>) {
        self.scaling.coefficients_to_original(&self.sparse_beta)
    }

    /// `q(γ)` for this fit's inclusion probabilities.
    pub fn model_probability(&self, gamma: &ModelIndex) -> Result<f64> {
        model_probability(gamma, &self.state.phi)
    }

    pub fn to_json(&self) -> FitJson {
        FitJson {
            schema: 1,
            algorithm: self.algorithm,
            converged: self.converged,
            iterations: self.iterations,
            theta_hat: self.state.theta_hat,
            sigma2_hat: self.state.sigma2_hat,
            v1: self.v1,
            features: (0..self.state.p())
                .map(|j| FeatureJson {
                    name: self.feature_names[j].clone(),
                    mu: self.state.mu[j],
                    sigma2_j: self.state.sigma2_j[j],
                    phi: self.state.phi[j],
                    selected: self.selected.contains(&j),
                })
                .collect(),
        }
    }
}

/// JSON document written by `ssvb fit`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitJson {
    pub schema: u32,
    pub algorithm: Algorithm,
    pub converged: bool,
    pub iterations: usize,
    pub theta_hat: f64,
    pub sigma2_hat: f64,
    pub v1: f64,
    pub features: Vec<FeatureJson>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureJson {
    pub name: String,
    pub mu: f64,
    pub sigma2_j: f64,
    pub phi: f64,
    pub selected: bool,
}

/// `{j : φ_j > cutoff}` (strict).
pub fn selected_set(phi: &DVector<f64>, cutoff: f64) -> Vec<usize> {
    phi.iter()
        .enumerate()
        .filter(|&(_, &q)| q > cutoff)
        .map(|(j, _)| j)
        .collect()
}

/// `μ_j` gated by `φ_j ≥ cutoff`.
pub fn sparse_beta(state: &VariationalState, cutoff: f64) -> DVector<f64> {
    DVector::from_fn(state.p(), |j, _| {
        if state.phi[j] >= cutoff {
            state.mu[j]
        } else {
            0.0
        }
    })
}

/// `q(γ) = Π φ_j^{γ_j} (1 - φ_j)^{1 - γ_j}`, accumulated in log space.
pub fn model_probability(gamma: &ModelIndex, phi: &DVector<f64>) -> Result<f64> {
    if gamma.len() != phi.len() {
        return Err(Error::DimensionMismatch(format!(
            "model index has length {}, phi has {}",
            gamma.len(),
            phi.len()
        )));
    }
    let log_q: f64 = gamma
        .0
        .iter()
        .zip(phi.iter())
        .map(|(&g, &q)| if g { q.ln() } else { (-q).ln_1p() })
        .sum();
    Ok(log_q.exp())
}

/// Lower bound `1 - Σ_{j∈S}(1 - φ_j) - Σ_{j∉S} φ_j` on `q(γ)`.
pub fn model_probability_lower_bound(gamma: &ModelIndex, phi: &DVector<f64>) -> f64 {
    1.0 - gamma
        .0
        .iter()
        .zip(phi.iter())
        .map(|(&g, &q)| if g { 1.0 - q } else { q })
        .sum::<f64>()
}

/// Natural-log entropy of `Bern(q)`.
pub fn bernoulli_entropy(q: f64) -> f64 {
    let mut h = 0.0;
    if q > 0.0 {
        h -= q * q.ln();
    }
    if q < 1.0 {
        h -= (1.0 - q) * (-q).ln_1p();
    }
    h
}

/// `max_j |H(φ_curr_j) - H(φ_prev_j)|`.
pub fn max_entropy_change(phi_prev: &DVector<f64>, phi_curr: &DVector<f64>) -> f64 {
    phi_prev
        .iter()
        .zip(phi_curr.iter())
        .map(|(&a, &b)| (bernoulli_entropy(b) - bernoulli_entropy(a)).abs())
        .fold(0.0, f64::max)
}

/// Prediction with the sparse coefficients ("S"). `x_new` is in original
/// units; the training standardization is applied and the response mean is
/// added back.
pub fn predict_sparse(fit: &FitResult, x_new: &DMatrix<f64>) -> Result<DVector<f64>> {
    let xs = fit.scaling.transform(x_new)?;
    Ok((xs * &fit.sparse_beta).add_scalar(fit.scaling.y_mean))
}

#[derive(Debug, Clone)]
pub struct TwoStagePrediction {
    pub yhat: DVector<f64>,
    /// OLS coefficients on the selected columns (standardized scale).
    pub coefficients: DVector<f64>,
    /// Set when `X[:, Ŝ]` is rank deficient; the least-norm solution was used.
    pub rank_deficient: bool,
}

/// Two-stage prediction ("TS"): OLS refit of the training response on the
/// selected columns, then prediction on `x_new` (original units).
pub fn predict_two_stage(
    fit: &FitResult,
    train: &StandardizedDataset,
    x_new: &DMatrix<f64>,
) -> Result<TwoStagePrediction> {
    if train.p() != fit.state.p() {
        return Err(Error::DimensionMismatch("training data does not match fit".into()));
    }
    let xs_new = fit.scaling.transform(x_new)?;
    if fit.selected.is_empty() {
        return Ok(TwoStagePrediction {
            yhat: DVector::from_element(x_new.nrows(), fit.scaling.y_mean),
            coefficients: DVector::zeros(0),
            rank_deficient: false,
        });
    }
    let xsel = train.x.select_columns(&fit.selected);
    let (coef, rank_deficient) = least_squares(&xsel, &train.y);
    let yhat = (xs_new.select_columns(&fit.selected) * &coef).add_scalar(fit.scaling.y_mean);
    Ok(TwoStagePrediction {
        yhat,
        coefficients: coef,
        rank_deficient,
    })
}

/// Least-norm least-squares solution via SVD; flags numerical rank deficiency.
pub(crate) fn least_squares(x: &DMatrix<f64>, y: &DVector<f64>) -> (DVector<f64>, bool) {
    let svd = x.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let tol = smax * (x.nrows().max(x.ncols()) as f64) * f64::EPSILON;
    let rank_deficient = x.ncols() > x.nrows() || svd.singular_values.iter().any(|&s| s <= tol);
    let coef = svd
        .solve(y, tol)
        .expect("SVD was computed with both U and V");
    (coef, rank_deficient)
}
