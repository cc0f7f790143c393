//! The variational objective used as a convergence diagnostic and as the
//! monotonicity oracle for the component-wise solver.
//!
//! Conventions: the point mass at zero contributes no differential entropy,
//! `θ̂` and `σ̂²` enter as point estimates together with their log prior
//! densities, and the normalizing constants of the Beta and inverse-gamma
//! priors are dropped. Only differences of this value are meaningful across
//! implementations.

use std::f64::consts::{E, PI};

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::model::{Hyperparameters, StandardizedDataset, VariationalState};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElboParts {
    /// `E_q log p(y | β, σ̂²)`.
    pub likelihood_term: f64,
    /// `E_q log N(β_j; 0, v1 σ̂²)` over included coordinates.
    pub slab_prior_term: f64,
    /// `E_q log Bern(γ_j; θ̂)`.
    pub bernoulli_term: f64,
    /// Gaussian slab entropy plus Bernoulli entropy.
    pub entropy_term: f64,
    /// Log Beta prior at `θ̂` plus log inverse-gamma prior at `σ̂²`, up to constants.
    pub hyperprior_term: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElboValue {
    pub total: f64,
    pub parts: ElboParts,
}

/// `E_q ‖y - Xβ‖²`, using `‖X_j‖² = n`.
pub(crate) fn expected_sq_residual(state: &VariationalState, data: &StandardizedDataset) -> f64 {
    let n = data.n() as f64;
    let beta_bar = state.beta_bar();
    let resid = &data.y - &data.x * &beta_bar;
    let var_sum: f64 = (0..state.p())
        .map(|j| {
            let (phi, mu) = (state.phi[j], state.mu[j]);
            phi * (mu * mu + state.sigma2_j[j]) - phi * phi * mu * mu
        })
        .sum();
    resid.norm_squared() + n * var_sum
}

fn bernoulli_entropy(q: f64) -> f64 {
    let mut h = 0.0;
    if q > 0.0 {
        h -= q * q.ln();
    }
    if q < 1.0 {
        h -= (1.0 - q) * (1.0 - q).ln();
    }
    h
}

pub fn compute_elbo(
    state: &VariationalState,
    data: &StandardizedDataset,
    hp: &Hyperparameters,
) -> Result<ElboValue> {
    state.check_dims(data.p())?;
    if data.x.nrows() != data.y.len() {
        return Err(Error::DimensionMismatch("X and y row counts differ".into()));
    }
    let n = data.n() as f64;
    let s2 = state.sigma2_hat;
    let theta = state.theta_hat;

    let likelihood_term =
        -0.5 * n * (2.0 * PI * s2).ln() - expected_sq_residual(state, data) / (2.0 * s2);

    let mut slab_prior_term = 0.0;
    let mut bernoulli_term = 0.0;
    let mut entropy_term = 0.0;
    for j in 0..state.p() {
        let (phi, mu, v) = (state.phi[j], state.mu[j], state.sigma2_j[j]);
        slab_prior_term +=
            phi * (-0.5 * (2.0 * PI * hp.v1 * s2).ln() - (mu * mu + v) / (2.0 * hp.v1 * s2));
        bernoulli_term += phi * theta.ln() + (1.0 - phi) * (1.0 - theta).ln();
        entropy_term += phi * 0.5 * (2.0 * PI * E * v).ln() + bernoulli_entropy(phi);
    }

    let hyperprior_term = (hp.a0 - 1.0) * theta.ln() + (hp.b0 - 1.0) * (1.0 - theta).ln()
        - (hp.nu / 2.0 + 1.0) * s2.ln()
        - hp.nu * hp.lambda / (2.0 * s2);

    let parts = ElboParts {
        likelihood_term,
        slab_prior_term,
        bernoulli_term,
        entropy_term,
        hyperprior_term,
    };
    Ok(ElboValue {
        total: likelihood_term + slab_prior_term + bernoulli_term + entropy_term + hyperprior_term,
        parts,
    })
}

/// Permutes every per-feature vector of the state by `perm` (new `j` takes old `perm[j]`).
pub fn permute_state(state: &VariationalState, perm: &[usize]) -> VariationalState {
    let pick = |v: &DVector<f64>| DVector::from_iterator(perm.len(), perm.iter().map(|&k| v[k]));
    VariationalState {
        mu: pick(&state.mu),
        sigma2_j: pick(&state.sigma2_j),
        phi: pick(&state.phi),
        theta_hat: state.theta_hat,
        sigma2_hat: state.sigma2_hat,
        frozen: perm.iter().map(|&k| state.frozen[k]).collect(),
        iter: state.iter,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{standardize, RawDataset};
    use nalgebra::DMatrix;

    fn state(mu: &[f64], s2j: &[f64], phi: &[f64], theta: f64, s2: f64) -> VariationalState {
        VariationalState {
            mu: DVector::from_row_slice(mu),
            sigma2_j: DVector::from_row_slice(s2j),
            phi: DVector::from_row_slice(phi),
            theta_hat: theta,
            sigma2_hat: s2,
            frozen: vec![false; mu.len()],
            iter: 0,
        }
    }

    fn log_normal(x: f64, mean: f64, var: f64) -> f64 {
        -0.5 * (2.0 * PI * var).ln() - (x - mean) * (x - mean) / (2.0 * var)
    }

    /// Brute-force evaluation of the one-feature objective: exact sum over
    /// `γ ∈ {0, 1}` and composite Simpson quadrature over the slab.
    fn quadrature_elbo(
        data: &StandardizedDataset,
        st: &VariationalState,
        hp: &Hyperparameters,
    ) -> f64 {
        let (mu, v, phi) = (st.mu[0], st.sigma2_j[0], st.phi[0]);
        let (theta, s2) = (st.theta_hat, st.sigma2_hat);
        let loglik = |b: f64| -> f64 {
            (0..data.n())
                .map(|i| log_normal(data.y[i], data.x[(i, 0)] * b, s2))
                .sum()
        };
        let spike = loglik(0.0) + (1.0 - theta).ln() - (1.0 - phi).ln();

        let sd = v.sqrt();
        let (lo, hi) = (mu - 14.0 * sd, mu + 14.0 * sd);
        let m = 40_000;
        let h = (hi - lo) / m as f64;
        let integrand = |b: f64| {
            let q = log_normal(b, mu, v);
            q.exp() * (loglik(b) + log_normal(b, 0.0, hp.v1 * s2) + theta.ln() - phi.ln() - q)
        };
        let mut acc = integrand(lo) + integrand(hi);
        for k in 1..m {
            let w = if k % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * integrand(lo + k as f64 * h);
        }
        let slab = acc * h / 3.0;

        let hyper = (hp.a0 - 1.0) * theta.ln() + (hp.b0 - 1.0) * (1.0 - theta).ln()
            - (hp.nu / 2.0 + 1.0) * s2.ln()
            - hp.nu * hp.lambda / (2.0 * s2);
        (1.0 - phi) * spike + phi * slab + hyper
    }

    fn toy() -> StandardizedDataset {
        let raw = RawDataset::new(
            DVector::from_vec(vec![1.3, -0.4, 2.2, -3.1]),
            DMatrix::from_column_slice(4, 1, &[1.0, -1.0, 1.0, -1.0]),
        )
        .unwrap();
        standardize(&raw).unwrap()
    }

    #[test]
    fn matches_quadrature_on_one_feature() {
        let data = toy();
        let hp = Hyperparameters {
            v1: 2.0,
            a0: 2.0,
            b0: 3.0,
            ..Default::default()
        };
        for &(mu, v, phi, theta, s2) in &[
            (0.7, 0.3, 0.6, 0.4, 1.5),
            (-1.2, 0.05, 0.9, 0.7, 0.8),
            (2.0, 1.1, 0.2, 0.3, 3.0),
        ] {
            let st = state(&[mu], &[v], &[phi], theta, s2);
            let ours = compute_elbo(&st, &data, &hp).unwrap().total;
            let oracle = quadrature_elbo(&data, &st, &hp);
            assert!((ours - oracle).abs() < 1e-6, "{ours} vs {oracle}");
        }
    }

    #[test]
    fn parts_sum_to_total() {
        let data = toy();
        let st = state(&[0.3], &[0.2], &[0.4], 0.5, 1.0);
        let e = compute_elbo(&st, &data, &Hyperparameters::default()).unwrap();
        let p = e.parts;
        let sum = p.likelihood_term + p.slab_prior_term + p.bernoulli_term + p.entropy_term + p.hyperprior_term;
        assert!((sum - e.total).abs() <= 1e-9 * e.total.abs());
    }

    #[test]
    fn slab_contribution_vanishes_as_phi_goes_to_zero() {
        let data = toy();
        let c = 1e-9;
        let s2 = 1.7;
        let st = state(&[5.0], &[0.2], &[c], 0.5, s2);
        let e = compute_elbo(&st, &data, &Hyperparameters::default()).unwrap();
        let n = data.n() as f64;
        let expected = -0.5 * n * (2.0 * PI * s2).ln() - data.y.norm_squared() / (2.0 * s2);
        assert!((e.parts.likelihood_term - expected).abs() < 1e-6);
    }

    #[test]
    fn dimension_mismatch() {
        let data = toy();
        let st = state(&[0.0, 0.0], &[1.0, 1.0], &[0.5, 0.5], 0.5, 1.0);
        assert!(matches!(
            compute_elbo(&st, &data, &Hyperparameters::default()),
            Err(Error::DimensionMismatch(_))
        ));
    }
}
