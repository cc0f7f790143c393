//! Synthetic designs for the benchmark scenarios, plus the model-error and
//! selection metrics used to summarize them.
//!
//! Every generator takes an explicit RNG, so a dataset is a pure function of
//! the generator seed and stream.

use nalgebra::{DMatrix, DVector};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::inference::least_squares;
use crate::model::RawDataset;

/// A generated regression problem with its ground truth.
#[derive(Debug, Clone)]
pub struct SimData {
    pub data: RawDataset,
    pub beta_star: DVector<f64>,
    /// Population covariance of one row of `X`.
    pub covariance: DMatrix<f64>,
    /// Noise standard deviation.
    pub sigma: f64,
}

impl SimData {
    pub fn support(&self) -> Vec<usize> {
        support_of(&self.beta_star)
    }
}

pub fn support_of(beta: &DVector<f64>) -> Vec<usize> {
    (0..beta.len()).filter(|&j| beta[j] != 0.0).collect()
}

/// Noise scale for the `p = 1000` examples.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Example3Noise {
    /// Noise variance 3.
    Variance3,
    /// Noise standard deviation 3.
    Sd3,
}

impl Example3Noise {
    pub fn sd(self) -> f64 {
        match self {
            Self::Variance3 => 3f64.sqrt(),
            Self::Sd3 => 3.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Scenario {
    Example1 { n: usize, sigma: f64 },
    Example2 { n: usize },
    Example3a { noise: Example3Noise },
    Example3b,
}

impl Scenario {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Example1 { .. } => "example1",
            Self::Example2 { .. } => "example2",
            Self::Example3a { .. } => "example3a",
            Self::Example3b => "example3b",
        }
    }

    pub fn generate<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<SimData> {
        match *self {
            Self::Example1 { n, sigma } => gen_example1(n, sigma, rng),
            Self::Example2 { n } => gen_example2(n, rng),
            Self::Example3a { noise } => gen_example3a(100, noise, rng),
            Self::Example3b => gen_example3b(100, rng),
        }
    }
}

fn standard_normals<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> DMatrix<f64> {
    // Row-major draw order, so the first rows do not depend on `rows`.
    let mut z = DMatrix::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            z[(i, j)] = StandardNormal.sample(rng);
        }
    }
    z
}

/// `Cov(X_i, X_j) = ρ^{|i-j|}`.
pub fn ar_covariance(p: usize, rho: f64) -> DMatrix<f64> {
    DMatrix::from_fn(p, p, |i, j| rho.powi(i.abs_diff(j) as i32))
}

/// Unit variances; pairwise correlation `rho` inside each block, zero elsewhere.
pub fn block_covariance(p: usize, blocks: &[&[usize]], rho: f64) -> DMatrix<f64> {
    let mut cov = DMatrix::identity(p, p);
    for block in blocks {
        for &i in *block {
            for &j in *block {
                if i != j {
                    cov[(i, j)] = rho;
                }
            }
        }
    }
    cov
}

/// Rows `z_i L^T` with `L` the Cholesky factor of `cov`.
pub fn correlate_cholesky(z: &DMatrix<f64>, cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let l = cov
        .clone()
        .cholesky()
        .ok_or_else(|| Error::InvalidInput("covariance is not positive definite".into()))?
        .unpack();
    Ok(z * l.transpose())
}

/// AR(1) recursion `x_j = ρ x_{j-1} + sqrt(1-ρ²) z_j`, equivalent in
/// distribution (and, for the same `z`, in value) to the Cholesky path for
/// `ρ^{|i-j|}` covariance.
pub fn correlate_ar(z: &DMatrix<f64>, rho: f64) -> DMatrix<f64> {
    let s = (1.0 - rho * rho).sqrt();
    let mut x = z.clone();
    for j in 1..z.ncols() {
        for i in 0..z.nrows() {
            x[(i, j)] = rho * x[(i, j - 1)] + s * z[(i, j)];
        }
    }
    x
}

fn respond<R: Rng + ?Sized>(x: DMatrix<f64>, beta: &DVector<f64>, sigma: f64, rng: &mut R) -> Result<RawDataset> {
    let n = x.nrows();
    let noise = DVector::from_fn(n, |_, _| -> f64 { StandardNormal.sample(rng) });
    let y = &x * beta + noise * sigma;
    RawDataset::new(y, x)
}

/// Eight AR(0.5) predictors with three signals.
pub fn gen_example1<R: Rng + ?Sized>(n: usize, sigma: f64, rng: &mut R) -> Result<SimData> {
    let beta_star = DVector::from_vec(vec![3.0, 1.5, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0]);
    let covariance = ar_covariance(8, 0.5);
    let x = correlate_cholesky(&standard_normals(n, 8, rng), &covariance)?;
    let data = respond(x, &beta_star, sigma, rng)?;
    Ok(SimData { data, beta_star, covariance, sigma })
}

/// Forty predictors, two blocks of three at correlation 0.9 carrying signals
/// of opposite signs, noise sd 6.
pub fn gen_example2<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<SimData> {
    let p = 40;
    let mut beta_star = DVector::zeros(p);
    for (j, b) in [3.0, 3.0, -2.0, 3.0, 3.0, -2.0].into_iter().enumerate() {
        beta_star[j] = b;
    }
    let covariance = block_covariance(p, &[&[0, 1, 2], &[3, 4, 5]], 0.9);
    let x = correlate_cholesky(&standard_normals(n, p, rng), &covariance)?;
    let sigma = 6.0;
    let data = respond(x, &beta_star, sigma, rng)?;
    Ok(SimData { data, beta_star, covariance, sigma })
}

const WIDE_P: usize = 1000;
const WIDE_RHO: f64 = 0.6;

/// 1000 AR(0.6) predictors, coefficients `(3, 2, 1, 0, ...)`.
pub fn gen_example3a<R: Rng + ?Sized>(n: usize, noise: Example3Noise, rng: &mut R) -> Result<SimData> {
    let mut beta_star = DVector::zeros(WIDE_P);
    beta_star[0] = 3.0;
    beta_star[1] = 2.0;
    beta_star[2] = 1.0;
    let x = correlate_ar(&standard_normals(n, WIDE_P, rng), WIDE_RHO);
    let sigma = noise.sd();
    let data = respond(x, &beta_star, sigma, rng)?;
    Ok(SimData { data, beta_star, covariance: ar_covariance(WIDE_P, WIDE_RHO), sigma })
}

/// 1000 AR(0.6) predictors; the first 20 coefficients are a random
/// arrangement of ten 1's, seven 2's and three 3's. Noise sd 3.
pub fn gen_example3b<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<SimData> {
    let mut head: Vec<f64> = [(1.0, 10), (2.0, 7), (3.0, 3)]
        .iter()
        .flat_map(|&(v, k)| std::iter::repeat_n(v, k))
        .collect();
    head.shuffle(rng);
    let mut beta_star = DVector::zeros(WIDE_P);
    for (j, v) in head.into_iter().enumerate() {
        beta_star[j] = v;
    }
    let x = correlate_ar(&standard_normals(n, WIDE_P, rng), WIDE_RHO);
    let sigma = 3.0;
    let data = respond(x, &beta_star, sigma, rng)?;
    Ok(SimData { data, beta_star, covariance: ar_covariance(WIDE_P, WIDE_RHO), sigma })
}

/// Appends every square and pairwise product of the base columns
/// (`p + p(p-1)/2` new columns), then `n_noise` pseudo-features built in
/// batches of `batch`: each batch copies randomly chosen base columns, adds
/// `N(0, noise_sd²)` noise and applies one row permutation shared by the batch.
pub fn gen_noise_augmented<R: Rng + ?Sized>(
    base: &RawDataset,
    n_noise: usize,
    batch: usize,
    noise_sd: f64,
    rng: &mut R,
) -> Result<RawDataset> {
    if batch == 0 || batch > base.p() {
        return Err(Error::InvalidInput("batch size must be in 1..=p".into()));
    }
    if !(noise_sd >= 0.0) {
        return Err(Error::InvalidInput("noise sd must be non-negative".into()));
    }
    let (n, p) = (base.n(), base.p());
    let mut cols: Vec<DVector<f64>> = (0..p).map(|j| base.x.column(j).into_owned()).collect();
    let mut names = base.feature_names.clone();
    for a in 0..p {
        for b in a..p {
            cols.push(base.x.column(a).component_mul(&base.x.column(b)));
            names.push(if a == b {
                format!("{}^2", base.feature_names[a])
            } else {
                format!("{}*{}", base.feature_names[a], base.feature_names[b])
            });
        }
    }
    let all: Vec<usize> = (0..p).collect();
    let mut made = 0;
    while made < n_noise {
        let take = batch.min(n_noise - made);
        let sources: Vec<usize> = all.choose_multiple(rng, take).copied().collect();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(rng);
        for &src in &sources {
            let col = DVector::from_fn(n, |i, _| {
                let e: f64 = StandardNormal.sample(rng);
                base.x[(perm[i], src)] + noise_sd * e
            });
            cols.push(col);
            names.push(format!("noise{}_{}", made + 1, base.feature_names[src]));
            made += 1;
        }
    }
    let x = DMatrix::from_columns(&cols);
    RawDataset::with_names(base.y.clone(), x, names)
}

/// `(β̂ - β*)ᵀ Σ (β̂ - β*) / σ²`.
pub fn model_error(beta_hat: &DVector<f64>, beta_star: &DVector<f64>, cov: &DMatrix<f64>, sigma2: f64) -> f64 {
    let d = beta_hat - beta_star;
    (cov * &d).dot(&d) / sigma2
}

/// `100 × median_i(me_i / me_ols_i)`.
pub fn mrme(me: &[f64], me_ols: &[f64]) -> Result<f64> {
    if me.len() != me_ols.len() || me.is_empty() {
        return Err(Error::DimensionMismatch("model-error lists must be non-empty and paired".into()));
    }
    if let Some(i) = me_ols.iter().position(|&m| m == 0.0) {
        return Err(Error::ZeroOlsError(i));
    }
    let ratios: Vec<f64> = me.iter().zip(me_ols).map(|(a, b)| a / b).collect();
    Ok(100.0 * median(&ratios))
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len();
    if m == 0 {
        f64::NAN
    } else if m % 2 == 1 {
        v[m / 2]
    } else {
        0.5 * (v[m / 2 - 1] + v[m / 2])
    }
}

/// `(correct_zeros, incorrect_zeros)`: unselected noise and unselected signal features.
pub fn selection_counts(selected: &[usize], support: &[usize], p: usize) -> (usize, usize) {
    let mut is_sel = vec![false; p];
    for &j in selected {
        is_sel[j] = true;
    }
    let mut is_sig = vec![false; p];
    for &j in support {
        is_sig[j] = true;
    }
    let correct = (0..p).filter(|&j| !is_sig[j] && !is_sel[j]).count();
    let incorrect = (0..p).filter(|&j| is_sig[j] && !is_sel[j]).count();
    (correct, incorrect)
}

/// Slopes of the OLS fit with intercept, in original units.
pub fn ols_slopes(data: &RawDataset) -> DVector<f64> {
    let ym = data.y.mean();
    let mut xc = data.x.clone();
    for mut col in xc.column_iter_mut() {
        let m = col.mean();
        col.add_scalar_mut(-m);
    }
    least_squares(&xc, &data.y.add_scalar(-ym)).0
}
