//! Regression data model, prior hyperparameters and the standardization
//! contract shared by both solvers.
//!
//! Every solver assumes a centered response and a design whose columns are
//! centered with `‖X_j‖² = n`. [`standardize`] produces that form and keeps
//! enough metadata to map coefficients and predictions back to the original
//! units.

use std::io::Read;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Response and design matrix in the caller's units.
#[derive(Debug, Clone, PartialEq)]
pub struct RawDataset {
    pub y: DVector<f64>,
    pub x: DMatrix<f64>,
    pub feature_names: Vec<String>,
}

impl RawDataset {
    /// Builds a dataset with default feature names `x1..xp`.
    pub fn new(y: DVector<f64>, x: DMatrix<f64>) -> Result<Self> {
        let names = (1..=x.ncols()).map(|j| format!("x{j}")).collect();
        Self::with_names(y, x, names)
    }

    pub fn with_names(y: DVector<f64>, x: DMatrix<f64>, feature_names: Vec<String>) -> Result<Self> {
        if y.len() != x.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "y has {} rows but X has {}",
                y.len(),
                x.nrows()
            )));
        }
        if feature_names.len() != x.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "{} feature names for {} columns",
                feature_names.len(),
                x.ncols()
            )));
        }
        if y.len() < 2 {
            return Err(Error::InvalidInput("need at least two observations".into()));
        }
        if x.ncols() < 1 {
            return Err(Error::InvalidInput("need at least one feature".into()));
        }
        if y.iter().chain(x.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(Self { y, x, feature_names })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    /// Subset of rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let y = DVector::from_iterator(rows.len(), rows.iter().map(|&i| self.y[i]));
        let x = self.x.select_rows(rows);
        Self {
            y,
            x,
            feature_names: self.feature_names.clone(),
        }
    }

    /// Reads the CSV layout used by the CLI: a header row whose first column
    /// is `y`, followed by one column per feature.
    pub fn from_csv_path(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::from_csv_reader(file)
    }

    pub fn from_csv_reader<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let headers = rdr.headers()?.clone();
        if headers.is_empty() || headers.get(0).map(str::trim) != Some("y") {
            return Err(Error::InvalidInput("first CSV column must be named `y`".into()));
        }
        if headers.len() < 2 {
            return Err(Error::InvalidInput("CSV has no feature columns".into()));
        }
        let names: Vec<String> = headers.iter().skip(1).map(|h| h.trim().to_string()).collect();
        let p = names.len();
        let mut ys = Vec::new();
        let mut xs = Vec::new();
        for (row, record) in rdr.records().enumerate() {
            let record = record?;
            if record.len() != p + 1 {
                return Err(Error::InvalidInput(format!(
                    "row {} has {} fields, expected {}",
                    row + 1,
                    record.len(),
                    p + 1
                )));
            }
            for (k, field) in record.iter().enumerate() {
                let v: f64 = field.trim().parse().map_err(|_| {
                    Error::InvalidInput(format!("row {}: cannot parse {field:?} as a number", row + 1))
                })?;
                if k == 0 {
                    ys.push(v);
                } else {
                    xs.push(v);
                }
            }
        }
        let n = ys.len();
        let x = DMatrix::from_row_slice(n, p, &xs);
        Self::with_names(DVector::from_vec(ys), x, names)
    }

    pub fn to_csv_writer<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["y".to_string()];
        header.extend(self.feature_names.iter().cloned());
        w.write_record(&header)?;
        for i in 0..self.n() {
            let mut rec = Vec::with_capacity(self.p() + 1);
            rec.push(format!("{:?}", self.y[i]));
            rec.extend((0..self.p()).map(|j| format!("{:?}", self.x[(i, j)])));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Back-transform metadata recorded by [`standardize`].
#[derive(Debug, Clone, PartialEq)]
pub struct Scaling {
    pub y_mean: f64,
    pub col_means: DVector<f64>,
    /// `x_std = (x - mean) / scale`, so `scale_j = ‖X_j - mean_j‖ / √n`.
    pub col_scales: DVector<f64>,
}

impl Scaling {
    /// Applies the training-set centering and scaling to new raw rows.
    pub fn transform(&self, x_raw: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let p = self.col_means.len();
        if x_raw.ncols() != p {
            return Err(Error::DimensionMismatch(format!(
                "new design has {} columns, training had {p}",
                x_raw.ncols()
            )));
        }
        let mut out = x_raw.clone();
        for j in 0..p {
            let (m, s) = (self.col_means[j], self.col_scales[j]);
            out.column_mut(j).apply(|v| *v = (*v - m) / s);
        }
        Ok(out)
    }

    /// Maps standardized-scale coefficients to `(intercept, slopes)` in the
    /// original units.
    pub fn coefficients_to_original(&self, beta_std: &DVector<f64>) -> (f64, DVector<f64>) {
        let slopes = beta_std.component_div(&self.col_scales);
        let intercept = self.y_mean - slopes.dot(&self.col_means);
        (intercept, slopes)
    }
}

/// Centered response and centered, scaled design (`‖X_j‖² = n`).
#[derive(Debug, Clone, PartialEq)]
pub struct StandardizedDataset {
    pub y: DVector<f64>,
    pub x: DMatrix<f64>,
    pub scaling: Scaling,
    pub feature_names: Vec<String>,
}

impl StandardizedDataset {
    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    /// Wraps data that is already centered and scaled (for example a
    /// constructed orthogonal design) with identity back-transform metadata.
    pub fn from_standardized(y: DVector<f64>, x: DMatrix<f64>) -> Result<Self> {
        let raw = RawDataset::new(y, x)?;
        let p = raw.p();
        Ok(Self {
            y: raw.y,
            x: raw.x,
            scaling: Scaling {
                y_mean: 0.0,
                col_means: DVector::zeros(p),
                col_scales: DVector::from_element(p, 1.0),
            },
            feature_names: raw.feature_names,
        })
    }

    /// The standardized values viewed as a raw dataset.
    pub fn to_raw(&self) -> RawDataset {
        RawDataset {
            y: self.y.clone(),
            x: self.x.clone(),
            feature_names: self.feature_names.clone(),
        }
    }
}

/// Centers `y` and centers/scales every column of `X` so that `‖X_j‖² = n`.
pub fn standardize(raw: &RawDataset) -> Result<StandardizedDataset> {
    let n = raw.n();
    let p = raw.p();
    if raw.y.iter().chain(raw.x.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite);
    }
    let nf = n as f64;
    let y_mean = raw.y.mean();
    let y = raw.y.map(|v| v - y_mean);

    let mut x = raw.x.clone();
    let mut col_means = DVector::zeros(p);
    let mut col_scales = DVector::zeros(p);
    for j in 0..p {
        let mut col = x.column_mut(j);
        let mean = col.mean();
        col.apply(|v| *v -= mean);
        let norm = col.norm();
        let magnitude = raw.x.column(j).amax().max(f64::MIN_POSITIVE);
        if norm <= 1e-12 * magnitude * nf.sqrt() {
            return Err(Error::ConstantColumn(j));
        }
        let scale = norm / nf.sqrt();
        col.apply(|v| *v /= scale);
        col_means[j] = mean;
        col_scales[j] = scale;
    }
    Ok(StandardizedDataset {
        y,
        x,
        scaling: Scaling {
            y_mean,
            col_means,
            col_scales,
        },
        feature_names: raw.feature_names.clone(),
    })
}

/// How the batch solver picks `a_n` in `σ_j² = σ̂² / (a_n + 1/v₁)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AnPolicy {
    /// `a_n = n`, the uncorrected variance.
    FixedN,
    /// Smallest non-zero eigenvalue of `XᵀX`.
    MinNonzeroEigen,
    Explicit(f64),
}

/// Prior hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hyperparameters {
    /// Slab variance scale: `β_j | γ_j = 1 ~ N(0, v1·σ²)`.
    pub v1: f64,
    /// Inverse-gamma prior on `σ²` is `IG(ν/2, νλ/2)`.
    pub nu: f64,
    pub lambda: f64,
    /// Beta prior on `θ`.
    pub a0: f64,
    pub b0: f64,
    /// Truncation bound: inclusion probabilities live in `[c, 1 - c]`.
    pub c: f64,
    pub an_policy: AnPolicy,
}

impl Default for Hyperparameters {
    fn default() -> Self {
        Self {
            v1: 1.0,
            nu: 1.0,
            lambda: 1.0,
            a0: 1.0,
            b0: 1.0,
            c: 1e-3,
            an_policy: AnPolicy::MinNonzeroEigen,
        }
    }
}

impl Hyperparameters {
    pub fn with_v1(self, v1: f64) -> Self {
        Self { v1, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::InvalidHyperparameter(format!("{name} must be positive, got {v}")))
            }
        };
        positive("v1", self.v1)?;
        positive("nu", self.nu)?;
        positive("lambda", self.lambda)?;
        positive("a0", self.a0)?;
        positive("b0", self.b0)?;
        if !(self.c > 0.0 && self.c < 0.5) {
            return Err(Error::InvalidHyperparameter(format!(
                "truncation c must lie in (0, 0.5), got {}",
                self.c
            )));
        }
        if let AnPolicy::Explicit(a) = self.an_policy {
            positive("a_n", a)?;
        }
        Ok(())
    }

    pub fn clamp_prob(&self, q: f64) -> f64 {
        q.clamp(self.c, 1.0 - self.c)
    }
}

/// Variational parameters plus the MAP point estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalState {
    /// Slab means `μ_j`.
    pub mu: DVector<f64>,
    /// Slab variances `σ_j²`.
    pub sigma2_j: DVector<f64>,
    /// Inclusion probabilities `φ_j ∈ [c, 1-c]`.
    pub phi: DVector<f64>,
    pub theta_hat: f64,
    pub sigma2_hat: f64,
    /// Coordinates whose `φ_j` reached a truncation bound and stopped moving.
    pub frozen: Vec<bool>,
    pub iter: usize,
}

impl VariationalState {
    pub fn p(&self) -> usize {
        self.mu.len()
    }

    /// Posterior mean of `β`: `β̄_j = φ_j μ_j`.
    pub fn beta_bar(&self) -> DVector<f64> {
        self.phi.component_mul(&self.mu)
    }

    pub(crate) fn check_dims(&self, p: usize) -> Result<()> {
        let ok = self.mu.len() == p
            && self.sigma2_j.len() == p
            && self.phi.len() == p
            && self.frozen.len() == p;
        if ok {
            Ok(())
        } else {
            Err(Error::DimensionMismatch(format!(
                "state has length {} but data has {p} features",
                self.mu.len()
            )))
        }
    }
}

pub(crate) fn logit(q: f64) -> f64 {
    (q / (1.0 - q)).ln()
}

pub(crate) fn expit(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}
