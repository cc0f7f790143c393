//! K-fold cross-validation over the slab variance `v1`.

use std::io::Write;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::inference::{predict_sparse, predict_two_stage, Algorithm};
use crate::model::{standardize, Hyperparameters, RawDataset};
use crate::rng;
use crate::solver::{fit, SolverConfig};

/// Predictor used to score validation folds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scoring {
    /// Sparse posterior-mean coefficients.
    Sparse,
    /// OLS refit on the selected columns.
    TwoStage,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvConfig {
    pub folds: usize,
    pub v1_grid: Vec<f64>,
    pub scoring: Scoring,
    pub seed: u64,
}

/// Nine points log-spaced over `[1e-2, 1e2]`.
pub fn default_grid() -> Vec<f64> {
    (0..9).map(|k| 10f64.powf(-2.0 + 0.5 * k as f64)).collect()
}

impl Default for CvConfig {
    fn default() -> Self {
        Self {
            folds: 5,
            v1_grid: default_grid(),
            scoring: Scoring::Sparse,
            seed: 0,
        }
    }
}

impl CvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.folds < 2 {
            return Err(Error::InvalidInput("at least two folds are required".into()));
        }
        if self.v1_grid.is_empty() {
            return Err(Error::InvalidInput("v1 grid is empty".into()));
        }
        if let Some(bad) = self.v1_grid.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidHyperparameter(format!("grid value {bad} is not positive")));
        }
        Ok(())
    }
}

pub type Split = (Vec<usize>, Vec<usize>);

/// Shuffles `0..n` and cuts it into `folds` contiguous validation blocks whose
/// sizes differ by at most one. Returns `(train, valid)` index pairs, each
/// sorted ascending.
pub fn kfold_splits(n: usize, folds: usize, seed: u64) -> Result<Vec<Split>> {
    if folds < 2 || folds > n {
        return Err(Error::TooFewSamples { n, folds });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, 0));
    let (base, extra) = (n / folds, n % folds);
    let mut splits = Vec::with_capacity(folds);
    let mut start = 0;
    for k in 0..folds {
        let len = base + usize::from(k < extra);
        let mut valid = order[start..start + len].to_vec();
        valid.sort_unstable();
        let mut train: Vec<usize> = order[..start].iter().chain(&order[start + len..]).copied().collect();
        train.sort_unstable();
        splits.push((train, valid));
        start += len;
    }
    Ok(splits)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CvRow {
    pub v1: f64,
    pub mean_mspe: f64,
    pub stderr: f64,
    pub n_folds_ok: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvTable {
    pub rows: Vec<CvRow>,
    pub folds: usize,
}

impl CvTable {
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// A grid point is valid only if every fold fitted successfully.
    pub fn is_valid(&self, row: &CvRow) -> bool {
        row.n_folds_ok == self.folds && row.mean_mspe.is_finite()
    }
}

fn fold_mspe(
    raw: &RawDataset,
    split: &Split,
    hp: &Hyperparameters,
    algorithm: Algorithm,
    solver: &SolverConfig,
    scoring: Scoring,
) -> Result<f64> {
    let train_raw = raw.select_rows(&split.0);
    let valid_raw = raw.select_rows(&split.1);
    let train = standardize(&train_raw)?;
    let result = fit(&train, hp, algorithm, solver)?;
    let yhat = match scoring {
        Scoring::Sparse => predict_sparse(&result, &valid_raw.x)?,
        Scoring::TwoStage => predict_two_stage(&result, &train, &valid_raw.x)?.yhat,
    };
    Ok((yhat - &valid_raw.y).norm_squared() / valid_raw.n() as f64)
}

/// Scores every grid value by K-fold MSPE and returns the minimizer, breaking
/// ties toward the larger `v1`. Each training fold is standardized on its own
/// rows only.
pub fn cv_select_v1(
    raw: &RawDataset,
    hp_base: &Hyperparameters,
    cfg: &CvConfig,
    algorithm: Algorithm,
    solver: &SolverConfig,
) -> Result<(f64, CvTable)> {
    cfg.validate()?;
    hp_base.validate()?;
    let splits = kfold_splits(raw.n(), cfg.folds, cfg.seed)?;
    let solver = solver.lean();
    let jobs: Vec<(usize, usize)> = (0..cfg.v1_grid.len())
        .flat_map(|g| (0..cfg.folds).map(move |k| (g, k)))
        .collect();
    let scores: Vec<Option<f64>> = jobs
        .par_iter()
        .map(|&(g, k)| {
            let hp = hp_base.with_v1(cfg.v1_grid[g]);
            fold_mspe(raw, &splits[k], &hp, algorithm, &solver, cfg.scoring).ok()
        })
        .collect();

    let rows: Vec<CvRow> = cfg
        .v1_grid
        .iter()
        .enumerate()
        .map(|(g, &v1)| {
            let ok: Vec<f64> = scores[g * cfg.folds..(g + 1) * cfg.folds].iter().flatten().copied().collect();
            let k = ok.len();
            let mean = if k > 0 { ok.iter().sum::<f64>() / k as f64 } else { f64::NAN };
            let stderr = if k > 1 {
                let var = ok.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (k - 1) as f64;
                (var / k as f64).sqrt()
            } else {
                f64::NAN
            };
            CvRow {
                v1,
                mean_mspe: mean,
                stderr,
                n_folds_ok: k,
            }
        })
        .collect();
    let table = CvTable { rows, folds: cfg.folds };

    let mut best: Option<&CvRow> = None;
    for row in table.rows.iter().filter(|r| table.is_valid(r)) {
        best = match best {
            None => Some(row),
            Some(b) if row.mean_mspe < b.mean_mspe => Some(row),
            Some(b) if row.mean_mspe == b.mean_mspe && row.v1 > b.v1 => Some(row),
            keep => keep,
        };
    }
    let best_v1 = best.ok_or(Error::NoValidGridPoint)?.v1;
    Ok((best_v1, table))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};
    use proptest::prelude::*;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn ten_into_five() {
        let splits = kfold_splits(10, 5, 3).unwrap();
        assert_eq!(splits.len(), 5);
        let mut all: Vec<usize> = splits.iter().flat_map(|s| s.1.clone()).collect();
        assert!(splits.iter().all(|s| s.1.len() == 2 && s.0.len() == 8));
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn too_few_samples() {
        assert!(matches!(kfold_splits(3, 5, 0), Err(Error::TooFewSamples { n: 3, folds: 5 })));
        assert!(kfold_splits(3, 1, 0).is_err());
    }

    proptest! {
        #[test]
        fn splits_partition(n in 2usize..200, folds in 2usize..12, seed in any::<u64>()) {
            prop_assume!(folds <= n);
            let splits = kfold_splits(n, folds, seed).unwrap();
            let mut seen = vec![0usize; n];
            let sizes: Vec<usize> = splits.iter().map(|s| s.1.len()).collect();
            for (train, valid) in &splits {
                prop_assert_eq!(train.len() + valid.len(), n);
                for &i in valid { seen[i] += 1; }
                prop_assert!(train.iter().all(|i| valid.binary_search(i).is_err()));
            }
            prop_assert!(seen.iter().all(|&c| c == 1));
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
            prop_assert_eq!(kfold_splits(n, folds, seed).unwrap(), splits);
        }
    }

    fn sparse_problem(n: usize, seed: u64, signal: bool) -> RawDataset {
        let mut r = rng::stream(seed, 0);
        let x = DMatrix::from_fn(n, 6, |_, _| -> f64 { StandardNormal.sample(&mut r) });
        let mut y = DVector::from_fn(n, |_, _| -> f64 { StandardNormal.sample(&mut r) });
        if signal {
            y += x.column(0) * 2.0 - x.column(2) * 1.5;
        }
        RawDataset::new(y, x).unwrap()
    }

    #[test]
    fn single_point_grid_returns_it() {
        let raw = sparse_problem(40, 1, true);
        let cfg = CvConfig {
            v1_grid: vec![0.7],
            ..Default::default()
        };
        let (v1, table) =
            cv_select_v1(&raw, &Hyperparameters::default(), &cfg, Algorithm::Batch, &SolverConfig::default()).unwrap();
        assert_eq!(v1, 0.7);
        assert_eq!(table.rows.len(), 1);
        assert_eq!(table.rows[0].n_folds_ok, 5);
        assert!(table.rows[0].mean_mspe.is_finite() && table.rows[0].mean_mspe > 0.0);
    }

    #[test]
    fn deterministic_and_csv_shape() {
        let raw = sparse_problem(50, 2, true);
        let cfg = CvConfig {
            v1_grid: vec![0.01, 0.1, 1.0, 10.0, 100.0],
            seed: 11,
            ..Default::default()
        };
        let hp = Hyperparameters::default();
        let a = cv_select_v1(&raw, &hp, &cfg, Algorithm::Componentwise, &SolverConfig::default()).unwrap();
        let b = cv_select_v1(&raw, &hp, &cfg, Algorithm::Componentwise, &SolverConfig::default()).unwrap();
        assert_eq!(a, b);
        let mut buf = Vec::new();
        a.1.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "v1,mean_mspe,stderr,n_folds_ok");
        assert_eq!(lines.len(), 6);
    }

    #[test]
    fn ties_go_to_larger_v1() {
        // A pure-intercept response makes every grid point predict the fold mean.
        let raw = sparse_problem(30, 4, false);
        let raw = RawDataset::new(DVector::from_element(30, 2.5), raw.x).unwrap();
        let cfg = CvConfig {
            v1_grid: vec![0.5, 2.0, 1.0],
            ..Default::default()
        };
        let (v1, table) =
            cv_select_v1(&raw, &Hyperparameters::default(), &cfg, Algorithm::Batch, &SolverConfig::default()).unwrap();
        assert!(table.rows.iter().all(|r| r.mean_mspe == table.rows[0].mean_mspe));
        assert_eq!(v1, 2.0);
    }

    #[test]
    fn training_standardization_ignores_validation_rows() {
        // Corrupting validation rows changes nothing about the training fit.
        let raw = sparse_problem(20, 5, true);
        let splits = kfold_splits(20, 4, 0).unwrap();
        let (train, valid) = &splits[0];
        let mut corrupted = raw.clone();
        for &i in valid {
            for j in 0..6 {
                corrupted.x[(i, j)] += 100.0;
            }
        }
        let a = standardize(&raw.select_rows(train)).unwrap();
        let b = standardize(&corrupted.select_rows(train)).unwrap();
        assert_eq!(a.scaling, b.scaling);
    }

    #[test]
    fn invalid_configs() {
        let raw = sparse_problem(20, 6, true);
        let hp = Hyperparameters::default();
        for cfg in [
            CvConfig { folds: 1, ..Default::default() },
            CvConfig { v1_grid: vec![], ..Default::default() },
            CvConfig { v1_grid: vec![1.0, -1.0], ..Default::default() },
        ] {
            assert!(cv_select_v1(&raw, &hp, &cfg, Algorithm::Batch, &SolverConfig::default()).is_err());
        }
    }
}
