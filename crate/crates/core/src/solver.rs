//! Algorithm dispatch shared by tuning, benchmarking and the CLI.

use crate::batch::{fit_batch, BatchConfig};
use crate::componentwise::{fit_componentwise, ComponentwiseConfig};
use crate::error::Result;
use crate::inference::{Algorithm, FitResult};
use crate::model::{Hyperparameters, StandardizedDataset};

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SolverConfig {
    pub componentwise: ComponentwiseConfig,
    pub batch: BatchConfig,
}

impl SolverConfig {
    /// Turns off per-iteration diagnostics that only cost time in bulk runs.
    pub fn lean(mut self) -> Self {
        self.batch.record_elbo = false;
        self.batch.record_mu_trace = false;
        self
    }
}

pub fn fit(
    data: &StandardizedDataset,
    hp: &Hyperparameters,
    algorithm: Algorithm,
    cfg: &SolverConfig,
) -> Result<FitResult> {
    match algorithm {
        Algorithm::Componentwise => fit_componentwise(data, hp, &cfg.componentwise),
        Algorithm::Batch => fit_batch(data, hp, &cfg.batch),
    }
}
